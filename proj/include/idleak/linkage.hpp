#pragma once

#include <map>
#include <string>
#include <vector>

#include "idleak/embedder.hpp"
#include "json.hpp"

namespace idleak::linkage {

// Exhaustive queries x keys cosine matrix; exact, no approximation.
struct ScoreMatrix {
    nn::RowMat scores;  // Q x K, entries in [-1, 1]
    std::vector<int> query_labels, key_labels;
    std::vector<std::string> query_ids, key_ids;
    std::string query_domain, key_domain;
};

// n_threads > 1 shards rows; per-entry summation order is fixed, so the
// result is identical to the sequential computation.
ScoreMatrix score_matrix(const embed::EmbeddingSet& queries, const embed::EmbeddingSet& keys,
                         int n_threads = 1);

struct RecallResult {
    double recall = 0.0;
    long ties = 0;  // argmax ties encountered (broken toward the lowest key index)
    long n_queries = 0;
};

// Closed-set top-1 recall. Self-pairs (same sample_id) are excluded from the
// argmax when query and key domains coincide. Throws Error naming the
// identity if any query identity is absent from the keys.
RecallResult top1_recall(const ScoreMatrix& m);

// Rank-based AUROC, ties counted 1/2; equals exhaustive ordered-pair counting.
double auroc(const std::vector<double>& genuine, const std::vector<double>& impostor);

struct ScoreSummary {
    double mean = 0.0, stddev = 0.0, min = 0.0, max = 0.0;
    long count = 0;
};
ScoreSummary summarize(const std::vector<double>& scores);

struct VerificationReport {
    double accuracy = 0.0;  // balanced accuracy at the best pooled threshold
    double auroc_value = 0.0;
    double threshold = 0.0;
    ScoreSummary genuine, impostor;
    nlohmann::json to_json() const;
};
VerificationReport verification_eval(const std::vector<double>& genuine,
                                     const std::vector<double>& impostor);

struct LinkageGrid {
    std::vector<std::string> query_domains, key_domains;
    std::vector<std::vector<RecallResult>> cells;  // [q][k]
    nlohmann::json to_json() const;
    const RecallResult& cell(const std::string& q, const std::string& k) const;
};
LinkageGrid linkage_matrix(const std::vector<embed::EmbeddingSet>& query_sets,
                           const std::vector<embed::EmbeddingSet>& key_sets);

constexpr int kHistogramBins = 64;  // uniform over [-1, 1]

struct Histogram {
    std::vector<double> edges;  // kHistogramBins + 1
    std::vector<long> counts;   // kHistogramBins
    nlohmann::json to_json() const;
};
Histogram histogram(const std::vector<double>& values);

// Template-to-own-source similarity (set A) vs same-identity image-to-image
// similarity (set B) over the validation split.
struct SimilarityDistributionReport {
    Histogram template_to_source, same_identity;
    double mean_a = 0.0, mean_b = 0.0, mean_difference = 0.0;
    long count_a = 0, count_b = 0;
    long single_image_identities_skipped = 0;
    nlohmann::json to_json() const;
};
SimilarityDistributionReport similarity_distributions(const embed::EmbedderModel& teacher,
                                                      const embed::EmbedderModel& student,
                                                      const corpus::Dataset& ds,
                                                      const protect::ProtectorConfig& oracle);

}  // namespace idleak::linkage
