#include "idleak/linkage.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

namespace idleak::linkage {

using nlohmann::json;

ScoreMatrix score_matrix(const embed::EmbeddingSet& queries, const embed::EmbeddingSet& keys,
                         int n_threads) {
    if (queries.vecs.rows() == 0 || keys.vecs.rows() == 0)
        throw ConfigError("score_matrix: empty embedding set");
    if (queries.vecs.cols() != keys.vecs.cols())
        throw DimensionError("score_matrix: embedding dimension mismatch (" +
                             std::to_string(queries.vecs.cols()) + " vs " +
                             std::to_string(keys.vecs.cols()) + ")");

    ScoreMatrix m;
    m.query_labels = queries.identities;
    m.key_labels = keys.identities;
    m.query_ids = queries.sample_ids;
    m.key_ids = keys.sample_ids;
    m.query_domain = queries.domain;
    m.key_domain = keys.domain;

    const auto Q = queries.vecs.rows();
    const auto K = keys.vecs.rows();
    const auto d = queries.vecs.cols();
    m.scores.resize(Q, K);

    // Row-sharded; each entry is one fixed-order dot product, so sharding
    // cannot change any value.
    auto rows = [&](Eigen::Index r0, Eigen::Index r1) {
        for (Eigen::Index i = r0; i < r1; ++i)
            for (Eigen::Index j = 0; j < K; ++j) {
                double acc = 0.0;
                const double* a = queries.vecs.data() + i * d;
                const double* b = keys.vecs.data() + j * d;
                for (Eigen::Index t = 0; t < d; ++t) acc += a[t] * b[t];
                m.scores(i, j) = std::clamp(acc, -1.0, 1.0);
            }
    };
    if (n_threads <= 1) {
        rows(0, Q);
    } else {
        std::vector<std::thread> pool;
        const Eigen::Index chunk = (Q + n_threads - 1) / n_threads;
        for (int t = 0; t < n_threads; ++t) {
            const Eigen::Index r0 = std::min<Eigen::Index>(Q, t * chunk);
            const Eigen::Index r1 = std::min<Eigen::Index>(Q, (t + 1) * chunk);
            if (r0 < r1) pool.emplace_back(rows, r0, r1);
        }
        for (auto& th : pool) th.join();
    }
    return m;
}

RecallResult top1_recall(const ScoreMatrix& m) {
    const auto Q = m.scores.rows();
    const auto K = m.scores.cols();
    if (static_cast<std::size_t>(Q) != m.query_labels.size() ||
        static_cast<std::size_t>(K) != m.key_labels.size())
        throw DimensionError("top1_recall: label lists do not match matrix dimensions");

    const std::set<int> key_set(m.key_labels.begin(), m.key_labels.end());
    for (auto q : m.query_labels)
        if (!key_set.count(q))
            throw Error("top1_recall: open-set query identity " + std::to_string(q) +
                        " absent from keys (closed-set protocol)");

    const bool same_domain = m.query_domain == m.key_domain;
    const bool have_ids = !m.query_ids.empty() && !m.key_ids.empty();

    RecallResult res;
    res.n_queries = Q;
    long hits = 0;
    for (Eigen::Index i = 0; i < Q; ++i) {
        int best = -1;
        double best_score = -2.0;
        bool tie = false;
        for (Eigen::Index j = 0; j < K; ++j) {
            if (same_domain && have_ids && m.query_ids[static_cast<std::size_t>(i)] ==
                                               m.key_ids[static_cast<std::size_t>(j)])
                continue;  // self-pair exclusion
            const double s = m.scores(i, j);
            if (s > best_score) {
                best_score = s;
                best = static_cast<int>(j);
                tie = false;
            } else if (s == best_score) {
                tie = true;  // kept the lower key index
            }
        }
        if (best < 0) throw Error("top1_recall: query " + std::to_string(i) + " has no candidate keys");
        if (tie) res.ties++;
        if (m.key_labels[static_cast<std::size_t>(best)] == m.query_labels[static_cast<std::size_t>(i)])
            hits++;
    }
    res.recall = static_cast<double>(hits) / static_cast<double>(Q);
    return res;
}

double auroc(const std::vector<double>& genuine, const std::vector<double>& impostor) {
    if (genuine.empty() || impostor.empty()) throw ConfigError("auroc: empty score list");
    // Midrank formulation; equal to counting ordered pairs with ties at 1/2.
    struct Entry {
        double s;
        bool genuine;
    };
    std::vector<Entry> all;
    all.reserve(genuine.size() + impostor.size());
    for (double s : genuine) all.push_back({s, true});
    for (double s : impostor) all.push_back({s, false});
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.s < b.s; });

    double rank_sum_genuine = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].s == all[i].s) ++j;
        const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
        for (std::size_t k = i; k < j; ++k)
            if (all[k].genuine) rank_sum_genuine += midrank;
        i = j;
    }
    const double ng = static_cast<double>(genuine.size());
    const double ni = static_cast<double>(impostor.size());
    return (rank_sum_genuine - ng * (ng + 1.0) / 2.0) / (ng * ni);
}

ScoreSummary summarize(const std::vector<double>& scores) {
    ScoreSummary s;
    if (scores.empty()) return s;
    s.count = static_cast<long>(scores.size());
    s.min = *std::min_element(scores.begin(), scores.end());
    s.max = *std::max_element(scores.begin(), scores.end());
    s.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / scores.size();
    double var = 0.0;
    for (double v : scores) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / scores.size());
    return s;
}

json VerificationReport::to_json() const {
    auto summary = [](const ScoreSummary& s) {
        return json{{"mean", s.mean}, {"stddev", s.stddev}, {"min", s.min}, {"max", s.max}, {"count", s.count}};
    };
    return {{"accuracy", accuracy},
            {"auroc", auroc_value},
            {"threshold", threshold},
            {"genuine", summary(genuine)},
            {"impostor", summary(impostor)}};
}

VerificationReport verification_eval(const std::vector<double>& genuine,
                                     const std::vector<double>& impostor) {
    if (genuine.empty() || impostor.empty())
        throw ConfigError("verification_eval: both score lists must be nonempty");

    VerificationReport rep;
    rep.auroc_value = auroc(genuine, impostor);
    rep.genuine = summarize(genuine);
    rep.impostor = summarize(impostor);

    // Threshold maximizing balanced accuracy over the pooled score set;
    // decision rule is score >= threshold. Lowest maximizing threshold wins.
    std::vector<double> pooled;
    pooled.reserve(genuine.size() + impostor.size());
    pooled.insert(pooled.end(), genuine.begin(), genuine.end());
    pooled.insert(pooled.end(), impostor.begin(), impostor.end());
    std::sort(pooled.begin(), pooled.end());
    pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());

    std::vector<double> gs(genuine);
    std::vector<double> is(impostor);
    std::sort(gs.begin(), gs.end());
    std::sort(is.begin(), is.end());

    double best_bacc = -1.0, best_thr = 0.0;
    for (double thr : pooled) {
        const auto g_above = gs.end() - std::lower_bound(gs.begin(), gs.end(), thr);
        const auto i_below = std::lower_bound(is.begin(), is.end(), thr) - is.begin();
        const double tpr = static_cast<double>(g_above) / gs.size();
        const double tnr = static_cast<double>(i_below) / is.size();
        const double bacc = 0.5 * (tpr + tnr);
        if (bacc > best_bacc) {
            best_bacc = bacc;
            best_thr = thr;
        }
    }
    rep.accuracy = best_bacc;
    rep.threshold = best_thr;
    return rep;
}

json LinkageGrid::to_json() const {
    json grid;
    grid["query_domains"] = query_domains;
    grid["key_domains"] = key_domains;
    json rows = json::array();
    for (const auto& row : cells) {
        json r = json::array();
        for (const auto& c : row)
            r.push_back({{"recall", c.recall}, {"ties", c.ties}, {"queries", c.n_queries}});
        rows.push_back(r);
    }
    grid["cells"] = rows;
    return grid;
}

const RecallResult& LinkageGrid::cell(const std::string& q, const std::string& k) const {
    const auto qi = std::find(query_domains.begin(), query_domains.end(), q);
    const auto ki = std::find(key_domains.begin(), key_domains.end(), k);
    if (qi == query_domains.end() || ki == key_domains.end())
        throw Error("linkage grid: unknown domain pair " + q + " -> " + k);
    return cells[static_cast<std::size_t>(qi - query_domains.begin())]
                [static_cast<std::size_t>(ki - key_domains.begin())];
}

LinkageGrid linkage_matrix(const std::vector<embed::EmbeddingSet>& query_sets,
                           const std::vector<embed::EmbeddingSet>& key_sets) {
    if (query_sets.empty() || key_sets.empty()) throw ConfigError("linkage_matrix: empty domain list");
    std::set<int> universe(query_sets.front().identities.begin(), query_sets.front().identities.end());
    if (universe.size() < 2) throw ConfigError("linkage_matrix: need >= 2 identities");

    LinkageGrid grid;
    for (const auto& qs : query_sets) grid.query_domains.push_back(qs.domain);
    for (const auto& ks : key_sets) grid.key_domains.push_back(ks.domain);
    for (const auto& qs : query_sets) {
        std::vector<RecallResult> row;
        for (const auto& ks : key_sets) row.push_back(top1_recall(score_matrix(qs, ks)));
        grid.cells.push_back(std::move(row));
    }
    return grid;
}

json Histogram::to_json() const { return {{"edges", edges}, {"counts", counts}}; }

Histogram histogram(const std::vector<double>& values) {
    Histogram h;
    h.edges.resize(kHistogramBins + 1);
    for (int i = 0; i <= kHistogramBins; ++i) h.edges[i] = -1.0 + 2.0 * i / kHistogramBins;
    h.counts.assign(kHistogramBins, 0);
    for (double v : values) {
        int bin = static_cast<int>((v + 1.0) / 2.0 * kHistogramBins);
        bin = std::clamp(bin, 0, kHistogramBins - 1);
        h.counts[static_cast<std::size_t>(bin)]++;
    }
    return h;
}

json SimilarityDistributionReport::to_json() const {
    return {{"template_to_source", template_to_source.to_json()},
            {"same_identity", same_identity.to_json()},
            {"mean_template_to_source", mean_a},
            {"mean_same_identity", mean_b},
            {"mean_difference", mean_difference},
            {"count_template_to_source", count_a},
            {"count_same_identity", count_b},
            {"single_image_identities_skipped", single_image_identities_skipped}};
}

SimilarityDistributionReport similarity_distributions(const embed::EmbedderModel& teacher,
                                                      const embed::EmbedderModel& student,
                                                      const corpus::Dataset& ds,
                                                      const protect::ProtectorConfig& oracle) {
    const auto val_idx = ds.val_indices();
    if (val_idx.empty()) throw ConfigError("similarity_distributions: empty validation split");

    std::vector<double> set_a;  // cos(student(T(x)), teacher(x))
    std::vector<Eigen::VectorXd> tvecs(val_idx.size());
    for (std::size_t i = 0; i < val_idx.size(); ++i) {
        const auto& item = ds.items[val_idx[i]];
        const embed::Embedding te = embed_teacher(teacher, item.pixels);
        const embed::Embedding se = embed_student(student, protect::apply(item.pixels, oracle));
        tvecs[i] = te.vec;
        set_a.push_back(std::clamp(se.vec.dot(te.vec), -1.0, 1.0));
    }

    // Same-identity teacher pairs, each unordered pair once.
    std::map<int, std::vector<std::size_t>> by_identity;
    for (std::size_t i = 0; i < val_idx.size(); ++i)
        by_identity[ds.items[val_idx[i]].identity].push_back(i);

    std::vector<double> set_b;
    long skipped = 0;
    for (const auto& [ident, members] : by_identity) {
        if (members.size() < 2) {
            skipped++;
            continue;
        }
        for (std::size_t i = 0; i < members.size(); ++i)
            for (std::size_t j = i + 1; j < members.size(); ++j)
                set_b.push_back(std::clamp(tvecs[members[i]].dot(tvecs[members[j]]), -1.0, 1.0));
    }

    SimilarityDistributionReport rep;
    rep.template_to_source = histogram(set_a);
    rep.same_identity = histogram(set_b);
    rep.count_a = static_cast<long>(set_a.size());
    rep.count_b = static_cast<long>(set_b.size());
    rep.single_image_identities_skipped = skipped;
    rep.mean_a = set_a.empty() ? 0.0 : std::accumulate(set_a.begin(), set_a.end(), 0.0) / set_a.size();
    rep.mean_b = set_b.empty() ? 0.0 : std::accumulate(set_b.begin(), set_b.end(), 0.0) / set_b.size();
    rep.mean_difference = rep.mean_a - rep.mean_b;
    return rep;
}

}  // namespace idleak::linkage
