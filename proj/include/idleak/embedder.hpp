#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "idleak/corpus.hpp"
#include "idleak/nn.hpp"
#include "idleak/protectors.hpp"

namespace idleak::embed {

enum class Source { TEACHER, STUDENT, PROXY_STUDENT };
std::string source_name(Source s);
Source source_from_name(const std::string& name);

// Unit-norm identity vector. subject_hint is evaluation bookkeeping only and
// never feeds any attack-path computation.
struct Embedding {
    Eigen::VectorXd vec;
    Source source = Source::TEACHER;
    std::optional<std::string> subject_hint;
};

double cosine(const Embedding& a, const Embedding& b);

// Batch of embeddings with evaluation labels; rows are unit vectors.
struct EmbeddingSet {
    nn::RowMat vecs;  // N x d
    std::vector<std::string> sample_ids;
    std::vector<int> identities;
    Source source = Source::TEACHER;
    std::string domain;  // e.g. "teacher-original", "student-minus"
};

struct TrainConfig {
    long steps = 600;
    int batch_size = 64;
    double lr = 2e-3;
    std::uint64_t seed = 0;
    bool cosine_lr = true;
    double margin = 0.2;  // additive-margin softmax
    double scale = 16.0;
    int width = 16;      // base conv width of the trunk
    int embed_dim = 128;
};

struct DistillConfig {
    long steps = 3000;
    int batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    bool cosine_lr = true;
    int width = 16;
    // embed_dim follows the teacher
};

// Trunk + (for students) channel-adapter front end. The network ends in an
// L2-normalize layer, so outputs are unit by construction.
struct EmbedderModel {
    nn::Sequential net;
    Source source = Source::TEACHER;
    int in_c = 3;
    int in_h = corpus::kImageSide;
    int in_w = corpus::kImageSide;
    int embed_dim = 128;
    nlohmann::json manifest;  // seed, config, loss curve, data hash, metrics
};

// Appends the fixed convolutional trunk (expects 3 x 64 x 64 at the current
// network output) followed by GAP, a linear head and L2 normalization.
void append_trunk(nn::Sequential& net, rng::Engine& eng, int width, int embed_dim);

// Trains the teacher with additive-margin softmax over train identities.
// Fails (Error) when final-epoch accuracy is below twice chance.
EmbedderModel train_teacher(const corpus::Dataset& ds, const TrainConfig& cfg);

Embedding embed_teacher(const EmbedderModel& teacher, const Image& image);

// Cosine-distills a student against the protect oracle: templates are
// generated on the fly per batch, the teacher stays frozen.
EmbedderModel distill_student(const EmbedderModel& teacher, const protect::ProtectorConfig& oracle,
                              const corpus::Dataset& ds, const DistillConfig& cfg);

Embedding embed_student(const EmbedderModel& student, const protect::ProtectedTemplate& tpl);

// Batch helpers (fixed input order -> deterministic output order).
EmbeddingSet embed_images(const EmbedderModel& teacher, const corpus::Dataset& ds,
                          const std::vector<std::size_t>& indices, const std::string& domain);
EmbeddingSet embed_templates(const EmbedderModel& student,
                             const std::vector<protect::ProtectedTemplate>& tpls,
                             const std::vector<std::string>& sample_ids,
                             const std::vector<int>& identities, const std::string& domain);

// Model directory: model.flgm + manifest.json.
void save_embedder(const EmbedderModel& model, const std::filesystem::path& dir);
EmbedderModel load_embedder(const std::filesystem::path& dir);

// Embedding-set directory: embeddings.flgt (N x d, f64) + meta.json.
void save_embedding_set(const EmbeddingSet& set, const std::filesystem::path& dir);
EmbeddingSet load_embedding_set(const std::filesystem::path& dir);

// Stable digest of the samples a model was trained on.
std::string dataset_fingerprint(const corpus::Dataset& ds);

// Internal helpers shared with other trainers.
std::vector<double> image_to_input(const Image& img);
std::vector<double> chw_to_input(const Chw& t);

}  // namespace idleak::embed
