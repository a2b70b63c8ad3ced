#pragma once

#include <string>
#include <vector>

#include "idleak/embedder.hpp"
#include "json.hpp"

namespace idleak::probes {

// Embedding rows with per-row attributes and identity labels.
struct ProbeData {
    nn::RowMat embeddings;  // N x d
    std::vector<corpus::SoftAttributes> attributes;
    std::vector<int> identities;
};

struct ProbeConfig {
    long steps = 1500;
    int batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    bool cosine_lr = true;
    int hidden = 64;
};

// Shared two-layer trunk with one head per attribute. Heads for attributes
// with a single observed class are skipped (with a warning in the manifest).
struct ProbeModel {
    nn::Sequential trunk;        // d -> h -> h
    nn::Sequential group_head;   // h -> 7
    nn::Sequential binary_head;  // h -> 2
    nn::Sequential scalar_head;  // h -> 1
    bool group_enabled = true, binary_enabled = true;
    int embed_dim = 0, hidden = 0;
    // Baselines measured on the training set.
    int train_majority_group = 0, train_majority_binary = 0;
    double train_scalar_median = 0.0;
    std::vector<int> train_identities;  // for the disjointness contract
    nlohmann::json manifest;
};

ProbeModel train_probe(const ProbeData& train, const ProbeConfig& cfg);

struct ProbeReport {
    double group_accuracy = 0.0;
    double binary_accuracy = 0.0;
    double scalar_mae = 0.0;
    double chance_group = 0.0;   // majority-class rate on the test set
    double chance_binary = 0.0;
    double baseline_mae = 0.0;   // MAE of predicting the training median
    long n_test = 0;
    bool group_enabled = true, binary_enabled = true;
    nlohmann::json to_json() const;
};

// Throws if the test set is empty or shares identities with probe training.
ProbeReport probe_eval(const ProbeModel& model, const ProbeData& test);

// Per-pair pixel metrics on the 8-bit [0,255] scale (continuous, x*255).
// PSNR = 10*log10(255^2 / MSE), capped at 99 dB when MSE < 1e-10. SSIM uses
// an 8x8 uniform sliding window with C1=(0.01*255)^2, C2=(0.03*255)^2.
struct PixelMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
    double mse = 0.0;
};
PixelMetrics pixel_metrics(const Image& a, const Image& b);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct PairRecord {
    double psnr, ssim, mse, identity_similarity;
};

struct MetricDisconnectReport {
    std::vector<PairRecord> same_identity_pairs;   // set (i)
    std::vector<PairRecord> cross_identity_pairs;  // set (ii)
    double mean_psnr_same = 0.0, mean_psnr_cross = 0.0;
    double mean_idsim_same = 0.0, mean_idsim_cross = 0.0;
    double spearman_psnr_idsim = 0.0;
    bool pattern_holds = false;  // PSNR(cross) > PSNR(same) while idsim(cross) < idsim(same)
    nlohmann::json to_json() const;
};

// Computes metrics over two constructed pair sets; each must have >= 20 pairs.
MetricDisconnectReport metric_disconnect(const embed::EmbedderModel& teacher,
                                         const std::vector<std::pair<Image, Image>>& same_identity,
                                         const std::vector<std::pair<Image, Image>>& cross_identity);

// Builds the contrast sets from the synthetic generator: (i) same identity
// under opposite nuisance extremes, (ii) nearest-latent identity pairs under
// one shared neutral nuisance.
struct DisconnectPairs {
    std::vector<std::pair<Image, Image>> same_identity;
    std::vector<std::pair<Image, Image>> cross_identity;
};
DisconnectPairs build_disconnect_pairs(std::uint64_t seed, int n_pairs, int candidate_pool = 600);

}  // namespace idleak::probes
