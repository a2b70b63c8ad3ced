#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "idleak/image.hpp"

namespace idleak::corpus {

constexpr int kImageSide = 64;
constexpr int kLatentDim = 16;
inline const char* kRendererVersion = "r1";

// Identity factor z_I: 16 coordinates in [-1, 1] plus an integer label.
struct IdentityLatent {
    int id = 0;
    std::array<double, kLatentDim> vec{};
};

// Nuisance factor z_N: the per-image conditions identity is invariant to.
struct NuisanceLatent {
    double pose_deg = 0.0;          // in [-20, 20]
    double translate_x = 0.0;       // pixels, in [-3, 3]
    double translate_y = 0.0;       // pixels, in [-3, 3]
    double lighting_gain = 1.0;     // in [0.6, 1.4]
    std::uint64_t noise_seed = 0;   // seeds the additive pixel noise field
};

// Per-identity soft attributes, the leakage targets: a 7-class group, a
// binary flag, and a scalar in [0, 100].
struct SoftAttributes {
    int group = 0;        // in {0..6}: selects the hue band of the face chroma
    int binary_attr = 0;  // in {0,1}: round vs squared jaw contour
    double scalar_attr = 0.0;  // in [0,100]: facial texture stripe frequency
};

struct ImageSample {
    std::string sample_id;
    IdentityLatent identity;
    NuisanceLatent nuisance;
    SoftAttributes attributes;
    Image pixels;  // 64x64x3, clamped to [0,1]
};

struct CorpusManifest {
    std::uint64_t seed = 1;
    int n_identities = 0;
    int images_per_identity = 0;
    std::vector<int> train_ids;
    std::vector<int> val_ids;
};

struct RenderOptions {
    double noise_amplitude = 0.02;  // additive uniform noise half-range
};

// Deterministic draws: same (seed, id/index) always reproduces the same value.
IdentityLatent sample_identity(std::uint64_t seed, int id);
NuisanceLatent sample_nuisance(std::uint64_t seed, int id, int image_index);
SoftAttributes sample_attributes(std::uint64_t seed, int id);

// The ground-truth p(x | z_I, z_N): a pure procedural renderer. Throws
// ConfigError on out-of-range latents.
ImageSample render_face(const IdentityLatent& identity, const NuisanceLatent& nuisance,
                        const SoftAttributes& attributes, const RenderOptions& opts = {});

std::string make_sample_id(int id, int image_index);

// In-memory dataset handle. Synthetic corpora carry ground-truth latents;
// ingested external data does not.
struct DatasetItem {
    std::string sample_id;
    int identity = 0;
    Image pixels;
    std::optional<SoftAttributes> attributes;
    std::optional<IdentityLatent> identity_latent;
    std::optional<NuisanceLatent> nuisance;
};

struct Dataset {
    CorpusManifest manifest;
    std::vector<DatasetItem> items;
    bool synthetic = false;
    std::vector<std::string> warnings;

    std::vector<std::size_t> train_indices() const;
    std::vector<std::size_t> val_indices() const;
    const DatasetItem& by_sample_id(const std::string& id) const;
};

// Generates the synthetic corpus in memory (identity-disjoint 80/20 split on
// identity ids) and, for the disk variants, writes the corpus container:
// manifest.json + attributes.json + one <sample_id>.flgt per sample.
Dataset generate_corpus(const CorpusManifest& manifest);
void write_corpus(const Dataset& ds, const std::filesystem::path& dir, bool overwrite);
Dataset generate_corpus_to(const CorpusManifest& manifest, const std::filesystem::path& dir,
                           bool overwrite);
Dataset load_corpus(const std::filesystem::path& dir);

// Folder-per-identity ingestion (PNG files). Unreadable files produce
// per-file warnings; throws only when zero samples load.
Dataset ingest_external(const std::filesystem::path& dir);

}  // namespace idleak::corpus
