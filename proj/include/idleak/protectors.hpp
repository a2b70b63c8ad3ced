#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "idleak/corpus.hpp"
#include "idleak/image.hpp"
#include "json.hpp"

namespace idleak::protect {

enum class Method { PARTIAL, MINUS, HIGHPASS };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

// Reference protector parameterization. PARTIAL keeps a seeded random subset
// of block-DCT sub-bands (never the n_lowest_dropped lowest zigzag indices);
// MINUS/HIGHPASS keep the blur-subtraction residual.
struct ProtectorConfig {
    Method method = Method::HIGHPASS;
    std::uint64_t seed = 0;
    // PARTIAL
    int block_size = 8;
    int n_selected = 24;
    int n_lowest_dropped = 8;
    // MINUS / HIGHPASS
    double sigma = 1.5;

    nlohmann::json to_json() const;
    static ProtectorConfig from_json(const nlohmann::json& j);
    std::string hash() const;

    // Declared output channel count: PARTIAL stacks the 3 color planes of each
    // selected sub-band; residual methods keep the 3 image channels.
    int channels() const;
    int spatial() const;  // output H' = W'
};

struct ProtectedTemplate {
    Chw tensor;
    Method method = Method::HIGHPASS;
    std::string config_hash;
    // Evaluation bookkeeping only; no attack-path operation may read it.
    std::optional<std::string> source_id;
};

// Validates ranges; throws ConfigError with the offending field named.
void validate(const ProtectorConfig& cfg);

// The conversion oracle: deterministic, stateless, batch-queryable.
ProtectedTemplate apply(const Image& image, const ProtectorConfig& cfg);

ProtectedTemplate protect_partial(const Image& image, const ProtectorConfig& cfg);
ProtectedTemplate protect_minus(const Image& image, const ProtectorConfig& cfg);
ProtectedTemplate protect_highpass(const Image& image, const ProtectorConfig& cfg);

// Selected zigzag sub-band indices for a PARTIAL config, ascending.
std::vector<int> selected_subbands(const ProtectorConfig& cfg);

// Renders a PARTIAL template back to the image domain by zero-filling the
// missing sub-bands and inverting the block DCT. Exact when the template
// retains all sub-bands.
Image partial_to_image(const ProtectedTemplate& tpl, const ProtectorConfig& cfg);

// Gaussian blur with replicate borders (constants are preserved exactly).
Image gaussian_blur(const Image& img, double sigma);
// image - blur(image): the shared high-pass residual, as a 3-channel volume.
Chw highpass_residual(const Image& img, double sigma);

// Zigzag scan order for an n x n block (index 0 = DC).
std::vector<std::pair<int, int>> zigzag_order(int n);

// Template container: manifest.json (config + hash) plus <sample_id>.flgt.
void write_templates(const std::filesystem::path& dir, const ProtectorConfig& cfg,
                     const std::vector<ProtectedTemplate>& tpls, bool overwrite);
struct TemplateSet {
    ProtectorConfig config;
    std::vector<ProtectedTemplate> items;
};
TemplateSet read_templates(const std::filesystem::path& dir);

}  // namespace idleak::protect
