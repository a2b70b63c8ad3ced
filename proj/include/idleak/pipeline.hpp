#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idleak/corpus.hpp"
#include "idleak/embedder.hpp"
#include "idleak/probes.hpp"
#include "idleak/protectors.hpp"
#include "idleak/regenerator.hpp"
#include "idleak/zeroknowledge.hpp"
#include "json.hpp"

namespace idleak::pipeline {

inline const char* kToolVersion = "idleak 0.1.0";

// Whole-experiment configuration. Serializes canonically (sorted keys) so the
// config hash is stable; every section carries an explicit seed.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string output_root = "runs/default";

    corpus::CorpusManifest corpus{1, 250, 10, {}, {}};
    corpus::CorpusManifest calibration{77, 120, 6, {}, {}};

    std::vector<protect::ProtectorConfig> protectors;  // defaults: partial, minus, highpass

    embed::TrainConfig teacher;
    embed::DistillConfig distill;
    embed::DistillConfig zk_distill;
    zk::ProxyAugmentation zk_aug;
    double zk_minus_sigma = 1.5;
    double zk_floor = 0.3;
    std::uint64_t zk_pairs_seed = 23;

    regen::DecoderConfig decoder;
    regen::PixelBaselineConfig baseline;

    std::vector<double> far_levels{1e-3, 1e-4, 1e-5};
    long calibration_pairs = 1000000;
    std::uint64_t calibrate_seed = 13;
    long far_check_pairs = 100000;
    std::uint64_t far_check_seed = 14;

    int regen_attempts = 5;
    std::uint64_t regen_seed = 17;

    probes::ProbeConfig probe;
    std::uint64_t probe_control_seed = 19;

    int disconnect_pairs = 30;
    std::uint64_t disconnect_seed = 29;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig defaults();
    std::string hash() const;
};

// One pipeline stage's record in the run manifest.
struct StageRecord {
    std::string name;
    std::string stage_key;  // sha256 of (name, stage config, input hashes)
    std::map<std::string, std::string> artifacts;  // relative path -> content hash
    double wall_seconds = 0.0;
    bool cached = false;
};

struct RunManifest {
    std::string config_hash;
    std::string tool_version = kToolVersion;
    std::vector<StageRecord> stages;
    nlohmann::json to_json() const;
};

// Stage names, in topological order.
std::vector<std::string> all_stages();

struct RunOptions {
    std::vector<std::string> stages;  // empty = all
    bool use_cache = true;
};

// Executes the pipeline under config.output_root. Artifacts are content
// addressed: a stage re-runs only when its stage key or any artifact hash
// changed; tampered artifacts raise HashMismatchError naming the file.
RunManifest run_pipeline(const RunConfig& config, const RunOptions& options = {});

// Consolidated metrics produced by the evaluation stages (results.json).
nlohmann::json load_results(const std::filesystem::path& output_root);

// Report emission: stable field ordering; markdown renders the linkage grid
// and regeneration table in the conventional query/key and method/metric
// orientation.
void emit_report(const nlohmann::json& results, const std::filesystem::path& out_dir,
                 const std::string& format);

std::filesystem::path cache_root_override();  // honors IDLEAK_CACHE_DIR

}  // namespace idleak::pipeline
