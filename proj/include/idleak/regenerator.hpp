#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "idleak/embedder.hpp"
#include "idleak/linkage.hpp"

namespace idleak::regen {

struct DecoderConfig {
    long steps = 1200;
    int batch_size = 24;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    bool cosine_lr = true;
    int noise_dim = 16;
    int width = 96;            // channels at the 4x4 root of the deconv stack
    double embed_weight = 1.0;  // identity-consistency term
    double pixel_weight = 0.5;  // stabilizing pixel term
};

// Embedding + noise -> 64x64x3 conditional decoder; the desk-scale stand-in
// for a diffusion backend behind the same (embedding, noise) -> image
// interface.
struct DecoderModel {
    nn::Sequential net;
    int embed_dim = 128;
    int noise_dim = 16;
    nlohmann::json manifest;
};

// Maps the true nuisance factors of a training image onto the leading noise
// coordinates (pose, translation, gain, then a seeded Gaussian tail), so the
// noise input genuinely plays the role of z_N during training and a fresh
// N(0, I) draw plays a fresh nuisance at attack time.
std::vector<double> nuisance_to_noise(const corpus::NuisanceLatent& nu, int noise_dim);

DecoderModel train_decoder(const embed::EmbedderModel& teacher, const corpus::Dataset& ds,
                           const DecoderConfig& cfg);

// k images from k seeded noise draws; deterministic in (embedding, k, seed).
std::vector<Image> regenerate(const DecoderModel& decoder, const Eigen::VectorXd& embedding, int k,
                              std::uint64_t seed);

void save_decoder(const DecoderModel& model, const std::filesystem::path& dir);
DecoderModel load_decoder(const std::filesystem::path& dir);

// Pixel-loss reconstruction baseline (template -> image, per-pixel MSE only).
struct PixelBaselineConfig {
    long steps = 600;
    int batch_size = 24;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    bool cosine_lr = true;
    int width = 48;
};
struct PixelBaselineModel {
    nn::Sequential net;
    int in_c = 3, in_h = 64, in_w = 64;
    nlohmann::json manifest;
};
PixelBaselineModel train_pixel_baseline(const protect::ProtectorConfig& oracle,
                                        const corpus::Dataset& ds, const PixelBaselineConfig& cfg);
Image pixel_baseline_reconstruct(const PixelBaselineModel& model,
                                 const protect::ProtectedTemplate& tpl);

// FAR level -> score threshold, from the empirical impostor distribution.
// threshold(f) is the ceil(f*M)-th largest of M impostor scores.
struct CalibratedThresholds {
    std::map<double, double> thresholds;  // FAR -> threshold (ascending FAR keys)
    long impostor_count = 0;
    std::uint64_t seed = 0;
    nlohmann::json to_json() const;
    static CalibratedThresholds from_json(const nlohmann::json& j);
};

CalibratedThresholds thresholds_from_scores(std::vector<double> impostor_scores,
                                            const std::vector<double>& levels, std::uint64_t seed);

// Scores impostor pairs (different identities) sampled from the calibration
// corpus under the teacher. Rejects when n_pairs < 10 / min(level).
CalibratedThresholds calibrate_thresholds(const embed::EmbedderModel& teacher,
                                          const corpus::Dataset& calibration,
                                          const std::vector<double>& levels, long n_pairs,
                                          std::uint64_t seed);

// Fresh impostor scores for empirical FAR validation.
std::vector<double> impostor_scores(const embed::EmbedderModel& teacher,
                                    const corpus::Dataset& corpus_ds, long n_pairs,
                                    std::uint64_t seed);

// Strictest accepted FAR level (smallest f with score >= threshold(f)); 0
// means no level accepted.
struct VerifyOutcome {
    double strictest_far = 0.0;
    double score = 0.0;
    std::string reason;  // "ok", "no_face", ...
};
VerifyOutcome verify_local(const embed::EmbedderModel& teacher, const Image& a, const Image& b,
                           const CalibratedThresholds& th);
double strictest_level(double score, const CalibratedThresholds& th);

// Remote verifier abstraction. Transient failures are thrown as the error
// classes below; remote_verify retries them up to `retries` extra attempts.
class VerifierTimeout : public Error {
public:
    using Error::Error;
};
class VerifierQuotaExceeded : public Error {
public:
    using Error::Error;
};
class VerifierMalformedResponse : public Error {
public:
    using Error::Error;
};

class VerifierClient {
public:
    virtual ~VerifierClient() = default;
    virtual VerifyOutcome verify(const Image& a, const Image& b) = 0;
};

// Configuration for a real HTTP backend; credentials come from the named
// environment variable, never from config files.
struct RemoteVerifierConfig {
    std::string endpoint_url;
    std::string auth_token_env = "IDLEAK_VERIFIER_TOKEN";
    int timeout_ms = 5000;
    int retries = 2;
};

struct MockVerifierConfig {
    double timeout_rate = 0.0;
    double quota_rate = 0.0;
    double malformed_rate = 0.0;
    double noface_rate = 0.0;
    std::uint64_t seed = 0;
};

// Wraps verify_local; at zero injection it is exactly the local verifier.
class MockVerifierClient : public VerifierClient {
public:
    MockVerifierClient(const embed::EmbedderModel& teacher, CalibratedThresholds thresholds,
                       MockVerifierConfig cfg);
    VerifyOutcome verify(const Image& a, const Image& b) override;

private:
    const embed::EmbedderModel& teacher_;
    CalibratedThresholds thresholds_;
    MockVerifierConfig cfg_;
    rng::Engine eng_;
};

VerifyOutcome remote_verify(VerifierClient& client, const Image& a, const Image& b, int retries);

// Table-2-style metrics. Pass@f is the FIRST attempt's pass rate at level f;
// Success@k is the fraction of identities with ANY attempt passing at the
// baseline level (1e-3) or stricter. Both conventions are recorded in the
// report header.
struct RegenReport {
    std::vector<std::string> identities;                   // item keys, sorted
    std::map<std::string, std::vector<double>> attempts;   // strictest FAR per attempt (0 = fail)
    int attempts_per_identity = 0;
    std::map<double, double> pass_at;                      // FAR level -> first-attempt rate
    std::vector<double> success_at;                        // success@j for j = 1..k
    double baseline_level = 1e-3;
    nlohmann::json header;
    nlohmann::json to_json() const;
};
RegenReport success_metrics(const std::map<std::string, std::vector<double>>& attempts_per_identity,
                            const CalibratedThresholds& th, double baseline_level = 1e-3);

}  // namespace idleak::regen
