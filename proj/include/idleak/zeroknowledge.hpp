#pragma once

#include <map>
#include <string>
#include <vector>

#include "idleak/embedder.hpp"
#include "idleak/linkage.hpp"
#include "idleak/regenerator.hpp"

namespace idleak::zk {

// Augmentation ranges for the generic blur-subtraction proxy task.
struct ProxyAugmentation {
    double sigma_lo = 0.8, sigma_hi = 3.0;
    double strength_lo = 0.5, strength_hi = 1.5;
    nlohmann::json to_json() const;
};

// Trains one proxy student on raw images only: per sample, the input is
// strength * (x - blur(x, sigma)) with (sigma, strength) drawn per
// (step, slot). No protector configuration enters this path; the manifest
// records oracle-free provenance.
embed::EmbedderModel zk_train(const embed::EmbedderModel& teacher, const corpus::Dataset& ds,
                              const ProxyAugmentation& aug, const embed::DistillConfig& cfg);

// Per-method mapping into the proxy's 3-channel high-pass domain:
//   HIGHPASS -> passthrough
//   MINUS    -> one more Gaussian-blur high-pass (fixed sigma)
//   PARTIAL  -> zero-filled inverse-DCT rendering to the image domain
struct ZkPreprocessConfig {
    double minus_sigma = 1.5;
};
Chw zk_preprocess(const protect::ProtectedTemplate& tpl, const protect::ProtectorConfig& tpl_config,
                  const ZkPreprocessConfig& cfg);
std::string zk_preprocess_mapping(protect::Method m);

// Exactly 30 image-template pairs; validation only. The training path cannot
// receive this type.
class ZkValidationSet {
public:
    static constexpr int kPairCount = 30;
    ZkValidationSet(std::vector<std::pair<Image, protect::ProtectedTemplate>> pairs,
                    std::string provenance);
    const std::vector<std::pair<Image, protect::ProtectedTemplate>>& pairs() const { return pairs_; }
    const std::string& provenance() const { return provenance_; }

private:
    std::vector<std::pair<Image, protect::ProtectedTemplate>> pairs_;
    std::string provenance_;
};

struct ZkValidationReport {
    double mean_cosine = 0.0;
    double floor = 0.3;
    bool go = false;
    std::string provenance;
    nlohmann::json to_json() const;
};
ZkValidationReport zk_validate(const embed::EmbedderModel& proxy, const ZkValidationSet& set,
                               const embed::EmbedderModel& teacher,
                               const protect::ProtectorConfig& tpl_config,
                               const ZkPreprocessConfig& pre, double floor = 0.3);

// Full assumption-constrained evaluation: one proxy model against every
// protector's template set, reusing the linkage and regeneration machinery
// with the local verifier.
struct ZkProtectorResult {
    std::string method;
    linkage::RecallResult top1;
    linkage::VerificationReport verification;
    regen::RegenReport regen_report;
};
struct ZkAttackReport {
    std::string proxy_params_hash;
    std::map<std::string, std::string> preprocess_mapping;
    std::vector<ZkProtectorResult> per_protector;
    nlohmann::json to_json() const;
};
ZkAttackReport zk_attack_eval(const embed::EmbedderModel& proxy,
                              const std::vector<std::pair<protect::ProtectorConfig,
                                                          std::vector<protect::ProtectedTemplate>>>& sets,
                              const embed::EmbedderModel& teacher, const corpus::Dataset& ds,
                              const regen::DecoderModel& decoder,
                              const regen::CalibratedThresholds& thresholds,
                              const ZkPreprocessConfig& pre, int attempts, std::uint64_t seed);

}  // namespace idleak::zk
