#include "idleak/zeroknowledge.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "idleak/hashing.hpp"

namespace idleak::zk {

using nlohmann::json;

json ProxyAugmentation::to_json() const {
    return {{"sigma", {sigma_lo, sigma_hi}}, {"strength", {strength_lo, strength_hi}}};
}

embed::EmbedderModel zk_train(const embed::EmbedderModel& teacher, const corpus::Dataset& ds,
                              const ProxyAugmentation& aug, const embed::DistillConfig& cfg) {
    if (!(aug.sigma_lo > 0.0) || aug.sigma_hi < aug.sigma_lo)
        throw ConfigError("zk_train: sigma range must be positive and nonempty");
    if (!(aug.strength_lo > 0.0) || aug.strength_hi < aug.strength_lo)
        throw ConfigError("zk_train: strength range must be positive and nonempty");
    if (cfg.steps < 1 || cfg.batch_size < 1 || !(cfg.lr > 0))
        throw ConfigError("zk_train: steps/batch_size/lr out of range");
    const auto train_idx = ds.train_indices();
    if (train_idx.empty()) throw ConfigError("zk_train: empty training split");

    embed::EmbedderModel proxy;
    proxy.source = embed::Source::PROXY_STUDENT;
    proxy.embed_dim = teacher.embed_dim;
    proxy.in_c = 3;
    auto eng = rng::engine(rng::derive(cfg.seed, "proxy-init"));
    proxy.net.add_conv(3, corpus::kImageSide, corpus::kImageSide, 3, 3, 1, 1, &eng);
    embed::append_trunk(proxy.net, eng, cfg.width, teacher.embed_dim);

    std::unordered_map<std::size_t, std::vector<double>> emb_cache;
    auto teacher_emb = [&](std::size_t idx) -> const std::vector<double>& {
        auto it = emb_cache.find(idx);
        if (it == emb_cache.end()) {
            const embed::Embedding e = embed_teacher(teacher, ds.items[idx].pixels);
            it = emb_cache.emplace(idx, std::vector<double>(e.vec.data(), e.vec.data() + e.vec.size()))
                     .first;
        }
        return it->second;
    };

    nn::Adam opt(proxy.net.params.size(), cfg.lr);
    std::vector<double> grads(proxy.net.params.size());
    std::vector<double> demb(static_cast<std::size_t>(teacher.embed_dim));
    nn::Sequential::Tape tape;

    std::vector<std::size_t> order(train_idx);
    std::size_t pos = 0;
    long epoch = 0;
    auto reshuffle = [&]() {
        auto oeng = rng::engine(rng::derive(cfg.seed, "proxy-order", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng::below(oeng, i))]);
    };
    reshuffle();

    std::vector<double> loss_curve;
    for (long step = 0; step < cfg.steps; ++step) {
        std::fill(grads.begin(), grads.end(), 0.0);
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (pos == order.size()) {
                pos = 0;
                ++epoch;
                reshuffle();
            }
            const std::size_t idx = order[pos++];
            // Per-sample augmentation stream: (seed, step, slot).
            auto aeng = rng::engine(rng::derive(cfg.seed, "proxy-aug", static_cast<std::uint64_t>(step),
                                                static_cast<std::uint64_t>(b)));
            const double sigma = rng::uniform(aeng, aug.sigma_lo, aug.sigma_hi);
            const double strength = rng::uniform(aeng, aug.strength_lo, aug.strength_hi);
            Chw hp = protect::highpass_residual(ds.items[idx].pixels, sigma);
            for (auto& v : hp.v) v *= static_cast<float>(strength);

            const auto x = embed::chw_to_input(hp);
            const double* emb = proxy.net.forward(x.data(), tape);
            batch_loss += nn::cosine_alignment_loss(emb, teacher_emb(idx).data(), teacher.embed_dim,
                                                    demb.data());
            proxy.net.backward(x.data(), demb.data(), tape, nullptr, grads.data());
        }
        const double inv = 1.0 / cfg.batch_size;
        for (auto& g : grads) g *= inv;
        batch_loss *= inv;
        if (!std::isfinite(batch_loss))
            throw Error("zk_train: non-finite loss at step " + std::to_string(step));
        opt.step(proxy.net.params.data(), grads.data(), grads.size(),
                 cfg.cosine_lr ? nn::cosine_decay(step, cfg.steps) : 1.0);
        loss_curve.push_back(batch_loss);
    }

    proxy.manifest = {{"kind", "proxy-student"},
                      {"oracle_free", true},
                      {"proxy_task", "gaussian-blur high-pass residual"},
                      {"augmentation", aug.to_json()},
                      {"seed", cfg.seed},
                      {"steps", cfg.steps},
                      {"batch_size", cfg.batch_size},
                      {"lr", cfg.lr},
                      {"width", cfg.width},
                      {"loss_curve", loss_curve},
                      {"data_hash", embed::dataset_fingerprint(ds)}};
    return proxy;
}

std::string zk_preprocess_mapping(protect::Method m) {
    switch (m) {
        case protect::Method::HIGHPASS: return "passthrough";
        case protect::Method::MINUS: return "gaussian high-pass (fixed sigma)";
        case protect::Method::PARTIAL: return "zero-filled inverse-DCT rendering";
    }
    throw ConfigError("zk_preprocess: unknown method tag");
}

Chw zk_preprocess(const protect::ProtectedTemplate& tpl, const protect::ProtectorConfig& tpl_config,
                  const ZkPreprocessConfig& cfg) {
    switch (tpl.method) {
        case protect::Method::HIGHPASS:
            return tpl.tensor;
        case protect::Method::MINUS: {
            // Residuals are not [0,1] images, but the high-pass filter is
            // linear so its action on residual channels is well-defined.
            return protect::highpass_residual(chw_to_image(tpl.tensor), cfg.minus_sigma);
        }
        case protect::Method::PARTIAL: {
            const Image rendered = protect::partial_to_image(tpl, tpl_config);
            return image_to_chw(rendered);
        }
    }
    throw ConfigError("zk_preprocess: unknown method tag");
}

ZkValidationSet::ZkValidationSet(std::vector<std::pair<Image, protect::ProtectedTemplate>> pairs,
                                 std::string provenance)
    : pairs_(std::move(pairs)), provenance_(std::move(provenance)) {
    if (pairs_.size() != kPairCount)
        throw ConfigError("ZkValidationSet: exactly " + std::to_string(kPairCount) +
                          " pairs required, got " + std::to_string(pairs_.size()));
}

json ZkValidationReport::to_json() const {
    return {{"mean_cosine", mean_cosine},
            {"floor", floor},
            {"go", go},
            {"provenance", provenance},
            {"usage", "go/no-go gate only; never used for training"}};
}

ZkValidationReport zk_validate(const embed::EmbedderModel& proxy, const ZkValidationSet& set,
                               const embed::EmbedderModel& teacher,
                               const protect::ProtectorConfig& tpl_config,
                               const ZkPreprocessConfig& pre, double floor) {
    double acc = 0.0;
    for (const auto& [image, tpl] : set.pairs()) {
        protect::ProtectedTemplate fed;
        fed.method = protect::Method::HIGHPASS;
        fed.tensor = zk_preprocess(tpl, tpl_config, pre);
        const embed::Embedding pe = embed_student(proxy, fed);
        const embed::Embedding te = embed_teacher(teacher, image);
        acc += cosine(pe, te);
    }
    ZkValidationReport rep;
    rep.mean_cosine = acc / static_cast<double>(set.pairs().size());
    rep.floor = floor;
    rep.go = rep.mean_cosine >= floor;
    rep.provenance = set.provenance();
    return rep;
}

json ZkAttackReport::to_json() const {
    json per;
    for (const auto& r : per_protector)
        per[r.method] = {{"top1_recall", r.top1.recall},
                         {"ties", r.top1.ties},
                         {"verification", r.verification.to_json()},
                         {"regen", r.regen_report.to_json()}};
    return {{"proxy_params_hash", proxy_params_hash},
            {"preprocess_mapping", preprocess_mapping},
            {"per_protector", per},
            {"note", "one proxy model attacks all protectors"}};
}

ZkAttackReport zk_attack_eval(const embed::EmbedderModel& proxy,
                              const std::vector<std::pair<protect::ProtectorConfig,
                                                          std::vector<protect::ProtectedTemplate>>>& sets,
                              const embed::EmbedderModel& teacher, const corpus::Dataset& ds,
                              const regen::DecoderModel& decoder,
                              const regen::CalibratedThresholds& thresholds,
                              const ZkPreprocessConfig& pre, int attempts, std::uint64_t seed) {
    if (sets.empty()) throw ConfigError("zk_attack_eval: no template sets");

    std::unordered_map<std::string, std::size_t> item_of;
    for (std::size_t i = 0; i < ds.items.size(); ++i) item_of[ds.items[i].sample_id] = i;

    const auto val_idx = ds.val_indices();
    const auto key_set = embed_images(teacher, ds, val_idx, "teacher-original");

    ZkAttackReport report;
    report.proxy_params_hash = nn::params_hash(proxy.net);

    for (const auto& [cfg, tpls] : sets) {
        const std::string method = protect::method_name(cfg.method);
        report.preprocess_mapping[method] = zk_preprocess_mapping(cfg.method);

        // Proxy embeddings of preprocessed templates.
        embed::EmbeddingSet queries;
        queries.source = embed::Source::PROXY_STUDENT;
        queries.domain = "proxy-" + method;
        queries.vecs.resize(static_cast<Eigen::Index>(tpls.size()), proxy.embed_dim);
        for (std::size_t i = 0; i < tpls.size(); ++i) {
            if (!tpls[i].source_id || !item_of.count(*tpls[i].source_id))
                throw Error("zk_attack_eval: template without resolvable source_id");
            const auto idx = item_of.at(*tpls[i].source_id);
            protect::ProtectedTemplate fed;
            fed.method = protect::Method::HIGHPASS;
            fed.tensor = zk_preprocess(tpls[i], cfg, pre);
            queries.vecs.row(static_cast<Eigen::Index>(i)) = embed_student(proxy, fed).vec.transpose();
            queries.sample_ids.push_back(*tpls[i].source_id);
            queries.identities.push_back(ds.items[idx].identity);
        }

        ZkProtectorResult res;
        res.method = method;
        res.top1 = linkage::top1_recall(linkage::score_matrix(queries, key_set));

        // 1:1 verification: template-to-face pairs across distinct samples.
        std::vector<double> genuine, impostor;
        for (Eigen::Index i = 0; i < queries.vecs.rows(); ++i)
            for (Eigen::Index j = 0; j < key_set.vecs.rows(); ++j) {
                if (queries.sample_ids[static_cast<std::size_t>(i)] ==
                    key_set.sample_ids[static_cast<std::size_t>(j)])
                    continue;
                const double s = std::clamp(queries.vecs.row(i).dot(key_set.vecs.row(j)), -1.0, 1.0);
                (queries.identities[static_cast<std::size_t>(i)] ==
                         key_set.identities[static_cast<std::size_t>(j)]
                     ? genuine
                     : impostor)
                    .push_back(s);
            }
        res.verification = linkage::verification_eval(genuine, impostor);

        // Regeneration with the local verifier: one designated template per
        // identity (the first encountered in template order).
        std::map<std::string, std::vector<double>> per_identity;
        std::set<int> seen;
        for (std::size_t i = 0; i < tpls.size(); ++i) {
            const auto idx = item_of.at(*tpls[i].source_id);
            const int ident = ds.items[idx].identity;
            if (seen.count(ident)) continue;
            seen.insert(ident);
            protect::ProtectedTemplate fed;
            fed.method = protect::Method::HIGHPASS;
            fed.tensor = zk_preprocess(tpls[i], cfg, pre);
            const embed::Embedding pe = embed_student(proxy, fed);
            const auto images = regen::regenerate(decoder, pe.vec, attempts,
                                                  rng::derive(seed, "zk-regen", static_cast<std::uint64_t>(idx)));
            std::vector<double> levels;
            for (const auto& img : images)
                levels.push_back(regen::verify_local(teacher, ds.items[idx].pixels, img, thresholds)
                                     .strictest_far);
            per_identity["id" + std::to_string(ident)] = levels;
        }
        res.regen_report = regen::success_metrics(per_identity, thresholds);
        report.per_protector.push_back(std::move(res));
    }
    return report;
}

}  // namespace idleak::zk
