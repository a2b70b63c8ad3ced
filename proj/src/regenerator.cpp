#include "idleak/regenerator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "idleak/hashing.hpp"

namespace idleak::regen {

using nlohmann::json;

std::vector<double> nuisance_to_noise(const corpus::NuisanceLatent& nu, int noise_dim) {
    std::vector<double> eps(static_cast<std::size_t>(noise_dim), 0.0);
    if (noise_dim < 4) throw ConfigError("noise_dim must be >= 4");
    eps[0] = 1.5 * nu.pose_deg / 20.0;
    eps[1] = 1.5 * nu.translate_x / 3.0;
    eps[2] = 1.5 * nu.translate_y / 3.0;
    eps[3] = 1.5 * (nu.lighting_gain - 1.0) / 0.4;
    auto eng = rng::engine(rng::derive(nu.noise_seed, "noise-tail"));
    rng::Gaussian gauss;
    for (int i = 4; i < noise_dim; ++i) eps[static_cast<std::size_t>(i)] = gauss(eng);
    return eps;
}

namespace {

// dense -> 4x4 feature root -> 4 rounds of (nearest upsample, 3x3 conv, relu)
// -> sigmoid rgb output.
void build_decoder_net(nn::Sequential& net, rng::Engine& eng, int in_dim, int width) {
    const int root = 4;
    net.add_dense(in_dim, width * root * root, &eng);
    net.add_relu();
    int c = width, hw = root;
    while (hw < corpus::kImageSide / 2) {
        net.add_upsample_nearest(c, hw, hw, hw * 2, hw * 2);
        net.add_conv(c, hw * 2, hw * 2, c / 2, 3, 1, 1, &eng);
        net.add_relu();
        c /= 2;
        hw *= 2;
    }
    net.add_upsample_nearest(c, hw, hw, hw * 2, hw * 2);
    net.add_conv(c, hw * 2, hw * 2, 3, 3, 1, 1, &eng);
    net.add_sigmoid();
}

Image chw_buffer_to_image(const double* y) {
    const int s = corpus::kImageSide;
    Image img(s, s, 3);
    for (int c = 0; c < 3; ++c)
        for (int yy = 0; yy < s; ++yy)
            for (int xx = 0; xx < s; ++xx)
                img.at(yy, xx, c) = static_cast<float>(y[(static_cast<std::size_t>(c) * s + yy) * s + xx]);
    return img;
}

}  // namespace

DecoderModel train_decoder(const embed::EmbedderModel& teacher, const corpus::Dataset& ds,
                           const DecoderConfig& cfg) {
    if (cfg.steps < 1 || cfg.batch_size < 1 || !(cfg.lr > 0))
        throw ConfigError("train_decoder: steps/batch_size/lr out of range");
    const auto train_idx = ds.train_indices();
    if (train_idx.empty()) throw ConfigError("train_decoder: empty training split");

    DecoderModel model;
    model.embed_dim = teacher.embed_dim;
    model.noise_dim = cfg.noise_dim;
    auto eng = rng::engine(rng::derive(cfg.seed, "decoder-init"));
    build_decoder_net(model.net, eng, teacher.embed_dim + cfg.noise_dim, cfg.width);

    // Frozen-teacher embedding cache.
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

    nn::Adam opt(model.net.params.size(), cfg.lr);
    std::vector<double> grads(model.net.params.size());
    nn::Sequential::Tape dec_tape, t_tape;
    const int out_n = model.net.output_size();
    const int d = teacher.embed_dim;
    std::vector<double> dy(static_cast<std::size_t>(out_n));
    std::vector<double> demb(static_cast<std::size_t>(d));
    std::vector<double> dx_teacher(static_cast<std::size_t>(out_n));

    // Deterministic epoch reshuffle (same scheme as the embedder trainers).
    std::vector<std::size_t> order(train_idx);
    std::size_t pos = 0;
    long epoch = 0;
    auto reshuffle = [&]() {
        auto oeng = rng::engine(rng::derive(cfg.seed, "decoder-order", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng::below(oeng, i))]);
    };
    reshuffle();

    std::vector<double> loss_curve, embed_curve, pixel_curve;
    for (long step = 0; step < cfg.steps; ++step) {
        std::fill(grads.begin(), grads.end(), 0.0);
        double batch_loss = 0.0, batch_embed = 0.0, batch_pixel = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (pos == order.size()) {
                pos = 0;
                ++epoch;
                reshuffle();
            }
            const std::size_t idx = order[pos++];
            const auto& item = ds.items[idx];

            const auto& e = teacher_emb(idx);
            std::vector<double> input(e);
            const auto eps = nuisance_to_noise(*item.nuisance, cfg.noise_dim);
            input.insert(input.end(), eps.begin(), eps.end());

            const double* y = model.net.forward(input.data(), dec_tape);

            // Pixel term: mean squared error against the source image.
            const auto target = embed::image_to_input(item.pixels);
            double mse = 0.0;
            for (int i = 0; i < out_n; ++i) {
                const double diff = y[i] - target[static_cast<std::size_t>(i)];
                mse += diff * diff;
                dy[static_cast<std::size_t>(i)] = cfg.pixel_weight * 2.0 * diff / out_n;
            }
            mse /= out_n;

            // Identity term: backpropagate 1 - cos(teacher(y), e) through the
            // frozen teacher into the decoder output.
            double embed_loss = 0.0;
            if (cfg.embed_weight > 0.0) {
                const double* temb = teacher.net.forward(y, t_tape);
                embed_loss = nn::cosine_alignment_loss(temb, e.data(), d, demb.data());
                teacher.net.backward(y, demb.data(), t_tape, dx_teacher.data(), nullptr);
                for (int i = 0; i < out_n; ++i)
                    dy[static_cast<std::size_t>(i)] += cfg.embed_weight * dx_teacher[static_cast<std::size_t>(i)];
            }

            batch_loss += cfg.pixel_weight * mse + cfg.embed_weight * embed_loss;
            batch_pixel += mse;
            batch_embed += embed_loss;
            model.net.backward(input.data(), dy.data(), dec_tape, nullptr, grads.data());
        }
        const double inv = 1.0 / cfg.batch_size;
        for (auto& g : grads) g *= inv;
        batch_loss *= inv;
        if (!std::isfinite(batch_loss))
            throw Error("train_decoder: non-finite loss at step " + std::to_string(step));
        opt.step(model.net.params.data(), grads.data(), grads.size(),
                 cfg.cosine_lr ? nn::cosine_decay(step, cfg.steps) : 1.0);
        loss_curve.push_back(batch_loss);
        embed_curve.push_back(batch_embed * inv);
        pixel_curve.push_back(batch_pixel * inv);
    }

    model.manifest = {{"kind", "decoder"},
                      {"seed", cfg.seed},
                      {"steps", cfg.steps},
                      {"batch_size", cfg.batch_size},
                      {"lr", cfg.lr},
                      {"width", cfg.width},
                      {"noise_dim", cfg.noise_dim},
                      {"embed_weight", cfg.embed_weight},
                      {"pixel_weight", cfg.pixel_weight},
                      {"loss_curve", loss_curve},
                      {"embed_loss_curve", embed_curve},
                      {"pixel_loss_curve", pixel_curve},
                      {"data_hash", embed::dataset_fingerprint(ds)}};
    return model;
}

std::vector<Image> regenerate(const DecoderModel& decoder, const Eigen::VectorXd& embedding, int k,
                              std::uint64_t seed) {
    if (k < 1) throw ConfigError("regenerate: k must be >= 1");
    if (embedding.size() != decoder.embed_dim)
        throw DimensionError("regenerate: embedding dimension " + std::to_string(embedding.size()) +
                             " != decoder's " + std::to_string(decoder.embed_dim));
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(k));
    nn::Sequential::Tape tape;
    for (int j = 0; j < k; ++j) {
        std::vector<double> input(embedding.data(), embedding.data() + embedding.size());
        auto eng = rng::engine(rng::derive(seed, "regen-noise", static_cast<std::uint64_t>(j)));
        rng::Gaussian gauss;
        for (int i = 0; i < decoder.noise_dim; ++i) input.push_back(gauss(eng));
        const double* y = decoder.net.forward(input.data(), tape);
        out.push_back(chw_buffer_to_image(y));
    }
    return out;
}

void save_decoder(const DecoderModel& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nn::save_model(dir / "model.flgm", model.net,
                   {{"embed_dim", model.embed_dim}, {"noise_dim", model.noise_dim}});
    std::ofstream mf(dir / "manifest.json");
    mf << model.manifest.dump(2) << "\n";
}

DecoderModel load_decoder(const std::filesystem::path& dir) {
    auto loaded = nn::load_model(dir / "model.flgm");
    DecoderModel model;
    model.net = std::move(loaded.net);
    model.embed_dim = loaded.extra.at("embed_dim").get<int>();
    model.noise_dim = loaded.extra.at("noise_dim").get<int>();
    if (std::ifstream mf(dir / "manifest.json"); mf) model.manifest = json::parse(mf);
    return model;
}

PixelBaselineModel train_pixel_baseline(const protect::ProtectorConfig& oracle,
                                        const corpus::Dataset& ds, const PixelBaselineConfig& cfg) {
    protect::validate(oracle);
    const auto train_idx = ds.train_indices();
    if (train_idx.empty()) throw ConfigError("train_pixel_baseline: empty training split");

    PixelBaselineModel model;
    model.in_c = oracle.channels();
    model.in_h = model.in_w = oracle.spatial();

    auto eng = rng::engine(rng::derive(cfg.seed, "pixel-baseline-init"));
    // Template adapter as in the student, then a compact encoder/decoder
    // trained with per-pixel squared error only.
    const int s = corpus::kImageSide;
    if (model.in_h != s)
        model.net.add_upsample_nearest(model.in_c, model.in_h, model.in_w, s, s);
    model.net.add_conv(model.in_c, s, s, cfg.width / 2, 3, 2, 1, &eng);  // 32
    model.net.add_relu();
    model.net.add_conv(cfg.width / 2, s / 2, s / 2, cfg.width, 3, 2, 1, &eng);  // 16
    model.net.add_relu();
    model.net.add_upsample_nearest(cfg.width, s / 4, s / 4, s / 2, s / 2);
    model.net.add_conv(cfg.width, s / 2, s / 2, cfg.width / 2, 3, 1, 1, &eng);
    model.net.add_relu();
    model.net.add_upsample_nearest(cfg.width / 2, s / 2, s / 2, s, s);
    model.net.add_conv(cfg.width / 2, s, s, 3, 3, 1, 1, &eng);
    model.net.add_sigmoid();

    nn::Adam opt(model.net.params.size(), cfg.lr);
    std::vector<double> grads(model.net.params.size());
    nn::Sequential::Tape tape;
    const int out_n = model.net.output_size();
    std::vector<double> dy(static_cast<std::size_t>(out_n));

    std::vector<std::size_t> order(train_idx);
    std::size_t pos = 0;
    long epoch = 0;
    auto reshuffle = [&]() {
        auto oeng = rng::engine(rng::derive(cfg.seed, "baseline-order", static_cast<std::uint64_t>(epoch)));
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
            const auto& item = ds.items[idx];
            const auto tpl = protect::apply(item.pixels, oracle);
            const auto x = embed::chw_to_input(tpl.tensor);
            const double* y = model.net.forward(x.data(), tape);
            const auto target = embed::image_to_input(item.pixels);
            double mse = 0.0;
            for (int i = 0; i < out_n; ++i) {
                const double diff = y[i] - target[static_cast<std::size_t>(i)];
                mse += diff * diff;
                dy[static_cast<std::size_t>(i)] = 2.0 * diff / out_n;
            }
            batch_loss += mse / out_n;
            model.net.backward(x.data(), dy.data(), tape, nullptr, grads.data());
        }
        const double inv = 1.0 / cfg.batch_size;
        for (auto& g : grads) g *= inv;
        batch_loss *= inv;
        if (!std::isfinite(batch_loss))
            throw Error("train_pixel_baseline: non-finite loss at step " + std::to_string(step));
        opt.step(model.net.params.data(), grads.data(), grads.size(),
                 cfg.cosine_lr ? nn::cosine_decay(step, cfg.steps) : 1.0);
        loss_curve.push_back(batch_loss);
    }

    model.manifest = {{"kind", "pixel-baseline"},
                      {"seed", cfg.seed},
                      {"steps", cfg.steps},
                      {"oracle", oracle.to_json()},
                      {"loss_curve", loss_curve},
                      {"data_hash", embed::dataset_fingerprint(ds)}};
    return model;
}

Image pixel_baseline_reconstruct(const PixelBaselineModel& model,
                                 const protect::ProtectedTemplate& tpl) {
    if (model.manifest.is_null() || model.net.params.size() == 0)
        throw Error("pixel_baseline_reconstruct: untrained decoder");
    if (tpl.tensor.c != model.in_c || tpl.tensor.h != model.in_h)
        throw DimensionError("pixel_baseline_reconstruct: template shape mismatch");
    nn::Sequential::Tape tape;
    const auto x = embed::chw_to_input(tpl.tensor);
    const double* y = model.net.forward(x.data(), tape);
    return chw_buffer_to_image(y);
}

json CalibratedThresholds::to_json() const {
    json levels = json::array();
    for (const auto& [far, thr] : thresholds) levels.push_back({{"far", far}, {"threshold", thr}});
    return {{"levels", levels}, {"impostor_count", impostor_count}, {"seed", seed}};
}

CalibratedThresholds CalibratedThresholds::from_json(const json& j) {
    CalibratedThresholds th;
    for (const auto& l : j.at("levels"))
        th.thresholds[l.at("far").get<double>()] = l.at("threshold").get<double>();
    th.impostor_count = j.at("impostor_count").get<long>();
    th.seed = j.value("seed", 0ULL);
    return th;
}

CalibratedThresholds thresholds_from_scores(std::vector<double> impostor,
                                            const std::vector<double>& levels, std::uint64_t seed) {
    if (impostor.empty() || levels.empty())
        throw ConfigError("thresholds_from_scores: empty scores or levels");
    const long m = static_cast<long>(impostor.size());
    for (double f : levels) {
        if (!(f > 0.0 && f <= 1.0)) throw ConfigError("FAR level must be in (0, 1]");
        const long required = static_cast<long>(std::ceil(10.0 / f));
        if (m < required)
            throw ConfigError("calibration: " + std::to_string(m) + " impostor scores, but FAR " +
                              std::to_string(f) + " requires at least " + std::to_string(required));
    }
    std::sort(impostor.begin(), impostor.end(), std::greater<double>());
    CalibratedThresholds th;
    th.impostor_count = m;
    th.seed = seed;
    for (double f : levels) {
        const long r = std::max<long>(1, static_cast<long>(std::ceil(f * static_cast<double>(m))));
        th.thresholds[f] = impostor[static_cast<std::size_t>(r - 1)];
    }
    return th;
}

std::vector<double> impostor_scores(const embed::EmbedderModel& teacher,
                                    const corpus::Dataset& corpus_ds, long n_pairs,
                                    std::uint64_t seed) {
    std::vector<std::size_t> all(corpus_ds.items.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto set = embed_images(teacher, corpus_ds, all, "calibration");
    const auto n = set.vecs.rows();
    if (n < 2) throw ConfigError("impostor_scores: need >= 2 images");

    auto eng = rng::engine(rng::derive(seed, "impostor-pairs"));
    std::vector<double> scores;
    scores.reserve(static_cast<std::size_t>(n_pairs));
    while (static_cast<long>(scores.size()) < n_pairs) {
        const auto i = static_cast<Eigen::Index>(rng::below(eng, static_cast<std::uint64_t>(n)));
        const auto j = static_cast<Eigen::Index>(rng::below(eng, static_cast<std::uint64_t>(n)));
        if (set.identities[static_cast<std::size_t>(i)] == set.identities[static_cast<std::size_t>(j)])
            continue;
        scores.push_back(std::clamp(set.vecs.row(i).dot(set.vecs.row(j)), -1.0, 1.0));
    }
    return scores;
}

CalibratedThresholds calibrate_thresholds(const embed::EmbedderModel& teacher,
                                          const corpus::Dataset& calibration,
                                          const std::vector<double>& levels, long n_pairs,
                                          std::uint64_t seed) {
    for (double f : levels) {
        const long required = static_cast<long>(std::ceil(10.0 / f));
        if (n_pairs < required)
            throw ConfigError("calibrate_thresholds: FAR " + std::to_string(f) + " requires M >= " +
                              std::to_string(required) + ", got " + std::to_string(n_pairs));
    }
    return thresholds_from_scores(impostor_scores(teacher, calibration, n_pairs, seed), levels, seed);
}

double strictest_level(double score, const CalibratedThresholds& th) {
    double strictest = 0.0;
    for (const auto& [far, thr] : th.thresholds)
        if (score >= thr) {
            strictest = far;  // map iterates ascending FAR; first hit is strictest
            break;
        }
    return strictest;
}

VerifyOutcome verify_local(const embed::EmbedderModel& teacher, const Image& a, const Image& b,
                           const CalibratedThresholds& th) {
    if (th.thresholds.empty()) throw ConfigError("verify_local: thresholds not calibrated");
    const embed::Embedding ea = embed_teacher(teacher, a);
    const embed::Embedding eb = embed_teacher(teacher, b);
    VerifyOutcome out;
    out.score = cosine(ea, eb);
    out.strictest_far = strictest_level(out.score, th);
    out.reason = "ok";
    return out;
}

MockVerifierClient::MockVerifierClient(const embed::EmbedderModel& teacher,
                                       CalibratedThresholds thresholds, MockVerifierConfig cfg)
    : teacher_(teacher),
      thresholds_(std::move(thresholds)),
      cfg_(cfg),
      eng_(rng::engine(rng::derive(cfg.seed, "mock-verifier"))) {}

VerifyOutcome MockVerifierClient::verify(const Image& a, const Image& b) {
    const double roll = rng::unit(eng_);
    double gate = cfg_.timeout_rate;
    if (roll < gate) throw VerifierTimeout("mock verifier: injected timeout");
    gate += cfg_.quota_rate;
    if (roll < gate) throw VerifierQuotaExceeded("mock verifier: injected quota error");
    gate += cfg_.malformed_rate;
    if (roll < gate) throw VerifierMalformedResponse("mock verifier: injected malformed response");
    gate += cfg_.noface_rate;
    if (roll < gate) {
        VerifyOutcome out;
        out.strictest_far = 0.0;
        out.score = 0.0;
        out.reason = "no_face";
        return out;
    }
    return verify_local(teacher_, a, b, thresholds_);
}

VerifyOutcome remote_verify(VerifierClient& client, const Image& a, const Image& b, int retries) {
    for (int attempt = 0;; ++attempt) {
        try {
            return client.verify(a, b);
        } catch (const VerifierMalformedResponse&) {
            throw;  // not retryable
        } catch (const Error&) {
            if (attempt >= retries) throw;
        }
    }
}

json RegenReport::to_json() const {
    json per_identity;
    for (const auto& [ident, levels] : attempts) per_identity[ident] = levels;
    json pass;
    for (const auto& [far, rate] : pass_at) pass[std::to_string(far)] = rate;
    return {{"header", header},
            {"attempts_per_identity", attempts_per_identity},
            {"baseline_level", baseline_level},
            {"pass_at", pass},
            {"success_at", success_at},
            {"per_identity", per_identity}};
}

RegenReport success_metrics(const std::map<std::string, std::vector<double>>& attempts_per_identity,
                            const CalibratedThresholds& th, double baseline_level) {
    if (attempts_per_identity.empty()) throw ConfigError("success_metrics: no identities");
    const std::size_t k = attempts_per_identity.begin()->second.size();
    if (k == 0) throw ConfigError("success_metrics: zero attempts");
    for (const auto& [ident, levels] : attempts_per_identity)
        if (levels.size() != k)
            throw DimensionError("success_metrics: ragged attempt count for identity " + ident);

    RegenReport rep;
    rep.attempts = attempts_per_identity;
    rep.attempts_per_identity = static_cast<int>(k);
    rep.baseline_level = baseline_level;
    for (const auto& [ident, levels] : attempts_per_identity) rep.identities.push_back(ident);

    const double n = static_cast<double>(attempts_per_identity.size());
    // A nonzero strictest level s passes every level f >= s.
    for (const auto& [far, thr] : th.thresholds) {
        long hits = 0;
        for (const auto& [ident, levels] : attempts_per_identity) {
            const double first = levels.front();
            if (first > 0.0 && first <= far) hits++;
        }
        rep.pass_at[far] = hits / n;
    }
    rep.success_at.resize(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        long hits = 0;
        for (const auto& [ident, levels] : attempts_per_identity) {
            bool ok = false;
            for (std::size_t a = 0; a <= j; ++a)
                if (levels[a] > 0.0 && levels[a] <= baseline_level) ok = true;
            if (ok) hits++;
        }
        rep.success_at[j] = hits / n;
    }
    rep.header = {{"pass_at_semantics", "first attempt, strictest accepted level <= FAR"},
                  {"success_at_semantics", "any of first k attempts at baseline level or stricter"},
                  {"baseline_level", baseline_level},
                  {"calibration", th.to_json()}};
    return rep;
}

}  // namespace idleak::regen
