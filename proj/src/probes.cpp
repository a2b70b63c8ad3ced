#include "idleak/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace idleak::probes {

using nlohmann::json;

namespace {

// Softmax cross-entropy on raw logits; returns loss, writes dlogits.
double ce_loss(const double* logits, int n, int label, double* dlogits) {
    double mx = logits[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(logits[i] - mx);
    const double logz = std::log(z) + mx;
    for (int i = 0; i < n; ++i) dlogits[i] = std::exp(logits[i] - logz) - (i == label ? 1.0 : 0.0);
    return logz - logits[label];
}

int argmax(const double* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

}  // namespace

ProbeModel train_probe(const ProbeData& train, const ProbeConfig& cfg) {
    const auto n = train.embeddings.rows();
    if (n == 0) throw ConfigError("train_probe: empty training set");
    if (train.attributes.size() != static_cast<std::size_t>(n) ||
        train.identities.size() != static_cast<std::size_t>(n))
        throw DimensionError("train_probe: attribute/identity list length mismatch");
    const int d = static_cast<int>(train.embeddings.cols());

    ProbeModel model;
    model.embed_dim = d;
    model.hidden = cfg.hidden;
    model.train_identities.assign(train.identities.begin(), train.identities.end());

    // Class visibility; single-class heads are skipped with a warning.
    std::set<int> groups, binaries;
    std::vector<double> scalars;
    std::vector<long> group_count(7, 0);
    long binary_count[2] = {0, 0};
    for (const auto& at : train.attributes) {
        groups.insert(at.group);
        binaries.insert(at.binary_attr);
        scalars.push_back(at.scalar_attr);
        group_count[static_cast<std::size_t>(at.group)]++;
        binary_count[at.binary_attr]++;
    }
    std::vector<std::string> warnings;
    if (groups.size() < 2) {
        model.group_enabled = false;
        warnings.push_back("group head skipped: single class in training data");
    }
    if (binaries.size() < 2) {
        model.binary_enabled = false;
        warnings.push_back("binary head skipped: single class in training data");
    }
    model.train_majority_group = static_cast<int>(
        std::max_element(group_count.begin(), group_count.end()) - group_count.begin());
    model.train_majority_binary = binary_count[1] > binary_count[0] ? 1 : 0;
    {
        std::vector<double> sorted(scalars);
        std::sort(sorted.begin(), sorted.end());
        const std::size_t m = sorted.size();
        model.train_scalar_median =
            m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    }

    auto eng = rng::engine(rng::derive(cfg.seed, "probe-init"));
    model.trunk.add_dense(d, cfg.hidden, &eng);
    model.trunk.add_relu();
    model.trunk.add_dense(cfg.hidden, cfg.hidden, &eng);
    model.trunk.add_relu();
    model.group_head.add_dense(cfg.hidden, 7, &eng);
    model.binary_head.add_dense(cfg.hidden, 2, &eng);
    model.scalar_head.add_dense(cfg.hidden, 1, &eng);

    nn::Adam opt_trunk(model.trunk.params.size(), cfg.lr);
    nn::Adam opt_g(model.group_head.params.size(), cfg.lr);
    nn::Adam opt_b(model.binary_head.params.size(), cfg.lr);
    nn::Adam opt_s(model.scalar_head.params.size(), cfg.lr);

    std::vector<double> g_trunk(model.trunk.params.size());
    std::vector<double> g_g(model.group_head.params.size());
    std::vector<double> g_b(model.binary_head.params.size());
    std::vector<double> g_s(model.scalar_head.params.size());
    nn::Sequential::Tape trunk_tape, g_tape, b_tape, s_tape;
    std::vector<double> dh(static_cast<std::size_t>(cfg.hidden));
    std::vector<double> dh_head(static_cast<std::size_t>(cfg.hidden));
    double dlog7[7], dlog2[2], dlog1[1];

    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t pos = 0;
    long epoch = 0;
    auto reshuffle = [&]() {
        auto oeng = rng::engine(rng::derive(cfg.seed, "probe-order", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng::below(oeng, i))]);
    };
    reshuffle();

    std::vector<double> loss_curve;
    for (long step = 0; step < cfg.steps; ++step) {
        std::fill(g_trunk.begin(), g_trunk.end(), 0.0);
        std::fill(g_g.begin(), g_g.end(), 0.0);
        std::fill(g_b.begin(), g_b.end(), 0.0);
        std::fill(g_s.begin(), g_s.end(), 0.0);
        double batch_loss = 0.0;
        for (int bi = 0; bi < cfg.batch_size; ++bi) {
            if (pos == order.size()) {
                pos = 0;
                ++epoch;
                reshuffle();
            }
            const std::size_t idx = order[pos++];
            const double* x = train.embeddings.data() + static_cast<std::size_t>(idx) * d;
            const double* h = model.trunk.forward(x, trunk_tape);
            std::fill(dh.begin(), dh.end(), 0.0);
            double loss = 0.0;
            const auto& at = train.attributes[idx];
            if (model.group_enabled) {
                const double* logits = model.group_head.forward(h, g_tape);
                loss += ce_loss(logits, 7, at.group, dlog7);
                model.group_head.backward(h, dlog7, g_tape, dh_head.data(), g_g.data());
                for (int i = 0; i < cfg.hidden; ++i) dh[static_cast<std::size_t>(i)] += dh_head[static_cast<std::size_t>(i)];
            }
            if (model.binary_enabled) {
                const double* logits = model.binary_head.forward(h, b_tape);
                loss += ce_loss(logits, 2, at.binary_attr, dlog2);
                model.binary_head.backward(h, dlog2, b_tape, dh_head.data(), g_b.data());
                for (int i = 0; i < cfg.hidden; ++i) dh[static_cast<std::size_t>(i)] += dh_head[static_cast<std::size_t>(i)];
            }
            {
                const double* pred = model.scalar_head.forward(h, s_tape);
                const double diff = pred[0] - at.scalar_attr;
                loss += std::abs(diff);
                dlog1[0] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                model.scalar_head.backward(h, dlog1, s_tape, dh_head.data(), g_s.data());
                for (int i = 0; i < cfg.hidden; ++i) dh[static_cast<std::size_t>(i)] += dh_head[static_cast<std::size_t>(i)];
            }
            model.trunk.backward(x, dh.data(), trunk_tape, nullptr, g_trunk.data());
            batch_loss += loss;
        }
        const double inv = 1.0 / cfg.batch_size;
        for (auto& g : g_trunk) g *= inv;
        for (auto& g : g_g) g *= inv;
        for (auto& g : g_b) g *= inv;
        for (auto& g : g_s) g *= inv;
        batch_loss *= inv;
        if (!std::isfinite(batch_loss))
            throw Error("train_probe: non-finite loss at step " + std::to_string(step));
        const double lrs = cfg.cosine_lr ? nn::cosine_decay(step, cfg.steps) : 1.0;
        opt_trunk.step(model.trunk.params.data(), g_trunk.data(), g_trunk.size(), lrs);
        if (model.group_enabled) opt_g.step(model.group_head.params.data(), g_g.data(), g_g.size(), lrs);
        if (model.binary_enabled) opt_b.step(model.binary_head.params.data(), g_b.data(), g_b.size(), lrs);
        opt_s.step(model.scalar_head.params.data(), g_s.data(), g_s.size(), lrs);
        loss_curve.push_back(batch_loss);
    }

    model.manifest = {{"kind", "probe"},
                      {"seed", cfg.seed},
                      {"steps", cfg.steps},
                      {"hidden", cfg.hidden},
                      {"warnings", warnings},
                      {"loss_curve", loss_curve}};
    return model;
}

json ProbeReport::to_json() const {
    return {{"group_accuracy", group_accuracy},
            {"binary_accuracy", binary_accuracy},
            {"scalar_mae", scalar_mae},
            {"chance_group", chance_group},
            {"chance_binary", chance_binary},
            {"baseline_mae", baseline_mae},
            {"n_test", n_test},
            {"group_enabled", group_enabled},
            {"binary_enabled", binary_enabled}};
}

ProbeReport probe_eval(const ProbeModel& model, const ProbeData& test) {
    const auto n = test.embeddings.rows();
    if (n == 0) throw ConfigError("probe_eval: empty test set");
    const std::set<int> train_ids(model.train_identities.begin(), model.train_identities.end());
    for (int ident : test.identities)
        if (train_ids.count(ident))
            throw ConfigError("probe_eval: identity " + std::to_string(ident) +
                              " appears in probe training data (identity-disjoint protocol)");

    nn::Sequential::Tape trunk_tape, head_tape;
    long group_hits = 0, binary_hits = 0;
    double mae = 0.0, baseline_mae = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double* x = test.embeddings.data() + static_cast<std::size_t>(i) * model.embed_dim;
        const double* h = model.trunk.forward(x, trunk_tape);
        const auto& at = test.attributes[static_cast<std::size_t>(i)];
        if (model.group_enabled) {
            const double* logits = model.group_head.forward(h, head_tape);
            if (argmax(logits, 7) == at.group) group_hits++;
        }
        if (model.binary_enabled) {
            const double* logits = model.binary_head.forward(h, head_tape);
            if (argmax(logits, 2) == at.binary_attr) binary_hits++;
        }
        const double* pred = model.scalar_head.forward(h, head_tape);
        mae += std::abs(std::clamp(pred[0], 0.0, 100.0) - at.scalar_attr);
        baseline_mae += std::abs(model.train_scalar_median - at.scalar_attr);
    }

    ProbeReport rep;
    rep.n_test = static_cast<long>(n);
    rep.group_enabled = model.group_enabled;
    rep.binary_enabled = model.binary_enabled;
    rep.group_accuracy = model.group_enabled ? static_cast<double>(group_hits) / n : 0.0;
    rep.binary_accuracy = model.binary_enabled ? static_cast<double>(binary_hits) / n : 0.0;
    rep.scalar_mae = mae / n;
    rep.baseline_mae = baseline_mae / n;

    // Chance baselines: rate of the training-majority class on the test set.
    long g_major = 0, b_major = 0;
    for (const auto& at : test.attributes) {
        if (at.group == model.train_majority_group) g_major++;
        if (at.binary_attr == model.train_majority_binary) b_major++;
    }
    rep.chance_group = static_cast<double>(g_major) / n;
    rep.chance_binary = static_cast<double>(b_major) / n;
    return rep;
}

PixelMetrics pixel_metrics(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w || a.c != b.c)
        throw DimensionError("pixel_metrics: image dimensions differ");

    PixelMetrics m;
    double mse = 0.0;
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        const double diff = (a.px[i] - b.px[i]) * 255.0;
        mse += diff * diff;
    }
    mse /= static_cast<double>(a.px.size());
    m.mse = mse;
    m.psnr = mse < 1e-10 ? 99.0 : 10.0 * std::log10(255.0 * 255.0 / mse);

    // SSIM, 8x8 uniform window, per channel, averaged over valid positions.
    constexpr int win = 8;
    constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    double ssim_sum = 0.0;
    long windows = 0;
    for (int ch = 0; ch < a.c; ++ch)
        for (int y = 0; y + win <= a.h; ++y)
            for (int x = 0; x + win <= a.w; ++x) {
                double ma = 0.0, mb = 0.0;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx) {
                        ma += a.at(y + dy, x + dx, ch) * 255.0;
                        mb += b.at(y + dy, x + dx, ch) * 255.0;
                    }
                ma /= win * win;
                mb /= win * win;
                double va = 0.0, vb = 0.0, cov = 0.0;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx) {
                        const double da = a.at(y + dy, x + dx, ch) * 255.0 - ma;
                        const double db = b.at(y + dy, x + dx, ch) * 255.0 - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                va /= win * win - 1;
                vb /= win * win - 1;
                cov /= win * win - 1;
                ssim_sum += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                            ((ma * ma + mb * mb + c1) * (va + vb + c2));
                windows++;
            }
    m.ssim = windows ? ssim_sum / windows : 1.0;
    return m;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman: need paired lists, n >= 2");
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j < n && v[idx[j]] == v[idx[i]]) ++j;
            const double midrank = 0.5 * (static_cast<double>(i) + static_cast<double>(j - 1)) + 1.0;
            for (std::size_t k = i; k < j; ++k) r[idx[k]] = midrank;
            i = j;
        }
        return r;
    };
    const auto rx = ranks(x);
    const auto ry = ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

json MetricDisconnectReport::to_json() const {
    auto pairs_json = [](const std::vector<PairRecord>& v) {
        json arr = json::array();
        for (const auto& p : v)
            arr.push_back({{"psnr", p.psnr}, {"ssim", p.ssim}, {"mse", p.mse}, {"identity_similarity", p.identity_similarity}});
        return arr;
    };
    return {{"same_identity_pairs", pairs_json(same_identity_pairs)},
            {"cross_identity_pairs", pairs_json(cross_identity_pairs)},
            {"mean_psnr_same", mean_psnr_same},
            {"mean_psnr_cross", mean_psnr_cross},
            {"mean_idsim_same", mean_idsim_same},
            {"mean_idsim_cross", mean_idsim_cross},
            {"spearman_psnr_idsim", spearman_psnr_idsim},
            {"pattern_holds", pattern_holds}};
}

MetricDisconnectReport metric_disconnect(const embed::EmbedderModel& teacher,
                                         const std::vector<std::pair<Image, Image>>& same_identity,
                                         const std::vector<std::pair<Image, Image>>& cross_identity) {
    if (same_identity.size() < 20 || cross_identity.size() < 20)
        throw ConfigError("metric_disconnect: need >= 20 pairs per set (got " +
                          std::to_string(same_identity.size()) + " and " +
                          std::to_string(cross_identity.size()) + ")");

    MetricDisconnectReport rep;
    auto eval_set = [&](const std::vector<std::pair<Image, Image>>& pairs,
                        std::vector<PairRecord>& out) {
        for (const auto& [a, b] : pairs) {
            const PixelMetrics m = pixel_metrics(a, b);
            const double idsim = cosine(embed_teacher(teacher, a), embed_teacher(teacher, b));
            out.push_back({m.psnr, m.ssim, m.mse, idsim});
        }
    };
    eval_set(same_identity, rep.same_identity_pairs);
    eval_set(cross_identity, rep.cross_identity_pairs);

    auto mean_of = [](const std::vector<PairRecord>& v, auto field) {
        double acc = 0.0;
        for (const auto& p : v) acc += field(p);
        return acc / static_cast<double>(v.size());
    };
    rep.mean_psnr_same = mean_of(rep.same_identity_pairs, [](const PairRecord& p) { return p.psnr; });
    rep.mean_psnr_cross = mean_of(rep.cross_identity_pairs, [](const PairRecord& p) { return p.psnr; });
    rep.mean_idsim_same =
        mean_of(rep.same_identity_pairs, [](const PairRecord& p) { return p.identity_similarity; });
    rep.mean_idsim_cross =
        mean_of(rep.cross_identity_pairs, [](const PairRecord& p) { return p.identity_similarity; });

    std::vector<double> psnr_all, idsim_all;
    for (const auto& p : rep.same_identity_pairs) {
        psnr_all.push_back(p.psnr);
        idsim_all.push_back(p.identity_similarity);
    }
    for (const auto& p : rep.cross_identity_pairs) {
        psnr_all.push_back(p.psnr);
        idsim_all.push_back(p.identity_similarity);
    }
    rep.spearman_psnr_idsim = spearman(psnr_all, idsim_all);
    rep.pattern_holds =
        rep.mean_psnr_cross > rep.mean_psnr_same && rep.mean_idsim_cross < rep.mean_idsim_same;
    return rep;
}

DisconnectPairs build_disconnect_pairs(std::uint64_t seed, int n_pairs, int candidate_pool) {
    if (n_pairs < 20) throw ConfigError("build_disconnect_pairs: n_pairs must be >= 20");
    DisconnectPairs out;

    // Set (i): same identity, opposite nuisance extremes -> low pixel overlap.
    for (int i = 0; i < n_pairs; ++i) {
        const auto lat = corpus::sample_identity(seed, 20000 + i);
        const auto at = corpus::sample_attributes(seed, 20000 + i);
        corpus::NuisanceLatent na{-18.0, -2.5, -2.5, 0.75,
                                  rng::derive(seed, "dc-noise-a", static_cast<std::uint64_t>(i))};
        corpus::NuisanceLatent nb{18.0, 2.5, 2.5, 1.3,
                                  rng::derive(seed, "dc-noise-b", static_cast<std::uint64_t>(i))};
        out.same_identity.emplace_back(corpus::render_face(lat, na, at).pixels,
                                       corpus::render_face(lat, nb, at).pixels);
    }

    // Set (ii): nearest-latent identity pairs under one shared neutral
    // nuisance and shared attributes -> high pixel overlap, different identity.
    std::vector<corpus::IdentityLatent> pool;
    for (int i = 0; i < candidate_pool; ++i) pool.push_back(corpus::sample_identity(seed, 30000 + i));
    std::vector<std::pair<double, std::pair<int, int>>> dists;
    for (int i = 0; i < candidate_pool; ++i)
        for (int j = i + 1; j < candidate_pool; ++j) {
            double d2 = 0.0;
            for (int t = 0; t < corpus::kLatentDim; ++t) {
                const double diff = pool[static_cast<std::size_t>(i)].vec[static_cast<std::size_t>(t)] -
                                    pool[static_cast<std::size_t>(j)].vec[static_cast<std::size_t>(t)];
                d2 += diff * diff;
            }
            dists.push_back({d2, {i, j}});
        }
    std::sort(dists.begin(), dists.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    std::vector<bool> used(static_cast<std::size_t>(candidate_pool), false);
    const corpus::NuisanceLatent neutral{0.0, 0.0, 0.0, 1.0, rng::derive(seed, "dc-neutral")};
    int made = 0;
    for (const auto& [d2, ij] : dists) {
        if (made == n_pairs) break;
        const auto [i, j] = ij;
        if (used[static_cast<std::size_t>(i)] || used[static_cast<std::size_t>(j)]) continue;
        used[static_cast<std::size_t>(i)] = used[static_cast<std::size_t>(j)] = true;
        const auto at = corpus::sample_attributes(seed, 30000 + i);
        out.cross_identity.emplace_back(corpus::render_face(pool[static_cast<std::size_t>(i)], neutral, at).pixels,
                                        corpus::render_face(pool[static_cast<std::size_t>(j)], neutral, at).pixels);
        made++;
    }
    if (made < n_pairs)
        throw ConfigError("build_disconnect_pairs: candidate pool too small for requested pairs");
    return out;
}

}  // namespace idleak::probes
