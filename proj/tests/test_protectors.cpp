#include <cmath>
#include <set>

#include "doctest.h"
#include "idleak/corpus.hpp"
#include "idleak/hashing.hpp"
#include "idleak/protectors.hpp"
#include "idleak/tensor.hpp"

using namespace idleak;
using namespace idleak::protect;

namespace {

Image test_face(int id = 0, int k = 0) {
    const auto lat = corpus::sample_identity(9, id);
    const auto at = corpus::sample_attributes(9, id);
    const auto nu = corpus::sample_nuisance(9, id, k);
    return corpus::render_face(lat, nu, at).pixels;
}

Image constant_image(float v) {
    Image img(64, 64, 3);
    std::fill(img.px.begin(), img.px.end(), v);
    return img;
}

ProtectorConfig partial_cfg(std::uint64_t seed = 0, int n_selected = 24, int dropped = 8) {
    ProtectorConfig cfg;
    cfg.method = Method::PARTIAL;
    cfg.seed = seed;
    cfg.n_selected = n_selected;
    cfg.n_lowest_dropped = dropped;
    return cfg;
}

}  // namespace

TEST_CASE("zigzag order matches the JPEG reference for 8x8") {
    // Reference: linear block index (row*8+col) in zigzag scan order.
    const int expected[64] = {0,  1,  8,  16, 9,  2,  3,  10, 17, 24, 32, 25, 18, 11, 4,  5,
                              12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6,  7,  14, 21, 28,
                              35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
                              58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63};
    const auto zz = zigzag_order(8);
    REQUIRE(zz.size() == 64);
    for (int i = 0; i < 64; ++i) CHECK(zz[i].first * 8 + zz[i].second == expected[i]);
}

TEST_CASE("full-band PARTIAL round trip reconstructs the image") {
    const Image img = test_face();
    const auto cfg = partial_cfg(0, 64, 0);
    const auto tpl = protect_partial(img, cfg);
    CHECK(tpl.tensor.c == 192);  // all 64 sub-bands x 3 color planes
    const Image back = partial_to_image(tpl, cfg);
    double max_err = 0.0;
    for (std::size_t i = 0; i < img.px.size(); ++i)
        max_err = std::max(max_err, std::abs(static_cast<double>(img.px[i]) - back.px[i]));
    CHECK(max_err <= 1e-4);
}

TEST_CASE("PARTIAL drops the lowest sub-bands and is bitwise deterministic") {
    const auto cfg = partial_cfg(0, 24, 8);
    const auto sel = selected_subbands(cfg);
    CHECK(sel.size() == 24);
    for (int z : sel) CHECK(z >= 8);  // DC (zigzag 0) and the 7 next never present

    const Image img = test_face();
    const auto t1 = protect_partial(img, cfg);
    const auto t2 = protect_partial(img, cfg);
    CHECK(t1.tensor.v == t2.tensor.v);
    CHECK(t1.tensor.c == cfg.channels());
    CHECK(t1.config_hash == t2.config_hash);
}

TEST_CASE("different seeds give different sub-band selections (100-seed scan)") {
    std::set<std::vector<int>> distinct;
    for (std::uint64_t seed = 0; seed < 100; ++seed)
        distinct.insert(selected_subbands(partial_cfg(seed)));
    const long collisions = 100 - static_cast<long>(distinct.size());
    INFO("collisions over 100 seeds: ", collisions);
    CHECK(distinct.size() >= 99);
}

TEST_CASE("retained high bands carry less energy than dropped low bands") {
    const auto cfg = partial_cfg(3, 24, 8);
    const auto all_cfg = partial_cfg(3, 64, 0);
    const auto zz = zigzag_order(8);
    double low_sum = 0.0, high_sum = 0.0;
    long low_n = 0, high_n = 0;
    for (int i = 0; i < 100; ++i) {
        const Image img = test_face(i, 0);
        const auto full = protect_partial(img, all_cfg);
        // Channels are laid out sub-band major (ascending zigzag), 3 colors each.
        for (int z = 0; z < 64; ++z)
            for (int c = 0; c < 3; ++c)
                for (int by = 0; by < full.tensor.h; ++by)
                    for (int bx = 0; bx < full.tensor.w; ++bx) {
                        const double v = std::abs(full.tensor.at(z * 3 + c, by, bx));
                        if (z < cfg.n_lowest_dropped) {
                            low_sum += v;
                            low_n++;
                        } else {
                            high_sum += v;
                            high_n++;
                        }
                    }
    }
    CHECK(high_sum / high_n < low_sum / low_n);
}

TEST_CASE("MINUS residual: constants vanish, small sigma vanishes, algebra holds") {
    ProtectorConfig cfg;
    cfg.method = Method::MINUS;
    cfg.sigma = 2.0;

    const auto zero = protect_minus(constant_image(0.47f), cfg);
    double max_abs = 0.0;
    for (float v : zero.tensor.v) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    CHECK(max_abs <= 1e-6);

    ProtectorConfig tiny = cfg;
    tiny.sigma = 0.01;
    const Image img = test_face();
    const auto near_zero = protect_minus(img, tiny);
    max_abs = 0.0;
    for (float v : near_zero.tensor.v) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    CHECK(max_abs <= 1e-3);

    // residue + blur(image) == image
    const auto tpl = protect_minus(img, cfg);
    const Image blurred = gaussian_blur(img, cfg.sigma);
    double max_err = 0.0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                max_err = std::max(max_err, std::abs(static_cast<double>(tpl.tensor.at(c, y, x)) +
                                                     blurred.at(y, x, c) - img.at(y, x, c)));
    CHECK(max_err <= 1e-6);

    cfg.sigma = 0.0;
    CHECK_THROWS_AS(protect_minus(img, cfg), ConfigError);
}

TEST_CASE("HIGHPASS is linear, not idempotent, and kills constants") {
    ProtectorConfig cfg;
    cfg.method = Method::HIGHPASS;
    cfg.sigma = 1.5;

    const auto zero = protect_highpass(constant_image(0.8f), cfg);
    double max_abs = 0.0;
    for (float v : zero.tensor.v) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    CHECK(max_abs <= 1e-6);

    const Image img = test_face(4);
    Image half = img;
    for (auto& v : half.px) v *= 0.5f;
    const auto hp_full = protect_highpass(img, cfg);
    const auto hp_half = protect_highpass(half, cfg);
    double max_lin_err = 0.0;
    for (std::size_t i = 0; i < hp_full.tensor.v.size(); ++i)
        max_lin_err = std::max(max_lin_err, std::abs(0.5 * hp_full.tensor.v[i] - hp_half.tensor.v[i]));
    CHECK(max_lin_err <= 1e-6);

    // Applying the filter to its own output changes it (not idempotent).
    const Chw once = hp_full.tensor;
    const Chw twice = highpass_residual(chw_to_image(once), cfg.sigma);
    double max_change = 0.0;
    for (std::size_t i = 0; i < once.v.size(); ++i)
        max_change = std::max(max_change, std::abs(static_cast<double>(once.v[i]) - twice.v[i]));
    CHECK(max_change > 1e-3);
}

TEST_CASE("protect validates configs and image dimensions") {
    const Image img = test_face();
    CHECK_THROWS_AS(protect_partial(img, partial_cfg(0, 60, 8)), ConfigError);  // 60 > 64-8
    CHECK_THROWS_AS(protect_partial(img, partial_cfg(0, 0, 0)), ConfigError);

    Image small(32, 32, 3);
    ProtectorConfig cfg;
    cfg.method = Method::HIGHPASS;
    CHECK_THROWS_AS(apply(small, cfg), DimensionError);
}

TEST_CASE("dispatch honors the method tag and declared channel counts") {
    const Image img = test_face();
    for (Method m : {Method::PARTIAL, Method::MINUS, Method::HIGHPASS}) {
        ProtectorConfig cfg;
        cfg.method = m;
        const auto tpl = apply(img, cfg);
        CHECK(tpl.method == m);
        CHECK(tpl.tensor.c == cfg.channels());
        CHECK(tpl.tensor.h == cfg.spatial());
    }
}

TEST_CASE("template containers round trip through disk") {
    const auto dir = std::filesystem::temp_directory_path() / "idleak_tpl_io";
    std::filesystem::remove_all(dir);

    const auto cfg = partial_cfg(1);
    std::vector<ProtectedTemplate> tpls;
    for (int i = 0; i < 3; ++i) {
        auto tpl = protect_partial(test_face(i), cfg);
        tpl.source_id = "sample" + std::to_string(i);
        tpls.push_back(std::move(tpl));
    }
    write_templates(dir, cfg, tpls, true);
    const auto set = read_templates(dir);
    CHECK(set.items.size() == 3);
    CHECK(set.config.hash() == cfg.hash());
    CHECK(set.items[1].tensor.v == tpls[1].tensor.v);
}
