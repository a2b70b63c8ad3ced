#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "idleak/corpus.hpp"
#include "idleak/hashing.hpp"
#include "idleak/image.hpp"
#include "idleak/tensor.hpp"

using namespace idleak;
using namespace idleak::corpus;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("idleak_corpus_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string dir_digest(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string concat;
    for (const auto& f : files) concat += f.filename().string() + ":" + sha256_file(f) + "\n";
    return sha256_hex(concat);
}

double pixel_mse(const Image& a, const Image& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        const double d = a.px[i] - b.px[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.px.size());
}

}  // namespace

TEST_CASE("sample_identity is deterministic and distinct per id") {
    const auto a1 = sample_identity(7, 0);
    const auto a2 = sample_identity(7, 0);
    CHECK(a1.vec == a2.vec);  // bitwise
    const auto b = sample_identity(7, 1);
    CHECK(a1.vec != b.vec);
}

TEST_CASE("1000 identity latents have positive pairwise distance (brute force)") {
    std::vector<IdentityLatent> lats;
    for (int id = 0; id < 1000; ++id) lats.push_back(sample_identity(7, id));
    double min_d2 = 1e300;
    for (std::size_t i = 0; i < lats.size(); ++i)
        for (std::size_t j = i + 1; j < lats.size(); ++j) {
            double d2 = 0.0;
            for (int t = 0; t < kLatentDim; ++t) {
                const double d = lats[i].vec[t] - lats[j].vec[t];
                d2 += d * d;
            }
            min_d2 = std::min(min_d2, d2);
        }
    CHECK(min_d2 > 0.0);
}

TEST_CASE("render_face is pure and nuisance changes pixels but not identity params") {
    const auto lat = sample_identity(3, 5);
    const auto at = sample_attributes(3, 5);
    const auto nu1 = sample_nuisance(3, 5, 0);
    const auto nu2 = sample_nuisance(3, 5, 1);

    const auto s1 = render_face(lat, nu1, at);
    const auto s1b = render_face(lat, nu1, at);
    CHECK(s1.pixels.px == s1b.pixels.px);  // purity, bitwise

    const auto s2 = render_face(lat, nu2, at);
    CHECK(s1.pixels.px != s2.pixels.px);
    // The generation log carries identical identity parameters.
    CHECK(s1.identity.vec == s2.identity.vec);
    CHECK(s1.attributes.group == s2.attributes.group);
}

TEST_CASE("lighting gain scales unclamped pixels linearly") {
    const auto lat = sample_identity(11, 2);
    const auto at = sample_attributes(11, 2);
    RenderOptions no_noise;
    no_noise.noise_amplitude = 0.0;
    NuisanceLatent base{0.0, 0.0, 0.0, 1.0, 0};
    NuisanceLatent lit{0.0, 0.0, 0.0, 1.2, 0};
    const auto s1 = render_face(lat, base, at, no_noise);
    const auto s2 = render_face(lat, lit, at, no_noise);
    double max_ratio_err = 0.0;
    long checked = 0;
    for (std::size_t i = 0; i < s1.pixels.px.size(); ++i) {
        const double v1 = s1.pixels.px[i];
        if (v1 > 0.05 && v1 * 1.2 < 0.98) {  // unclamped on both sides
            max_ratio_err = std::max(max_ratio_err, std::abs(s2.pixels.px[i] / v1 - 1.2));
            checked++;
        }
    }
    CHECK(checked > 1000);
    CHECK(max_ratio_err < 1e-3);
}

TEST_CASE("render_face rejects out-of-range latents") {
    auto lat = sample_identity(1, 0);
    const auto at = sample_attributes(1, 0);
    NuisanceLatent nu{0.0, 0.0, 0.0, 1.0, 0};
    lat.vec[0] = 1.5;
    CHECK_THROWS_AS(render_face(lat, nu, at), ConfigError);
    lat.vec[0] = 0.0;
    nu.pose_deg = 45.0;
    CHECK_THROWS_AS(render_face(lat, nu, at), ConfigError);
    nu.pose_deg = 0.0;
    SoftAttributes bad = at;
    bad.group = 9;
    CHECK_THROWS_AS(render_face(lat, nu, bad), ConfigError);
}

TEST_CASE("generate_corpus splits 80/20 and writes deterministically") {
    CorpusManifest m;
    m.seed = 1;
    m.n_identities = 10;
    m.images_per_identity = 4;

    const auto dir = temp_dir("gen");
    const auto ds = generate_corpus_to(m, dir, false);
    CHECK(ds.items.size() == 40);
    CHECK(ds.manifest.train_ids.size() == 8);
    CHECK(ds.manifest.val_ids.size() == 2);

    // Refusal without the overwrite flag.
    CHECK_THROWS_AS(generate_corpus_to(m, dir, false), IoError);

    const auto digest1 = dir_digest(dir);
    generate_corpus_to(m, dir, true);
    CHECK(dir_digest(dir) == digest1);  // byte-identical regeneration

    // Loading reconstructs the same pixels and latents.
    const auto loaded = load_corpus(dir);
    CHECK(loaded.items.size() == 40);
    CHECK(loaded.synthetic);
    const auto& item = loaded.items.front();
    REQUIRE(item.identity_latent.has_value());
    const auto re = render_face(*item.identity_latent, *item.nuisance, *item.attributes);
    CHECK(re.pixels.px == item.pixels.px);
}

TEST_CASE("train/validation identity sets are disjoint (set-intersection oracle)") {
    CorpusManifest m;
    m.seed = 1;
    m.n_identities = 200;
    m.images_per_identity = 10;
    const auto ds = generate_corpus(m);
    CHECK(ds.items.size() == 2000);
    std::set<int> train(ds.manifest.train_ids.begin(), ds.manifest.train_ids.end());
    std::set<int> val(ds.manifest.val_ids.begin(), ds.manifest.val_ids.end());
    std::vector<int> inter;
    std::set_intersection(train.begin(), train.end(), val.begin(), val.end(),
                          std::back_inserter(inter));
    CHECK(inter.empty());
    CHECK(train.size() + val.size() == 200);
}

TEST_CASE("identity signal: within-identity MSE below between-identity MSE") {
    CorpusManifest m;
    m.seed = 4;
    m.n_identities = 50;
    m.images_per_identity = 2;
    const auto ds = generate_corpus(m);

    double within = 0.0, between = 0.0;
    long nw = 0, nb = 0;
    for (std::size_t i = 0; i < ds.items.size(); ++i)
        for (std::size_t j = i + 1; j < ds.items.size(); ++j) {
            const double mse = pixel_mse(ds.items[i].pixels, ds.items[j].pixels);
            if (ds.items[i].identity == ds.items[j].identity) {
                within += mse;
                nw++;
            } else {
                between += mse;
                nb++;
            }
        }
    CHECK(nw == 50);
    CHECK(within / nw < between / nb);
}

TEST_CASE("attributes are range-valid and identity-stable") {
    for (int id = 0; id < 200; ++id) {
        const auto at = sample_attributes(1, id);
        CHECK(at.group >= 0);
        CHECK(at.group <= 6);
        CHECK((at.binary_attr == 0 || at.binary_attr == 1));
        CHECK(at.scalar_attr >= 0.0);
        CHECK(at.scalar_attr <= 100.0);
        const auto again = sample_attributes(1, id);
        CHECK(at.group == again.group);
        CHECK(at.scalar_attr == again.scalar_attr);
    }
}

TEST_CASE("ingest_external reads folder-per-identity, warns on corrupt files") {
    const auto dir = temp_dir("ingest");
    fs::create_directories(dir / "alice");
    fs::create_directories(dir / "bob");

    CorpusManifest m;
    m.seed = 2;
    m.n_identities = 2;
    m.images_per_identity = 2;
    const auto ds = generate_corpus(m);
    write_png(dir / "alice" / "a.png", ds.items[0].pixels);
    write_png(dir / "bob" / "b.png", ds.items[2].pixels);

    const auto handle = ingest_external(dir);
    CHECK(handle.items.size() == 2);
    CHECK(handle.manifest.n_identities == 2);
    CHECK(handle.warnings.empty());

    // One corrupt file among the good ones -> per-file warning, not failure.
    {
        std::ofstream f(dir / "alice" / "corrupt.png", std::ios::binary);
        f << "not a png";
    }
    const auto handle2 = ingest_external(dir);
    CHECK(handle2.items.size() == 2);
    CHECK(handle2.warnings.size() == 1);

    // Ingest -> re-export preserves pixels within 8-bit quantization.
    const auto out = temp_dir("ingest_out");
    write_corpus(handle, out, true);
    const auto reloaded = load_corpus(out);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < reloaded.items[0].pixels.px.size(); ++i)
        max_diff = std::max(max_diff, std::abs(static_cast<double>(reloaded.items[0].pixels.px[i]) -
                                               ds.items[0].pixels.px[i]));
    CHECK(max_diff <= 1.0 / 255.0);

    // Empty directory fails.
    const auto empty = temp_dir("ingest_empty");
    fs::create_directories(empty);
    CHECK_THROWS_AS(ingest_external(empty), IoError);
}
