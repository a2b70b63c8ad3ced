#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "idleak/hashing.hpp"
#include "idleak/image.hpp"
#include "idleak/rng.hpp"
#include "idleak/tensor.hpp"

using namespace idleak;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("idleak_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("flgt round trip is bitwise for every dtype") {
    const auto dir = temp_dir("tensor");

    Tensor a = Tensor::f32({3, 64, 64});
    auto eng = rng::engine(42);
    for (auto& v : a.data<float>()) v = static_cast<float>(rng::uniform(eng, -2.0, 2.0));
    write_tensor(dir / "a.flgt", a);
    CHECK(read_tensor(dir / "a.flgt") == a);

    Tensor b = Tensor::f64({1});
    b.data<double>()[0] = 1.0 / 3.0;
    write_tensor(dir / "b.flgt", b);
    const Tensor b2 = read_tensor(dir / "b.flgt");
    CHECK(b2.data<double>()[0] == 1.0 / 3.0);  // lossless format, no precision loss

    Tensor c = Tensor::u8({5, 7});
    for (std::size_t i = 0; i < c.data<std::uint8_t>().size(); ++i)
        c.data<std::uint8_t>()[i] = static_cast<std::uint8_t>(i * 13);
    write_tensor(dir / "c.flgt", c);
    CHECK(read_tensor(dir / "c.flgt") == c);
}

TEST_CASE("flgt rejects bad magic, truncation and unknown dtypes") {
    const auto dir = temp_dir("tensor_err");

    {
        std::ofstream f(dir / "bad.flgt", std::ios::binary);
        f << "XXXXrest-of-file";
    }
    CHECK_THROWS_AS(read_tensor(dir / "bad.flgt"), BadMagicError);

    Tensor a = Tensor::f32({4, 4});
    const auto bytes = tensor_bytes(a);
    {
        std::ofstream f(dir / "trunc.flgt", std::ios::binary);
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size() - 9));
    }
    CHECK_THROWS_AS(read_tensor(dir / "trunc.flgt"), TruncatedFileError);

    {
        auto bad = bytes;
        bad[6] = 9;  // dtype code byte
        std::ofstream f(dir / "dtype.flgt", std::ios::binary);
        f.write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(read_tensor(dir / "dtype.flgt"), DtypeError);

    {
        auto bad = bytes;
        bad[4] = 99;  // version
        std::ofstream f(dir / "ver.flgt", std::ios::binary);
        f.write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(read_tensor(dir / "ver.flgt"), DtypeError);
}

TEST_CASE("sha256 matches the reference vector") {
    CHECK(sha256_hex(std::string("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("canonical json sorts keys and is stable") {
    nlohmann::json a = {{"zeta", 1}, {"alpha", 2}};
    nlohmann::json b = {{"alpha", 2}, {"zeta", 1}};
    CHECK(canonical_json(a) == canonical_json(b));
    CHECK(json_hash(a) == json_hash(b));
    CHECK(canonical_json(a) == "{\"alpha\":2,\"zeta\":1}");
}

TEST_CASE("png round trip stays within 8-bit quantization") {
    const auto dir = temp_dir("png");
    Image img(32, 48, 3);
    auto eng = rng::engine(7);
    for (auto& v : img.px) v = static_cast<float>(rng::unit(eng));
    write_png(dir / "x.png", img);
    const Image back = read_png(dir / "x.png");
    REQUIRE(back.h == img.h);
    REQUIRE(back.w == img.w);
    float max_diff = 0.0f;
    for (std::size_t i = 0; i < img.px.size(); ++i)
        max_diff = std::max(max_diff, std::abs(img.px[i] - back.px[i]));
    CHECK(max_diff <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("center crop and resize produces the requested square") {
    Image img(30, 50, 3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) img.at(y, x, 0) = static_cast<float>(x) / img.w;
    const Image out = center_crop_resize(img, 64);
    CHECK(out.h == 64);
    CHECK(out.w == 64);
    CHECK(out.c == 3);
    // Left-to-right gradient must survive the crop + resize.
    CHECK(out.at(32, 60, 0) > out.at(32, 3, 0));
}

TEST_CASE("chw/image conversions invert each other") {
    Image img(8, 8, 3);
    auto eng = rng::engine(9);
    for (auto& v : img.px) v = static_cast<float>(rng::unit(eng));
    const Chw t = image_to_chw(img);
    const Image back = chw_to_image(t);
    CHECK(back.px == img.px);
}

TEST_CASE("rng streams are deterministic and tag-separated") {
    CHECK(rng::derive(1, "a") == rng::derive(1, "a"));
    CHECK(rng::derive(1, "a") != rng::derive(1, "b"));
    CHECK(rng::derive(1, "a", 0) != rng::derive(1, "a", 1));
    auto e1 = rng::engine(rng::derive(5, "x"));
    auto e2 = rng::engine(rng::derive(5, "x"));
    for (int i = 0; i < 16; ++i) CHECK(e1() == e2());
}
