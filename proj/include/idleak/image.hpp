#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "idleak/common.hpp"
#include "idleak/tensor.hpp"

namespace idleak {

// Float image, row-major H x W x C, values nominally in [0, 1].
struct Image {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<float> px;

    Image() = default;
    Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), px(static_cast<std::size_t>(h_) * w_ * c_, 0.0f) {}

    float& at(int y, int x, int ch) { return px[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    float at(int y, int x, int ch) const { return px[(static_cast<std::size_t>(y) * w + x) * c + ch]; }

    Tensor to_tensor() const;
    static Image from_tensor(const Tensor& t);
};

// Channel-major float volume (C x H x W); the layout of protected templates.
struct Chw {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<float> v;

    Chw() = default;
    Chw(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, 0.0f) {}

    float& at(int ch, int y, int x) { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    float at(int ch, int y, int x) const { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }

    Tensor to_tensor() const;
    static Chw from_tensor(const Tensor& t);
};

// HWC <-> CHW conversions.
Chw image_to_chw(const Image& img);
Image chw_to_image(const Chw& t);

// PNG I/O (8-bit). Reading expands palette/gray/alpha to RGB and scales to
// [0,1]; writing rounds to the nearest 8-bit code.
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

// Center-crop to the largest square, then bilinear resize.
Image center_crop_resize(const Image& in, int side);

}  // namespace idleak
