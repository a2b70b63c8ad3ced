#include "idleak/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace idleak {

Tensor Image::to_tensor() const {
    Tensor t = Tensor::f32({static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w),
                            static_cast<std::uint32_t>(c)});
    t.data<float>() = px;
    return t;
}

Image Image::from_tensor(const Tensor& t) {
    if (t.rank() != 3) throw DimensionError("image tensor must have rank 3 (H,W,C)");
    if (t.dtype() != Dtype::F32) throw DtypeError("image tensor must be f32, got " + dtype_name(t.dtype()));
    Image img(static_cast<int>(t.shape()[0]), static_cast<int>(t.shape()[1]),
              static_cast<int>(t.shape()[2]));
    img.px = t.data<float>();
    return img;
}

Tensor Chw::to_tensor() const {
    Tensor t = Tensor::f32({static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(h),
                            static_cast<std::uint32_t>(w)});
    t.data<float>() = v;
    return t;
}

Chw Chw::from_tensor(const Tensor& t) {
    if (t.rank() != 3) throw DimensionError("chw tensor must have rank 3 (C,H,W)");
    if (t.dtype() != Dtype::F32) throw DtypeError("chw tensor must be f32, got " + dtype_name(t.dtype()));
    Chw out(static_cast<int>(t.shape()[0]), static_cast<int>(t.shape()[1]),
            static_cast<int>(t.shape()[2]));
    out.v = t.data<float>();
    return out;
}

Chw image_to_chw(const Image& img) {
    Chw out(img.c, img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) out.at(ch, y, x) = img.at(y, x, ch);
    return out;
}

Image chw_to_image(const Chw& t) {
    Image out(t.h, t.w, t.c);
    for (int ch = 0; ch < t.c; ++ch)
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x) out.at(y, x, ch) = t.at(ch, y, x);
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.c != 1 && img.c != 3) throw DimensionError("write_png: 1 or 3 channels required");
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw IoError("libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.w, img.h, 8,
                 img.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(static_cast<std::size_t>(img.w) * img.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) {
                const float v = std::clamp(img.at(y, x, ch), 0.0f, 1.0f);
                row[static_cast<std::size_t>(x) * img.c + ch] =
                    static_cast<png_byte>(std::lround(v * 255.0f));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open for reading: " + path.string());

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw BadMagicError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw IoError("libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png read failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = static_cast<int>(png_get_channels(png, info));
    if (c != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png read: unexpected channel count after expansion");
    }

    Image img(h, w, 3);
    std::vector<png_byte> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                img.at(y, x, ch) = static_cast<float>(row[static_cast<std::size_t>(x) * 3 + ch]) / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

Image center_crop_resize(const Image& in, int side) {
    const int sq = std::min(in.h, in.w);
    const int y0 = (in.h - sq) / 2;
    const int x0 = (in.w - sq) / 2;

    Image out(side, side, in.c);
    const double scale = static_cast<double>(sq) / side;
    for (int y = 0; y < side; ++y) {
        const double sy = (y + 0.5) * scale - 0.5;
        const int iy = static_cast<int>(std::floor(sy));
        const double fy = sy - iy;
        const int y1 = std::clamp(iy, 0, sq - 1), y2 = std::clamp(iy + 1, 0, sq - 1);
        for (int x = 0; x < side; ++x) {
            const double sx = (x + 0.5) * scale - 0.5;
            const int ix = static_cast<int>(std::floor(sx));
            const double fx = sx - ix;
            const int x1 = std::clamp(ix, 0, sq - 1), x2 = std::clamp(ix + 1, 0, sq - 1);
            for (int ch = 0; ch < in.c; ++ch) {
                const double v = (1 - fy) * ((1 - fx) * in.at(y0 + y1, x0 + x1, ch) + fx * in.at(y0 + y1, x0 + x2, ch)) +
                                 fy * ((1 - fx) * in.at(y0 + y2, x0 + x1, ch) + fx * in.at(y0 + y2, x0 + x2, ch));
                out.at(y, x, ch) = static_cast<float>(v);
            }
        }
    }
    return out;
}

}  // namespace idleak
