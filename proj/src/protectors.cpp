#include "idleak/protectors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "idleak/hashing.hpp"
#include "idleak/rng.hpp"

namespace idleak::protect {

using nlohmann::json;

std::string method_name(Method m) {
    switch (m) {
        case Method::PARTIAL: return "partial";
        case Method::MINUS: return "minus";
        case Method::HIGHPASS: return "highpass";
    }
    return "invalid";
}

Method method_from_name(const std::string& name) {
    if (name == "partial") return Method::PARTIAL;
    if (name == "minus") return Method::MINUS;
    if (name == "highpass") return Method::HIGHPASS;
    throw ConfigError("unknown protector method: " + name);
}

json ProtectorConfig::to_json() const {
    json j;
    j["method"] = method_name(method);
    j["seed"] = seed;
    if (method == Method::PARTIAL) {
        j["block_size"] = block_size;
        j["n_selected"] = n_selected;
        j["n_lowest_dropped"] = n_lowest_dropped;
    } else {
        j["sigma"] = sigma;
    }
    return j;
}

ProtectorConfig ProtectorConfig::from_json(const json& j) {
    ProtectorConfig cfg;
    cfg.method = method_from_name(j.at("method").get<std::string>());
    cfg.seed = j.value("seed", 0ULL);
    cfg.block_size = j.value("block_size", 8);
    cfg.n_selected = j.value("n_selected", 24);
    cfg.n_lowest_dropped = j.value("n_lowest_dropped", 8);
    cfg.sigma = j.value("sigma", 1.5);
    return cfg;
}

std::string ProtectorConfig::hash() const { return json_hash(to_json()); }

int ProtectorConfig::channels() const {
    return method == Method::PARTIAL ? 3 * n_selected : 3;
}

int ProtectorConfig::spatial() const {
    return method == Method::PARTIAL ? corpus::kImageSide / block_size : corpus::kImageSide;
}

void validate(const ProtectorConfig& cfg) {
    if (cfg.method == Method::PARTIAL) {
        const int nb = cfg.block_size * cfg.block_size;
        if (cfg.block_size < 2 || corpus::kImageSide % cfg.block_size != 0)
            throw ConfigError("partial: block_size must divide the image side");
        if (cfg.n_selected < 1 || cfg.n_selected > nb)
            throw ConfigError("partial: n_selected must be in [1, block_size^2]");
        if (cfg.n_lowest_dropped < 0 || cfg.n_lowest_dropped >= nb)
            throw ConfigError("partial: n_lowest_dropped must be in [0, block_size^2)");
        if (cfg.n_selected > nb - cfg.n_lowest_dropped)
            throw ConfigError("partial: n_selected exceeds sub-bands left after dropping " +
                              std::to_string(cfg.n_lowest_dropped));
    } else {
        if (!(cfg.sigma > 0.0)) throw ConfigError("sigma must be > 0");
    }
}

std::vector<std::pair<int, int>> zigzag_order(int n) {
    std::vector<std::pair<int, int>> order;
    order.reserve(static_cast<std::size_t>(n) * n);
    for (int s = 0; s <= 2 * (n - 1); ++s) {
        if (s % 2 == 0) {
            // even diagonals walk up-right
            for (int y = std::min(s, n - 1); y >= 0 && s - y < n; --y) order.emplace_back(y, s - y);
        } else {
            for (int x = std::min(s, n - 1); x >= 0 && s - x < n; --x) order.emplace_back(s - x, x);
        }
    }
    return order;
}

namespace {

// Orthonormal DCT-II basis, computed in double.
std::vector<double> dct_matrix(int n) {
    std::vector<double> d(static_cast<std::size_t>(n) * n);
    const double pi = 3.14159265358979323846;
    for (int k = 0; k < n; ++k) {
        const double ck = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(k) * n + i] = ck * std::cos(pi * (2 * i + 1) * k / (2.0 * n));
    }
    return d;
}

// coeffs = D * block * D^T (forward), block = D^T * coeffs * D (inverse).
void dct2d(const std::vector<double>& d, int n, const double* in, double* out, bool inverse) {
    std::vector<double> tmp(static_cast<std::size_t>(n) * n, 0.0);
    auto D = [&](int r, int c) { return inverse ? d[static_cast<std::size_t>(c) * n + r] : d[static_cast<std::size_t>(r) * n + c]; };
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < n; ++k) acc += D(i, k) * in[static_cast<std::size_t>(k) * n + j];
            tmp[static_cast<std::size_t>(i) * n + j] = acc;
        }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < n; ++k) acc += tmp[static_cast<std::size_t>(i) * n + k] * D(j, k);
            out[static_cast<std::size_t>(i) * n + j] = acc;
        }
}

void check_image(const Image& img) {
    if (img.h != corpus::kImageSide || img.w != corpus::kImageSide || img.c != 3)
        throw DimensionError("protect: image must be 64x64x3 (resize is the caller's job)");
}

}  // namespace

std::vector<int> selected_subbands(const ProtectorConfig& cfg) {
    validate(cfg);
    const int nb = cfg.block_size * cfg.block_size;
    std::vector<int> candidates;
    for (int z = cfg.n_lowest_dropped; z < nb; ++z) candidates.push_back(z);
    // Seeded Fisher-Yates; the first n_selected entries form the kept set.
    auto eng = rng::engine(rng::derive(cfg.seed, "partial-subbands"));
    for (std::size_t i = candidates.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng::below(eng, i));
        std::swap(candidates[i - 1], candidates[j]);
    }
    std::vector<int> selected(candidates.begin(), candidates.begin() + cfg.n_selected);
    std::sort(selected.begin(), selected.end());
    return selected;
}

ProtectedTemplate protect_partial(const Image& image, const ProtectorConfig& cfg) {
    check_image(image);
    validate(cfg);
    const int bs = cfg.block_size;
    const int grid = corpus::kImageSide / bs;
    const auto zz = zigzag_order(bs);
    const auto d = dct_matrix(bs);
    const auto sel = selected_subbands(cfg);

    // Channel layout: for each selected zigzag index (ascending), the R, G, B
    // coefficient planes over the block grid.
    ProtectedTemplate tpl;
    tpl.method = Method::PARTIAL;
    tpl.config_hash = cfg.hash();
    tpl.tensor = Chw(3 * cfg.n_selected, grid, grid);

    std::vector<double> block(static_cast<std::size_t>(bs) * bs), coeff(block.size());
    for (int color = 0; color < 3; ++color) {
        for (int by = 0; by < grid; ++by)
            for (int bx = 0; bx < grid; ++bx) {
                for (int y = 0; y < bs; ++y)
                    for (int x = 0; x < bs; ++x)
                        block[static_cast<std::size_t>(y) * bs + x] =
                            image.at(by * bs + y, bx * bs + x, color);
                dct2d(d, bs, block.data(), coeff.data(), false);
                for (std::size_t si = 0; si < sel.size(); ++si) {
                    const auto [zy, zx] = zz[static_cast<std::size_t>(sel[si])];
                    tpl.tensor.at(static_cast<int>(si) * 3 + color, by, bx) =
                        static_cast<float>(coeff[static_cast<std::size_t>(zy) * bs + zx]);
                }
            }
    }
    return tpl;
}

Image partial_to_image(const ProtectedTemplate& tpl, const ProtectorConfig& cfg) {
    validate(cfg);
    if (tpl.method != Method::PARTIAL) throw ConfigError("partial_to_image: template is not PARTIAL");
    if (tpl.tensor.c != cfg.channels())
        throw DimensionError("partial_to_image: template has " + std::to_string(tpl.tensor.c) +
                             " channels, config declares " + std::to_string(cfg.channels()));
    const int bs = cfg.block_size;
    const int grid = corpus::kImageSide / bs;
    const auto zz = zigzag_order(bs);
    const auto d = dct_matrix(bs);
    const auto sel = selected_subbands(cfg);

    Image out(corpus::kImageSide, corpus::kImageSide, 3);
    std::vector<double> coeff(static_cast<std::size_t>(bs) * bs), block(coeff.size());
    for (int color = 0; color < 3; ++color)
        for (int by = 0; by < grid; ++by)
            for (int bx = 0; bx < grid; ++bx) {
                std::fill(coeff.begin(), coeff.end(), 0.0);
                for (std::size_t si = 0; si < sel.size(); ++si) {
                    const auto [zy, zx] = zz[static_cast<std::size_t>(sel[si])];
                    coeff[static_cast<std::size_t>(zy) * bs + zx] =
                        tpl.tensor.at(static_cast<int>(si) * 3 + color, by, bx);
                }
                dct2d(d, bs, coeff.data(), block.data(), true);
                for (int y = 0; y < bs; ++y)
                    for (int x = 0; x < bs; ++x)
                        out.at(by * bs + y, bx * bs + x, color) =
                            static_cast<float>(block[static_cast<std::size_t>(y) * bs + x]);
            }
    return out;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("gaussian_blur: sigma must be > 0");
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= sum;

    const auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    Image tmp(img.h, img.w, img.c), out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           img.at(y, clampi(x + i, 0, img.w - 1), ch);
                tmp.at(y, x, ch) = static_cast<float>(acc);
            }
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           tmp.at(clampi(y + i, 0, img.h - 1), x, ch);
                out.at(y, x, ch) = static_cast<float>(acc);
            }
    return out;
}

Chw highpass_residual(const Image& img, double sigma) {
    const Image blurred = gaussian_blur(img, sigma);
    Chw out(img.c, img.h, img.w);
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) out.at(ch, y, x) = img.at(y, x, ch) - blurred.at(y, x, ch);
    return out;
}

ProtectedTemplate protect_minus(const Image& image, const ProtectorConfig& cfg) {
    check_image(image);
    validate(cfg);
    ProtectedTemplate tpl;
    tpl.method = Method::MINUS;
    tpl.config_hash = cfg.hash();
    tpl.tensor = highpass_residual(image, cfg.sigma);
    return tpl;
}

ProtectedTemplate protect_highpass(const Image& image, const ProtectorConfig& cfg) {
    check_image(image);
    validate(cfg);
    ProtectedTemplate tpl;
    tpl.method = Method::HIGHPASS;
    tpl.config_hash = cfg.hash();
    tpl.tensor = highpass_residual(image, cfg.sigma);
    return tpl;
}

ProtectedTemplate apply(const Image& image, const ProtectorConfig& cfg) {
    switch (cfg.method) {
        case Method::PARTIAL: return protect_partial(image, cfg);
        case Method::MINUS: return protect_minus(image, cfg);
        case Method::HIGHPASS: return protect_highpass(image, cfg);
    }
    throw ConfigError("protect: unknown method");
}

void write_templates(const std::filesystem::path& dir, const ProtectorConfig& cfg,
                     const std::vector<ProtectedTemplate>& tpls, bool overwrite) {
    namespace fs = std::filesystem;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!overwrite) throw IoError("output directory exists (pass overwrite): " + dir.string());
        fs::remove_all(dir);
    }
    fs::create_directories(dir);

    json manifest;
    manifest["config"] = cfg.to_json();
    manifest["config_hash"] = cfg.hash();
    json items = json::array();
    for (std::size_t i = 0; i < tpls.size(); ++i) {
        const std::string name = tpls[i].source_id ? *tpls[i].source_id : ("t" + std::to_string(i));
        write_tensor(dir / (name + ".flgt"), tpls[i].tensor.to_tensor());
        items.push_back(name);
    }
    manifest["items"] = items;
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

TemplateSet read_templates(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("template manifest missing in " + dir.string());
    const json manifest = json::parse(mf);

    TemplateSet set;
    set.config = ProtectorConfig::from_json(manifest.at("config"));
    for (const auto& item : manifest.at("items")) {
        const std::string name = item.get<std::string>();
        ProtectedTemplate tpl;
        tpl.method = set.config.method;
        tpl.config_hash = manifest.at("config_hash").get<std::string>();
        tpl.source_id = name;
        tpl.tensor = Chw::from_tensor(read_tensor(dir / (name + ".flgt")));
        set.items.push_back(std::move(tpl));
    }
    return set;
}

}  // namespace idleak::protect
