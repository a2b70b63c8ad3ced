#include "idleak/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "idleak/hashing.hpp"

namespace idleak::nn {

using nlohmann::json;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

std::size_t ParamStore::add(const std::string& name, std::vector<std::uint32_t> shape) {
    Segment seg;
    seg.name = name;
    seg.shape = std::move(shape);
    seg.offset = values_.size();
    seg.size = 1;
    for (auto d : seg.shape) seg.size *= d;
    values_.resize(values_.size() + seg.size, 0.0);
    segments_.push_back(seg);
    return seg.offset;
}

namespace {

class ConvLayer : public Layer {
public:
    int in_c, in_h, in_w, out_c, k, stride, pad, out_h, out_w;
    std::size_t w_off = 0, b_off = 0;
    std::vector<std::int32_t> gather;  // (out_h*out_w) x (in_c*k*k), -1 = zero pad

    ConvLayer(int ic, int ih, int iw, int oc, int kk, int s, int p)
        : in_c(ic), in_h(ih), in_w(iw), out_c(oc), k(kk), stride(s), pad(p) {
        out_h = (in_h + 2 * pad - k) / stride + 1;
        out_w = (in_w + 2 * pad - k) / stride + 1;
        in_size = in_c * in_h * in_w;
        out_size = out_c * out_h * out_w;
        const int K = in_c * k * k;
        gather.resize(static_cast<std::size_t>(out_h) * out_w * K);
        std::size_t g = 0;
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox)
                for (int c = 0; c < in_c; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * stride + ky - pad;
                            const int ix = ox * stride + kx - pad;
                            gather[g++] = (iy < 0 || iy >= in_h || ix < 0 || ix >= in_w)
                                              ? -1
                                              : (c * in_h + iy) * in_w + ix;
                        }
    }

    void register_params(ParamStore& ps, rng::Engine* init, const std::string& name) {
        const int K = in_c * k * k;
        w_off = ps.add(name + ".w", {static_cast<std::uint32_t>(out_c), static_cast<std::uint32_t>(K)});
        b_off = ps.add(name + ".b", {static_cast<std::uint32_t>(out_c)});
        if (init) {
            // He initialization.
            rng::Gaussian gauss;
            const double std = std::sqrt(2.0 / K);
            double* w = ps.data() + w_off;
            for (int i = 0; i < out_c * K; ++i) w[i] = std * gauss(*init);
        }
    }

    void forward(const double* params, const double* x, double* y, LayerCache& cache) const override {
        const int P = out_h * out_w;
        const int K = in_c * k * k;
        cache.col.resize(static_cast<std::size_t>(P) * K);
        for (std::size_t i = 0; i < gather.size(); ++i)
            cache.col[i] = gather[i] < 0 ? 0.0 : x[gather[i]];
        CMapM W(params + w_off, out_c, K);
        CMapM col(cache.col.data(), P, K);
        MapM Y(y, out_c, P);
        Y.noalias() = W * col.transpose();
        const double* b = params + b_off;
        for (int c = 0; c < out_c; ++c) Y.row(c).array() += b[c];
    }

    void backward(const double* params, const LayerCache& cache, const double* /*x*/,
                  const double* /*y*/, const double* dy, double* dx, double* grads) const override {
        const int P = out_h * out_w;
        const int K = in_c * k * k;
        CMapM dY(dy, out_c, P);
        CMapM col(cache.col.data(), P, K);
        if (grads) {
            MapM gW(grads + w_off, out_c, K);
            gW.noalias() += dY * col;
            Eigen::Map<Eigen::VectorXd> gb(grads + b_off, out_c);
            gb.noalias() += dY.rowwise().sum();
        }
        if (dx) {
            CMapM W(params + w_off, out_c, K);
            RowMat dcol = dY.transpose() * W;  // P x K
            std::fill(dx, dx + in_size, 0.0);
            const double* dc = dcol.data();
            for (std::size_t i = 0; i < gather.size(); ++i)
                if (gather[i] >= 0) dx[gather[i]] += dc[i];
        }
    }

    json descriptor() const override {
        return {{"type", "conv"},   {"in_c", in_c},     {"in_h", in_h}, {"in_w", in_w},
                {"out_c", out_c},   {"k", k},           {"stride", stride}, {"pad", pad}};
    }
};

class ReluLayer : public Layer {
public:
    explicit ReluLayer(int n) { in_size = out_size = n; }
    void forward(const double*, const double* x, double* y, LayerCache&) const override {
        for (int i = 0; i < in_size; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    }
    void backward(const double*, const LayerCache&, const double* x, const double*,
                  const double* dy, double* dx, double*) const override {
        if (dx)
            for (int i = 0; i < in_size; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
    }
    json descriptor() const override { return {{"type", "relu"}, {"n", in_size}}; }
};

class DenseLayer : public Layer {
public:
    int n_in, n_out;
    std::size_t w_off = 0, b_off = 0;

    DenseLayer(int in, int out) : n_in(in), n_out(out) {
        in_size = in;
        out_size = out;
    }
    void register_params(ParamStore& ps, rng::Engine* init, const std::string& name) {
        w_off = ps.add(name + ".w", {static_cast<std::uint32_t>(n_out), static_cast<std::uint32_t>(n_in)});
        b_off = ps.add(name + ".b", {static_cast<std::uint32_t>(n_out)});
        if (init) {
            rng::Gaussian gauss;
            const double std = std::sqrt(1.0 / n_in);
            double* w = ps.data() + w_off;
            for (int i = 0; i < n_out * n_in; ++i) w[i] = std * gauss(*init);
        }
    }
    void forward(const double* params, const double* x, double* y, LayerCache&) const override {
        CMapM W(params + w_off, n_out, n_in);
        Eigen::Map<const Eigen::VectorXd> xv(x, n_in);
        Eigen::Map<Eigen::VectorXd> yv(y, n_out);
        yv.noalias() = W * xv;
        yv += Eigen::Map<const Eigen::VectorXd>(params + b_off, n_out);
    }
    void backward(const double* params, const LayerCache&, const double* x, const double*,
                  const double* dy, double* dx, double* grads) const override {
        Eigen::Map<const Eigen::VectorXd> dyv(dy, n_out);
        if (grads) {
            MapM gW(grads + w_off, n_out, n_in);
            gW.noalias() += dyv * Eigen::Map<const Eigen::VectorXd>(x, n_in).transpose();
            Eigen::Map<Eigen::VectorXd>(grads + b_off, n_out) += dyv;
        }
        if (dx) {
            CMapM W(params + w_off, n_out, n_in);
            Eigen::Map<Eigen::VectorXd>(dx, n_in).noalias() = W.transpose() * dyv;
        }
    }
    json descriptor() const override { return {{"type", "dense"}, {"in", n_in}, {"out", n_out}}; }
};

class GapLayer : public Layer {
public:
    int c, h, w;
    GapLayer(int c_, int h_, int w_) : c(c_), h(h_), w(w_) {
        in_size = c * h * w;
        out_size = c;
    }
    void forward(const double*, const double* x, double* y, LayerCache&) const override {
        const int hw = h * w;
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            const double* p = x + static_cast<std::size_t>(ch) * hw;
            for (int i = 0; i < hw; ++i) acc += p[i];
            y[ch] = acc / hw;
        }
    }
    void backward(const double*, const LayerCache&, const double*, const double*, const double* dy,
                  double* dx, double*) const override {
        if (!dx) return;
        const int hw = h * w;
        for (int ch = 0; ch < c; ++ch) {
            const double g = dy[ch] / hw;
            double* p = dx + static_cast<std::size_t>(ch) * hw;
            for (int i = 0; i < hw; ++i) p[i] = g;
        }
    }
    json descriptor() const override { return {{"type", "gap"}, {"c", c}, {"h", h}, {"w", w}}; }
};

class UpsampleLayer : public Layer {
public:
    int c, in_h, in_w, out_h, out_w;
    std::vector<std::int32_t> src;  // per output pixel, the source pixel index

    UpsampleLayer(int c_, int ih, int iw, int oh, int ow)
        : c(c_), in_h(ih), in_w(iw), out_h(oh), out_w(ow) {
        in_size = c * in_h * in_w;
        out_size = c * out_h * out_w;
        src.resize(static_cast<std::size_t>(out_h) * out_w);
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x)
                src[static_cast<std::size_t>(y) * out_w + x] =
                    (y * in_h / out_h) * in_w + (x * in_w / out_w);
    }
    void forward(const double*, const double* x, double* y, LayerCache&) const override {
        const int ohw = out_h * out_w, ihw = in_h * in_w;
        for (int ch = 0; ch < c; ++ch) {
            const double* xi = x + static_cast<std::size_t>(ch) * ihw;
            double* yo = y + static_cast<std::size_t>(ch) * ohw;
            for (int i = 0; i < ohw; ++i) yo[i] = xi[src[i]];
        }
    }
    void backward(const double*, const LayerCache&, const double*, const double*, const double* dy,
                  double* dx, double*) const override {
        if (!dx) return;
        const int ohw = out_h * out_w, ihw = in_h * in_w;
        std::fill(dx, dx + in_size, 0.0);
        for (int ch = 0; ch < c; ++ch) {
            const double* dyo = dy + static_cast<std::size_t>(ch) * ohw;
            double* dxi = dx + static_cast<std::size_t>(ch) * ihw;
            for (int i = 0; i < ohw; ++i) dxi[src[i]] += dyo[i];
        }
    }
    json descriptor() const override {
        return {{"type", "upsample"}, {"c", c},         {"in_h", in_h},
                {"in_w", in_w},       {"out_h", out_h}, {"out_w", out_w}};
    }
};

class SigmoidLayer : public Layer {
public:
    explicit SigmoidLayer(int n) { in_size = out_size = n; }
    void forward(const double*, const double* x, double* y, LayerCache&) const override {
        for (int i = 0; i < in_size; ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
    }
    void backward(const double*, const LayerCache&, const double*, const double* y,
                  const double* dy, double* dx, double*) const override {
        if (dx)
            for (int i = 0; i < in_size; ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
    }
    json descriptor() const override { return {{"type", "sigmoid"}, {"n", in_size}}; }
};

class L2NormLayer : public Layer {
public:
    explicit L2NormLayer(int n) { in_size = out_size = n; }
    void forward(const double*, const double* x, double* y, LayerCache&) const override {
        double n2 = 0.0;
        for (int i = 0; i < in_size; ++i) n2 += x[i] * x[i];
        const double norm = std::sqrt(n2);
        if (norm < 1e-12) throw Error("l2_normalize: zero vector");
        for (int i = 0; i < in_size; ++i) y[i] = x[i] / norm;
    }
    void backward(const double*, const LayerCache&, const double* x, const double* y,
                  const double* dy, double* dx, double*) const override {
        if (!dx) return;
        double n2 = 0.0, ydy = 0.0;
        for (int i = 0; i < in_size; ++i) n2 += x[i] * x[i];
        const double norm = std::sqrt(n2);
        for (int i = 0; i < in_size; ++i) ydy += y[i] * dy[i];
        for (int i = 0; i < in_size; ++i) dx[i] = (dy[i] - y[i] * ydy) / norm;
    }
    json descriptor() const override { return {{"type", "l2norm"}, {"n", in_size}}; }
};

}  // namespace

void Sequential::add_conv(int in_c, int in_h, int in_w, int out_c, int k, int stride, int pad,
                          rng::Engine* init) {
    auto layer = std::make_unique<ConvLayer>(in_c, in_h, in_w, out_c, k, stride, pad);
    layer->register_params(params, init, "conv" + std::to_string(layers_.size()));
    layers_.push_back(std::move(layer));
}

void Sequential::add_relu() { layers_.push_back(std::make_unique<ReluLayer>(output_size())); }

void Sequential::add_dense(int in, int out, rng::Engine* init) {
    auto layer = std::make_unique<DenseLayer>(in, out);
    layer->register_params(params, init, "dense" + std::to_string(layers_.size()));
    layers_.push_back(std::move(layer));
}

void Sequential::add_global_avg_pool(int c, int h, int w) {
    layers_.push_back(std::make_unique<GapLayer>(c, h, w));
}

void Sequential::add_upsample_nearest(int c, int in_h, int in_w, int out_h, int out_w) {
    layers_.push_back(std::make_unique<UpsampleLayer>(c, in_h, in_w, out_h, out_w));
}

void Sequential::add_sigmoid() { layers_.push_back(std::make_unique<SigmoidLayer>(output_size())); }

void Sequential::add_l2_normalize() { layers_.push_back(std::make_unique<L2NormLayer>(output_size())); }

const double* Sequential::forward(const double* x, Tape& tape) const {
    tape.acts.resize(layers_.size());
    tape.caches.resize(layers_.size());
    const double* cur = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        tape.acts[i].resize(static_cast<std::size_t>(layers_[i]->out_size));
        layers_[i]->forward(params.data(), cur, tape.acts[i].data(), tape.caches[i]);
        cur = tape.acts[i].data();
    }
    return cur;
}

void Sequential::backward(const double* x, const double* dy, Tape& tape, double* dx,
                          double* grads) const {
    std::vector<double> dcur(dy, dy + layers_.back()->out_size);
    std::vector<double> dprev;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        const double* xin = i == 0 ? x : tape.acts[i - 1].data();
        const double* yout = tape.acts[i].data();
        double* dxi = nullptr;
        if (i > 0) {
            dprev.assign(static_cast<std::size_t>(layers_[i]->in_size), 0.0);
            dxi = dprev.data();
        } else {
            dxi = dx;  // may be null
        }
        layers_[i]->backward(params.data(), tape.caches[i], xin, yout, dcur.data(), dxi, grads);
        if (i > 0) dcur.swap(dprev);
    }
}

json Sequential::architecture() const {
    json layers = json::array();
    for (const auto& l : layers_) layers.push_back(l->descriptor());
    return {{"layers", layers}};
}

Sequential Sequential::from_architecture(const json& arch) {
    Sequential net;
    for (const auto& d : arch.at("layers")) {
        const std::string type = d.at("type").get<std::string>();
        if (type == "conv")
            net.add_conv(d.at("in_c"), d.at("in_h"), d.at("in_w"), d.at("out_c"), d.at("k"),
                         d.at("stride"), d.at("pad"), nullptr);
        else if (type == "relu")
            net.add_relu();
        else if (type == "dense")
            net.add_dense(d.at("in"), d.at("out"), nullptr);
        else if (type == "gap")
            net.add_global_avg_pool(d.at("c"), d.at("h"), d.at("w"));
        else if (type == "upsample")
            net.add_upsample_nearest(d.at("c"), d.at("in_h"), d.at("in_w"), d.at("out_h"),
                                     d.at("out_w"));
        else if (type == "sigmoid")
            net.add_sigmoid();
        else if (type == "l2norm")
            net.add_l2_normalize();
        else
            throw ConfigError("unknown layer type in architecture: " + type);
    }
    return net;
}

Adam::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : m_(n, 0.0), v_(n, 0.0), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(double* w, const double* g, std::size_t n, double lr_scale) {
    if (n != m_.size()) throw DimensionError("adam: size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    const double lr = lr_ * lr_scale;
    for (std::size_t i = 0; i < n; ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = m_[i] / bc1;
        const double vhat = v_[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
}

double cosine_decay(long step, long total, double floor) {
    if (total <= 1) return 1.0;
    const double t = static_cast<double>(step) / static_cast<double>(total - 1);
    return floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

double am_softmax_loss(const double* emb_unit, int d, int label, const double* weights,
                       int n_classes, double scale, double margin, double* d_emb,
                       double* g_weights, int* argmax_class) {
    // Normalize class rows on the fly; cache norms for the backward pass.
    std::vector<double> cosv(static_cast<std::size_t>(n_classes));
    std::vector<double> norms(static_cast<std::size_t>(n_classes));
    for (int j = 0; j < n_classes; ++j) {
        const double* wj = weights + static_cast<std::size_t>(j) * d;
        double n2 = 1e-24;
        for (int i = 0; i < d; ++i) n2 += wj[i] * wj[i];
        norms[j] = std::sqrt(n2);
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += wj[i] * emb_unit[i];
        cosv[j] = acc / norms[j];
    }
    int best = 0;
    for (int j = 1; j < n_classes; ++j)
        if (cosv[j] > cosv[best]) best = j;
    if (argmax_class) *argmax_class = best;

    std::vector<double> logits(cosv);
    logits[label] -= margin;
    double mx = -1e300;
    for (int j = 0; j < n_classes; ++j) {
        logits[j] *= scale;
        mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (int j = 0; j < n_classes; ++j) z += std::exp(logits[j] - mx);
    const double logz = std::log(z) + mx;
    const double loss = logz - logits[label];

    // dlogit = softmax - onehot; dcos = scale * dlogit.
    if (d_emb) std::fill(d_emb, d_emb + d, 0.0);
    for (int j = 0; j < n_classes; ++j) {
        const double p = std::exp(logits[j] - logz);
        const double dcos = scale * (p - (j == label ? 1.0 : 0.0));
        const double* wj = weights + static_cast<std::size_t>(j) * d;
        if (d_emb)
            for (int i = 0; i < d; ++i) d_emb[i] += dcos * wj[i] / norms[j];
        if (g_weights) {
            // d cos / d w_j = (e - cos_j * w_j / ||w_j||) / ||w_j||
            double* gj = g_weights + static_cast<std::size_t>(j) * d;
            for (int i = 0; i < d; ++i)
                gj[i] += dcos * (emb_unit[i] - cosv[j] * wj[i] / norms[j]) / norms[j];
        }
    }
    return loss;
}

double cosine_alignment_loss(const double* s_unit, const double* t_unit, int d, double* d_s) {
    double c = 0.0;
    for (int i = 0; i < d; ++i) c += s_unit[i] * t_unit[i];
    if (d_s)
        for (int i = 0; i < d; ++i) d_s[i] = -t_unit[i];
    return 1.0 - c;
}

void l2_normalize(double* v, int d) {
    double n2 = 0.0;
    for (int i = 0; i < d; ++i) n2 += v[i] * v[i];
    const double n = std::sqrt(n2);
    if (n < 1e-12) throw Error("l2_normalize: zero vector");
    for (int i = 0; i < d; ++i) v[i] /= n;
}

double dot(const double* a, const double* b, int d) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) acc += a[i] * b[i];
    return acc;
}

void save_model(const std::filesystem::path& path, const Sequential& net, const json& extra) {
    json header = net.architecture();
    header["extra"] = extra;
    json segs = json::array();
    for (const auto& s : net.params.segments())
        segs.push_back({{"name", s.name}, {"shape", s.shape}});
    header["segments"] = segs;
    const std::string hj = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write("FLGM", 4);
    const std::uint16_t ver = kFlgmVersion;
    f.write(reinterpret_cast<const char*>(&ver), 2);
    const std::uint32_t jlen = static_cast<std::uint32_t>(hj.size());
    f.write(reinterpret_cast<const char*>(&jlen), 4);
    f.write(hj.data(), static_cast<std::streamsize>(hj.size()));
    for (const auto& s : net.params.segments()) {
        Tensor t = Tensor::f64(s.shape);
        std::memcpy(t.data<double>().data(), net.params.data() + s.offset, s.size * sizeof(double));
        const auto bytes = tensor_bytes(t);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    if (!f) throw IoError("model write failed: " + path.string());
}

LoadedModel load_model(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 10) throw TruncatedFileError("flgm: too short");
    if (std::memcmp(bytes.data(), "FLGM", 4) != 0) throw BadMagicError("flgm: bad magic");
    std::uint16_t ver;
    std::memcpy(&ver, bytes.data() + 4, 2);
    if (ver != kFlgmVersion) throw DtypeError("flgm: unsupported version " + std::to_string(ver));
    std::uint32_t jlen;
    std::memcpy(&jlen, bytes.data() + 6, 4);
    if (10 + jlen > bytes.size()) throw TruncatedFileError("flgm: truncated header");
    const json header = json::parse(bytes.begin() + 10, bytes.begin() + 10 + jlen);

    LoadedModel out{Sequential::from_architecture(header), header.value("extra", json::object())};
    std::size_t off = 10 + jlen;
    for (const auto& s : out.net.params.segments()) {
        std::size_t consumed = 0;
        Tensor t = tensor_from_bytes(bytes.data() + off, bytes.size() - off, &consumed);
        off += consumed;
        if (t.dtype() != Dtype::F64 || t.size() != s.size)
            throw DtypeError("flgm: segment " + s.name + " has wrong dtype or size");
        std::memcpy(out.net.params.data() + s.offset, t.data<double>().data(), s.size * sizeof(double));
    }
    return out;
}

std::string params_hash(const Sequential& net) {
    return sha256_hex(net.params.data(), net.params.size() * sizeof(double));
}

}  // namespace idleak::nn
