#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "idleak/common.hpp"
#include "idleak/rng.hpp"
#include "idleak/tensor.hpp"
#include "json.hpp"

namespace idleak::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Flat parameter vector with named segments. Layers hold offsets into it;
// optimizers, serialization and finite-difference checks all see one
// contiguous buffer.
class ParamStore {
public:
    struct Segment {
        std::string name;
        std::vector<std::uint32_t> shape;
        std::size_t offset = 0;
        std::size_t size = 0;
    };

    std::size_t add(const std::string& name, std::vector<std::uint32_t> shape);

    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    std::size_t size() const { return values_.size(); }
    const std::vector<Segment>& segments() const { return segments_; }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

private:
    std::vector<double> values_;
    std::vector<Segment> segments_;
};

struct LayerCache {
    std::vector<double> col;  // conv: im2col matrix; dense: input copy
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual void forward(const double* params, const double* x, double* y, LayerCache& cache) const = 0;
    // dx may be null (first layer); grads may be null (frozen model).
    virtual void backward(const double* params, const LayerCache& cache, const double* x,
                          const double* y, const double* dy, double* dx, double* grads) const = 0;
    virtual nlohmann::json descriptor() const = 0;

    int in_size = 0;
    int out_size = 0;
};

// Network as a layer pipeline over one sample. Batches are sequential loops
// with fixed order; gradient accumulation order is deterministic.
class Sequential {
public:
    ParamStore params;

    void add_conv(int in_c, int in_h, int in_w, int out_c, int k, int stride, int pad,
                  rng::Engine* init);
    void add_relu();
    void add_dense(int in, int out, rng::Engine* init);
    void add_global_avg_pool(int c, int h, int w);
    void add_upsample_nearest(int c, int in_h, int in_w, int out_h, int out_w);
    void add_sigmoid();
    void add_l2_normalize();

    int input_size() const { return layers_.empty() ? 0 : layers_.front()->in_size; }
    int output_size() const { return layers_.empty() ? 0 : layers_.back()->out_size; }

    struct Tape {
        std::vector<std::vector<double>> acts;  // acts[i] = output of layer i
        std::vector<LayerCache> caches;
    };

    // Returns pointer to the final activation inside the tape.
    const double* forward(const double* x, Tape& tape) const;
    // dy has output_size() entries. Writes input gradient to dx (nullable) and
    // accumulates parameter gradients into grads (nullable).
    void backward(const double* x, const double* dy, Tape& tape, double* dx, double* grads) const;

    nlohmann::json architecture() const;
    static Sequential from_architecture(const nlohmann::json& arch);

private:
    std::vector<std::unique_ptr<Layer>> layers_;
    friend Sequential sequential_from_arch_impl(const nlohmann::json&);
};

// Elementwise Adam with bias correction.
class Adam {
public:
    Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(double* w, const double* g, std::size_t n, double lr_scale = 1.0);

private:
    std::vector<double> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

// lr multiplier for cosine decay from 1 at step 0 to floor at step total-1.
double cosine_decay(long step, long total, double floor = 0.05);

// Additive-margin softmax over unit embedding e and class-weight matrix
// (n_classes x d, rows normalized internally). Returns cross-entropy loss,
// writes gradient wrt e into d_emb (set, not accumulated), accumulates class
// weight grads into g_weights when non-null, and reports the argmax class.
double am_softmax_loss(const double* emb_unit, int d, int label, const double* weights,
                       int n_classes, double scale, double margin, double* d_emb,
                       double* g_weights, int* argmax_class);

// Eq.-style cosine alignment: loss = 1 - s.t for unit vectors; d_s = -t.
double cosine_alignment_loss(const double* s_unit, const double* t_unit, int d, double* d_s);

void l2_normalize(double* v, int d);  // throws on near-zero norm
double dot(const double* a, const double* b, int d);

// Model container .flgm: magic "FLGM" | version u16 | json_len u32 |
// architecture+extra JSON | one .flgt f64 tensor per parameter segment.
constexpr std::uint16_t kFlgmVersion = 1;
void save_model(const std::filesystem::path& path, const Sequential& net,
                const nlohmann::json& extra);
struct LoadedModel {
    Sequential net;
    nlohmann::json extra;
};
LoadedModel load_model(const std::filesystem::path& path);

std::string params_hash(const Sequential& net);

}  // namespace idleak::nn
