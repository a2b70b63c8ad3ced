#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "idleak/nn.hpp"
#include "idleak/rng.hpp"

using namespace idleak;
using namespace idleak::nn;

namespace {

// Mini student-like network, well under 1k parameters: conv, relu, conv,
// gap, dense, l2norm on a 2x8x8 input.
Sequential mini_net(std::uint64_t seed) {
    auto eng = rng::engine(rng::derive(seed, "mini"));
    Sequential net;
    net.add_conv(2, 8, 8, 4, 3, 2, 1, &eng);
    net.add_relu();
    net.add_conv(4, 4, 4, 6, 3, 2, 1, &eng);
    net.add_relu();
    net.add_global_avg_pool(6, 2, 2);
    net.add_dense(6, 8, &eng);
    net.add_l2_normalize();
    return net;
}

std::vector<double> random_input(int n, std::uint64_t seed) {
    auto eng = rng::engine(seed);
    std::vector<double> x(static_cast<std::size_t>(n));
    for (auto& v : x) v = rng::uniform(eng, -1.0, 1.0);
    return x;
}

// Relative L2 error between backprop and central finite differences over all
// parameters of `net` for the scalar loss `loss_fn(net)`.
template <typename LossFn>
double fd_relative_error(Sequential& net, const std::vector<double>& x, LossFn&& loss_fn) {
    Sequential::Tape tape;
    std::vector<double> grads(net.params.size(), 0.0);
    loss_fn(net, x, tape, grads.data());

    std::vector<double> fd(net.params.size(), 0.0);
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        const double w0 = net.params.data()[i];
        const double h = 1e-6 * (1.0 + std::abs(w0));
        net.params.data()[i] = w0 + h;
        const double lp = loss_fn(net, x, tape, nullptr);
        net.params.data()[i] = w0 - h;
        const double lm = loss_fn(net, x, tape, nullptr);
        net.params.data()[i] = w0;
        fd[i] = (lp - lm) / (2.0 * h);
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
        num += (fd[i] - grads[i]) * (fd[i] - grads[i]);
        den += fd[i] * fd[i];
    }
    return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("cosine distillation loss gradient matches finite differences") {
    Sequential net = mini_net(1);
    REQUIRE(net.params.size() <= 1000);
    const auto x = random_input(net.input_size(), 2);
    auto target = random_input(net.output_size(), 3);
    l2_normalize(target.data(), static_cast<int>(target.size()));

    auto loss_fn = [&](Sequential& n, const std::vector<double>& input, Sequential::Tape& tape,
                       double* grads) {
        const double* y = n.forward(input.data(), tape);
        std::vector<double> dy(static_cast<std::size_t>(n.output_size()));
        const double loss =
            cosine_alignment_loss(y, target.data(), n.output_size(), grads ? dy.data() : nullptr);
        if (grads) n.backward(input.data(), dy.data(), tape, nullptr, grads);
        return loss;
    };
    const double rel = fd_relative_error(net, x, loss_fn);
    INFO("relative L2 error: ", rel);
    CHECK(rel <= 1e-3);
}

TEST_CASE("am-softmax gradient matches finite differences through the trunk") {
    Sequential net = mini_net(4);
    const auto x = random_input(net.input_size(), 5);
    constexpr int n_classes = 3;
    ParamStore head;
    head.add("w", {n_classes, 8});
    {
        auto eng = rng::engine(6);
        rng::Gaussian gauss;
        for (auto& w : head.values()) w = 0.3 * gauss(eng);
    }

    auto loss_fn = [&](Sequential& n, const std::vector<double>& input, Sequential::Tape& tape,
                       double* grads) {
        const double* emb = n.forward(input.data(), tape);
        std::vector<double> demb(8);
        const double loss = am_softmax_loss(emb, 8, 1, head.data(), n_classes, 16.0, 0.2,
                                            grads ? demb.data() : nullptr, nullptr, nullptr);
        if (grads) n.backward(input.data(), demb.data(), tape, nullptr, grads);
        return loss;
    };
    const double rel = fd_relative_error(net, x, loss_fn);
    INFO("relative L2 error: ", rel);
    CHECK(rel <= 1e-3);

    // Head-weight gradient, finite differences directly on the class matrix.
    Sequential::Tape tape;
    const double* emb = net.forward(x.data(), tape);
    std::vector<double> gw(head.size(), 0.0);
    am_softmax_loss(emb, 8, 1, head.data(), n_classes, 16.0, 0.2, nullptr, gw.data(), nullptr);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < head.size(); ++i) {
        const double w0 = head.data()[i];
        const double h = 1e-6 * (1.0 + std::abs(w0));
        head.data()[i] = w0 + h;
        const double lp = am_softmax_loss(emb, 8, 1, head.data(), n_classes, 16.0, 0.2, nullptr,
                                          nullptr, nullptr);
        head.data()[i] = w0 - h;
        const double lm = am_softmax_loss(emb, 8, 1, head.data(), n_classes, 16.0, 0.2, nullptr,
                                          nullptr, nullptr);
        head.data()[i] = w0;
        const double fd = (lp - lm) / (2.0 * h);
        num += (fd - gw[i]) * (fd - gw[i]);
        den += fd * fd;
    }
    CHECK(std::sqrt(num / den) <= 1e-3);
}

TEST_CASE("pixel-MSE gradient through sigmoid decoder layers matches finite differences") {
    auto eng = rng::engine(rng::derive(7, "dec"));
    Sequential net;
    net.add_dense(6, 4 * 2 * 2, &eng);
    net.add_relu();
    net.add_upsample_nearest(4, 2, 2, 4, 4);
    net.add_conv(4, 4, 4, 3, 3, 1, 1, &eng);
    net.add_sigmoid();
    REQUIRE(net.params.size() <= 1000);

    const auto x = random_input(net.input_size(), 8);
    const auto target = random_input(net.output_size(), 9);
    auto loss_fn = [&](Sequential& n, const std::vector<double>& input, Sequential::Tape& tape,
                       double* grads) {
        const double* y = n.forward(input.data(), tape);
        const int m = n.output_size();
        double mse = 0.0;
        std::vector<double> dy(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) {
            const double diff = y[i] - target[static_cast<std::size_t>(i)];
            mse += diff * diff;
            dy[static_cast<std::size_t>(i)] = 2.0 * diff / m;
        }
        if (grads) n.backward(input.data(), dy.data(), tape, nullptr, grads);
        return mse / m;
    };
    const double rel = fd_relative_error(net, x, loss_fn);
    INFO("relative L2 error: ", rel);
    CHECK(rel <= 1e-3);
}

TEST_CASE("input gradients propagate through a frozen network") {
    Sequential net = mini_net(10);
    const auto x = random_input(net.input_size(), 11);
    auto target = random_input(net.output_size(), 12);
    l2_normalize(target.data(), static_cast<int>(target.size()));

    Sequential::Tape tape;
    const double* y = net.forward(x.data(), tape);
    std::vector<double> dy(static_cast<std::size_t>(net.output_size()));
    cosine_alignment_loss(y, target.data(), net.output_size(), dy.data());
    std::vector<double> dx(x.size(), 0.0);
    net.backward(x.data(), dy.data(), tape, dx.data(), nullptr);

    // Central differences on a handful of input coordinates.
    auto loss_at = [&](std::vector<double> input) {
        Sequential::Tape t;
        const double* out = net.forward(input.data(), t);
        return cosine_alignment_loss(out, target.data(), net.output_size(), nullptr);
    };
    for (std::size_t i = 0; i < x.size(); i += 17) {
        auto xp = x;
        auto xm = x;
        xp[i] += 1e-6;
        xm[i] -= 1e-6;
        const double fd = (loss_at(xp) - loss_at(xm)) / 2e-6;
        CHECK(std::abs(fd - dx[i]) <= 1e-4 * (1.0 + std::abs(fd)));
    }
}

TEST_CASE("adam minimizes a quadratic") {
    std::vector<double> w{5.0, -3.0};
    Adam opt(2, 0.1);
    for (int i = 0; i < 500; ++i) {
        const double g[2] = {2.0 * w[0], 2.0 * (w[1] + 1.0)};
        opt.step(w.data(), g, 2);
    }
    CHECK(std::abs(w[0]) < 1e-2);
    CHECK(std::abs(w[1] + 1.0) < 1e-2);
}

TEST_CASE("cosine decay spans [floor, 1]") {
    CHECK(cosine_decay(0, 100) == doctest::Approx(1.0));
    CHECK(cosine_decay(99, 100) == doctest::Approx(0.05));
    CHECK(cosine_decay(50, 100) > 0.05);
    CHECK(cosine_decay(50, 100) < 1.0);
}

TEST_CASE("model container round trips architecture and parameters") {
    Sequential net = mini_net(13);
    const auto dir = std::filesystem::temp_directory_path() / "idleak_model_io";
    std::filesystem::create_directories(dir);
    save_model(dir / "m.flgm", net, {{"note", "test"}});
    auto loaded = load_model(dir / "m.flgm");
    CHECK(loaded.extra.at("note") == "test");
    CHECK(loaded.net.params.values() == net.params.values());  // bitwise

    const auto x = random_input(net.input_size(), 14);
    Sequential::Tape t1, t2;
    const double* y1 = net.forward(x.data(), t1);
    const double* y2 = loaded.net.forward(x.data(), t2);
    for (int i = 0; i < net.output_size(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("l2 normalization rejects zero vectors and yields unit output") {
    std::vector<double> v{0.0, 0.0};
    CHECK_THROWS_AS(l2_normalize(v.data(), 2), Error);
    std::vector<double> u{3.0, 4.0};
    l2_normalize(u.data(), 2);
    CHECK(u[0] == doctest::Approx(0.6));
    CHECK(u[1] == doctest::Approx(0.8));
}
