#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "stitchrl/nn.hpp"
#include "stitchrl/rng.hpp"

using namespace stitchrl;

namespace {

// Scalar probe loss: L = sum_ij c_ij * out_ij, so dL/dout = c.
double probe_loss(const Mlp& net, const Tensor2& x, const Tensor2& c) {
  const Tensor2 out = forward(net, x);
  double loss = 0.0;
  for (std::size_t i = 0; i < out.v.size(); ++i) loss += c.v[i] * out.v[i];
  return loss;
}

struct ParamRef {
  int layer;
  bool is_bias;
  int index;
};

double& param_at(Mlp& net, const ParamRef& p) {
  return p.is_bias ? net.b[p.layer][p.index] : net.w[p.layer].v[p.index];
}

double grad_at(const MlpGrads& g, const ParamRef& p) {
  return p.is_bias ? g.b[p.layer][p.index] : g.w[p.layer].v[p.index];
}

// Central finite differences against backward() on 64 random parameters.
void gradient_check(const MlpSpec& spec, std::uint64_t seed) {
  Mlp net = make_mlp(spec, seed);
  Rng rng(seed ^ 0xfeed);
  const int batch = 4;
  Tensor2 x(batch, spec.input_width());
  for (double& v : x.v) v = rng.normal();
  Tensor2 c(batch, spec.output_width());
  for (double& v : c.v) v = rng.normal();

  ForwardTrace trace;
  forward(net, x, trace);
  const MlpGrads grads = backward(net, trace, c);

  const double h = 1e-5;
  for (int probe = 0; probe < 64; ++probe) {
    const int layer = static_cast<int>(rng.uniform_int(net.n_layers()));
    const bool is_bias = rng.uniform() < 0.2;
    const int index = static_cast<int>(rng.uniform_int(
        is_bias ? net.b[layer].size() : net.w[layer].v.size()));
    const ParamRef p{layer, is_bias, index};

    const double orig = param_at(net, p);
    param_at(net, p) = orig + h;
    const double lp = probe_loss(net, x, c);
    param_at(net, p) = orig - h;
    const double lm = probe_loss(net, x, c);
    param_at(net, p) = orig;

    const double fd = (lp - lm) / (2.0 * h);
    const double an = grad_at(grads, p);
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
    CAPTURE(layer);
    CAPTURE(index);
    CHECK(rel < 1e-4);
  }
}

}  // namespace

TEST_CASE("forward: zero-weight network gives zero output") {
  Mlp net = make_mlp({{3, 8, 2}, Activation::ReLU}, 1);
  for (auto& w : net.w) std::fill(w.v.begin(), w.v.end(), 0.0);
  for (auto& b : net.b) std::fill(b.begin(), b.end(), 0.0);
  Tensor2 x(2, 3);
  x.v = {1, 2, 3, -1, -2, -3};
  const Tensor2 y = forward(net, x);
  for (double v : y.v) CHECK(v == 0.0);
}

TEST_CASE("forward: 1->1 linear net computes wx + b") {
  Mlp net = make_mlp({{1, 1}, Activation::ReLU}, 1);
  net.w[0].v = {2.5};
  net.b[0] = {-0.75};
  Tensor2 x(1, 1);
  x.v = {3.0};
  CHECK(forward(net, x).at(0, 0) == doctest::Approx(2.5 * 3.0 - 0.75).epsilon(1e-15));
}

TEST_CASE("forward: identical rows give identical outputs") {
  Mlp net = make_mlp({{4, 16, 3}, Activation::Tanh}, 7);
  Rng rng(3);
  Tensor2 x(2, 4);
  for (int k = 0; k < 4; ++k) {
    x.at(0, k) = rng.normal();
    x.at(1, k) = x.at(0, k);
  }
  const Tensor2 y = forward(net, x);
  for (int k = 0; k < 3; ++k) CHECK(y.at(0, k) == y.at(1, k));
}

TEST_CASE("forward: shape mismatch is a usage error") {
  Mlp net = make_mlp({{4, 2}, Activation::ReLU}, 1);
  Tensor2 x(1, 3);
  CHECK_THROWS_AS(forward(net, x), UsageError);
}

TEST_CASE("backward: linear net hand derivative") {
  // loss = output; d/dw = x, d/db = 1
  Mlp net = make_mlp({{1, 1}, Activation::ReLU}, 1);
  net.w[0].v = {0.3};
  net.b[0] = {0.1};
  Tensor2 x(1, 1);
  x.v = {1.7};
  ForwardTrace trace;
  forward(net, x, trace);
  Tensor2 dout(1, 1);
  dout.v = {1.0};
  const MlpGrads g = backward(net, trace, dout);
  CHECK(g.w[0].v[0] == doctest::Approx(1.7).epsilon(1e-15));
  CHECK(g.b[0][0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("backward: zero upstream gradient gives zero parameter gradients") {
  Mlp net = make_mlp({{3, 8, 2}, Activation::Tanh}, 11);
  Tensor2 x(2, 3);
  Rng rng(5);
  for (double& v : x.v) v = rng.normal();
  ForwardTrace trace;
  forward(net, x, trace);
  Tensor2 dout(2, 2);  // zeros
  const MlpGrads g = backward(net, trace, dout);
  for (const auto& w : g.w)
    for (double v : w.v) CHECK(v == 0.0);
  for (const auto& b : g.b)
    for (double v : b) CHECK(v == 0.0);
}

TEST_CASE("backward: finite differences across all downstream architectures") {
  // Every learned component's shape family: bridge net (tanh, two heads),
  // inverse dynamics, reward model, Q net / BC policy.
  gradient_check({{25, 64, 64, 16}, Activation::Tanh}, 21);   // bridge (dim 8)
  gradient_check({{16, 64, 64, 16}, Activation::ReLU}, 22);   // inverse dynamics
  gradient_check({{24, 64, 64, 1}, Activation::ReLU}, 23);    // reward model
  gradient_check({{8, 64, 64, 16}, Activation::ReLU}, 24);    // Q net / BC policy
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Mlp net = make_mlp({{2, 4, 1}, Activation::ReLU}, 2);
  const Mlp before = net;
  AdamState opt = make_adam(net, 1e-3);
  adam_step(net, zero_grads(net), opt);
  for (int l = 0; l < net.n_layers(); ++l) {
    CHECK(net.w[l].v == before.w[l].v);
    CHECK(net.b[l] == before.b[l]);
  }
  CHECK(opt.step == 1);
}

TEST_CASE("adam: constant gradient moves parameters against its sign") {
  Mlp net = make_mlp({{1, 1}, Activation::ReLU}, 3);
  const double w0 = net.w[0].v[0];
  AdamState opt = make_adam(net, 1e-2);
  MlpGrads g = zero_grads(net);
  g.w[0].v[0] = 0.5;
  for (int i = 0; i < 50; ++i) adam_step(net, g, opt);
  CHECK(net.w[0].v[0] < w0);
}

TEST_CASE("adam: first bias-corrected step equals -lr*g/(|g|+eps)") {
  Mlp net = make_mlp({{1, 1}, Activation::ReLU}, 4);
  const double w0 = net.w[0].v[0];
  AdamState opt = make_adam(net, 3e-3);
  MlpGrads g = zero_grads(net);
  g.w[0].v[0] = -1.25;
  adam_step(net, g, opt);
  const double expected = w0 - 3e-3 * (-1.25) / (std::abs(-1.25) + opt.eps);
  CHECK(net.w[0].v[0] == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("adam: non-finite gradient raises a numeric error naming the block") {
  Mlp net = make_mlp({{1, 1}, Activation::ReLU}, 5);
  AdamState opt = make_adam(net, 1e-3);
  MlpGrads g = zero_grads(net);
  g.w[0].v[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(adam_step(net, g, opt), "non-finite gradient in layer 0 weights",
                       NumericError);
}

TEST_CASE("checkpoint round-trip is exact") {
  Mlp net = make_mlp({{3, 5, 2}, Activation::Tanh}, 99);
  const std::string path = "/tmp/stitchrl_test_ckpt.json";
  save_mlp(path, net, 99);
  std::uint64_t seed = 0;
  const Mlp back = load_mlp(path, &seed);
  CHECK(seed == 99);
  CHECK(back.spec.widths == net.spec.widths);
  CHECK(back.spec.act == net.spec.act);
  for (int l = 0; l < net.n_layers(); ++l) {
    CHECK(back.w[l].v == net.w[l].v);
    CHECK(back.b[l] == net.b[l]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("training loop determinism: identical seeds, identical parameters") {
  auto run = [] {
    Mlp net = make_mlp({{2, 8, 1}, Activation::Tanh}, 42);
    AdamState opt = make_adam(net, 1e-3);
    Rng rng(7);
    for (int step = 0; step < 200; ++step) {
      Tensor2 x(8, 2);
      for (double& v : x.v) v = rng.normal();
      ForwardTrace trace;
      const Tensor2 out = forward(net, x, trace);
      Tensor2 dout(8, 1);
      for (int i = 0; i < 8; ++i) dout.at(i, 0) = 2.0 * (out.at(i, 0) - 1.0) / 8.0;
      adam_step(net, backward(net, trace, dout), opt);
    }
    return net;
  };
  const Mlp a = run();
  const Mlp b = run();
  for (int l = 0; l < a.n_layers(); ++l) {
    CHECK(a.w[l].v == b.w[l].v);
    CHECK(a.b[l] == b.b[l]);
  }
}

TEST_CASE("rng: deterministic streams and categorical sampling") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(1);
  long counts[4] = {0, 0, 0, 0};
  const std::vector<double> probs = {0.1, 0.2, 0.3, 0.4};
  for (int i = 0; i < 100000; ++i) ++counts[c.categorical(probs)];
  for (int k = 0; k < 4; ++k) {
    const double p = probs[k];
    const double sigma = std::sqrt(p * (1 - p) * 100000.0);
    CHECK(std::abs(counts[k] - 100000.0 * p) < 4.0 * sigma);
  }
}
