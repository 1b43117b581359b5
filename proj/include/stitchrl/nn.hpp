#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stitchrl/errors.hpp"
#include "stitchrl/rng.hpp"

namespace stitchrl {

// Dense row-major matrix. The only tensor shape the learned components need.
struct Tensor2 {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Tensor2() = default;
  Tensor2(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }
  double* row(int i) { return v.data() + static_cast<std::size_t>(i) * cols; }
  const double* row(int i) const { return v.data() + static_cast<std::size_t>(i) * cols; }
};

enum class Activation { ReLU, Tanh };

// Layer widths input -> hidden... -> output; hidden layers use `act`,
// the output layer is linear.
struct MlpSpec {
  std::vector<int> widths;
  Activation act = Activation::ReLU;

  void validate() const;
  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }
};

struct Mlp {
  MlpSpec spec;
  std::vector<Tensor2> w;               // w[l]: widths[l+1] x widths[l]
  std::vector<std::vector<double>> b;   // b[l]: widths[l+1]

  int n_layers() const { return static_cast<int>(w.size()); }
};

// Uniform +-sqrt(6/(fan_in+fan_out)) init, seeded.
Mlp make_mlp(const MlpSpec& spec, std::uint64_t seed);

// Activations kept per layer so backward() can replay the pass.
struct ForwardTrace {
  std::vector<Tensor2> acts;  // acts[0] = input, acts[l+1] = output of layer l
};

Tensor2 forward(const Mlp& net, const Tensor2& batch);
Tensor2 forward(const Mlp& net, const Tensor2& batch, ForwardTrace& trace);

struct MlpGrads {
  std::vector<Tensor2> w;
  std::vector<std::vector<double>> b;
};

MlpGrads zero_grads(const Mlp& net);
void accumulate(MlpGrads& into, const MlpGrads& from);

// Gradients of a scalar loss w.r.t. every parameter, given dloss/doutput.
// Returns the parameter gradients; if dinput != nullptr also fills
// dloss/dinput (needed nowhere downstream today but cheap to expose).
MlpGrads backward(const Mlp& net, const ForwardTrace& trace, const Tensor2& dout,
                  Tensor2* dinput = nullptr);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor2> mw, vw;
  std::vector<std::vector<double>> mb, vb;
};

AdamState make_adam(const Mlp& net, double lr);

// Bias-corrected Adam update. Throws NumericError on non-finite gradients,
// naming the parameter block.
void adam_step(Mlp& net, const MlpGrads& grads, AdamState& state);

// Checkpoint I/O: versioned JSON, exact double round-trip.
void save_mlp(const std::string& path, const Mlp& net, std::uint64_t seed);
Mlp load_mlp(const std::string& path, std::uint64_t* seed_out = nullptr);

void ensure_finite(const std::vector<double>& v, const std::string& context);

// Max-subtracted softmax over n contiguous values.
std::vector<double> softmax(const double* z, int n);

// dL/dlogits for L = scale * sum_j (softmax(z)_j - onehot(target)_j)^2,
// written into dz. The squared-error-on-probabilities convention is shared
// by the inverse dynamics model and the behavior cloning policy.
void softmax_sq_error_grad(const std::vector<double>& probs, int target, double scale,
                           double* dz);

double softmax_sq_error(const std::vector<double>& probs, int target);

}  // namespace stitchrl
