#include "stitchrl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace stitchrl {

void MlpSpec::validate() const {
  if (widths.size() < 2) throw ConfigError("MlpSpec.widths: need at least 2 layers");
  for (int wdt : widths)
    if (wdt < 1) throw ConfigError("MlpSpec.widths: every width must be >= 1");
}

Mlp make_mlp(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Mlp net;
  net.spec = spec;
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    const int fan_in = spec.widths[l];
    const int fan_out = spec.widths[l + 1];
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor2 w(fan_out, fan_in);
    for (double& x : w.v) x = rng.uniform(-bound, bound);
    net.w.push_back(std::move(w));
    net.b.emplace_back(fan_out, 0.0);
  }
  return net;
}

void ensure_finite(const std::vector<double>& v, const std::string& context) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError("non-finite value in " + context);
}

namespace {

// y = x * W^T + b, x: (n x in), W: (out x in), y: (n x out)
Tensor2 linear(const Tensor2& x, const Tensor2& w, const std::vector<double>& b) {
  Tensor2 y(x.rows, w.rows);
  for (int i = 0; i < x.rows; ++i) {
    const double* xi = x.row(i);
    double* yi = y.row(i);
    for (int o = 0; o < w.rows; ++o) {
      const double* wo = w.row(o);
      double acc = b[o];
      for (int k = 0; k < w.cols; ++k) acc += xi[k] * wo[k];
      yi[o] = acc;
    }
  }
  return y;
}

void apply_activation(Tensor2& t, Activation act) {
  if (act == Activation::ReLU) {
    for (double& x : t.v) x = x > 0.0 ? x : 0.0;
  } else {
    for (double& x : t.v) x = std::tanh(x);
  }
}

}  // namespace

Tensor2 forward(const Mlp& net, const Tensor2& batch, ForwardTrace& trace) {
  if (batch.cols != net.spec.input_width())
    throw UsageError("forward: batch has " + std::to_string(batch.cols) +
                     " columns, net expects " + std::to_string(net.spec.input_width()));
  trace.acts.clear();
  trace.acts.push_back(batch);
  Tensor2 cur = batch;
  for (int l = 0; l < net.n_layers(); ++l) {
    cur = linear(cur, net.w[l], net.b[l]);
    if (l + 1 < net.n_layers()) apply_activation(cur, net.spec.act);
    trace.acts.push_back(cur);
  }
  ensure_finite(cur.v, "forward output");
  return cur;
}

Tensor2 forward(const Mlp& net, const Tensor2& batch) {
  ForwardTrace trace;
  return forward(net, batch, trace);
}

MlpGrads zero_grads(const Mlp& net) {
  MlpGrads g;
  for (int l = 0; l < net.n_layers(); ++l) {
    g.w.emplace_back(net.w[l].rows, net.w[l].cols);
    g.b.emplace_back(net.b[l].size(), 0.0);
  }
  return g;
}

void accumulate(MlpGrads& into, const MlpGrads& from) {
  for (std::size_t l = 0; l < into.w.size(); ++l) {
    for (std::size_t i = 0; i < into.w[l].v.size(); ++i) into.w[l].v[i] += from.w[l].v[i];
    for (std::size_t i = 0; i < into.b[l].size(); ++i) into.b[l][i] += from.b[l][i];
  }
}

MlpGrads backward(const Mlp& net, const ForwardTrace& trace, const Tensor2& dout,
                  Tensor2* dinput) {
  const int L = net.n_layers();
  if (static_cast<int>(trace.acts.size()) != L + 1)
    throw UsageError("backward: trace does not match net depth");
  if (dout.rows != trace.acts.back().rows || dout.cols != trace.acts.back().cols)
    throw UsageError("backward: upstream gradient shape mismatch");

  MlpGrads grads = zero_grads(net);
  Tensor2 delta = dout;  // dloss/d(post-activation of current layer)
  for (int l = L - 1; l >= 0; --l) {
    // Undo the activation (output layer is linear).
    if (l + 1 < L) {
      const Tensor2& a = trace.acts[l + 1];
      if (net.spec.act == Activation::ReLU) {
        for (std::size_t i = 0; i < delta.v.size(); ++i)
          if (a.v[i] <= 0.0) delta.v[i] = 0.0;
      } else {
        for (std::size_t i = 0; i < delta.v.size(); ++i)
          delta.v[i] *= 1.0 - a.v[i] * a.v[i];
      }
    }
    const Tensor2& x = trace.acts[l];  // input to layer l
    Tensor2& dw = grads.w[l];
    std::vector<double>& db = grads.b[l];
    for (int i = 0; i < x.rows; ++i) {
      const double* xi = x.row(i);
      const double* di = delta.row(i);
      for (int o = 0; o < dw.rows; ++o) {
        const double d = di[o];
        if (d == 0.0) continue;
        double* dwo = dw.row(o);
        for (int k = 0; k < dw.cols; ++k) dwo[k] += d * xi[k];
        db[o] += d;
      }
    }
    if (l > 0 || dinput != nullptr) {
      Tensor2 dprev(x.rows, x.cols);
      for (int i = 0; i < x.rows; ++i) {
        const double* di = delta.row(i);
        double* dp = dprev.row(i);
        for (int o = 0; o < net.w[l].rows; ++o) {
          const double d = di[o];
          if (d == 0.0) continue;
          const double* wo = net.w[l].row(o);
          for (int k = 0; k < net.w[l].cols; ++k) dp[k] += d * wo[k];
        }
      }
      if (l == 0 && dinput != nullptr) *dinput = std::move(dprev);
      else delta = std::move(dprev);
    }
  }
  return grads;
}

AdamState make_adam(const Mlp& net, double lr) {
  AdamState s;
  s.lr = lr;
  for (int l = 0; l < net.n_layers(); ++l) {
    s.mw.emplace_back(net.w[l].rows, net.w[l].cols);
    s.vw.emplace_back(net.w[l].rows, net.w[l].cols);
    s.mb.emplace_back(net.b[l].size(), 0.0);
    s.vb.emplace_back(net.b[l].size(), 0.0);
  }
  return s;
}

namespace {

void adam_update(std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                 std::vector<double>& v, const AdamState& s, double bc1, double bc2,
                 const std::string& block) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!std::isfinite(g[i])) throw NumericError("non-finite gradient in " + block);
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

}  // namespace

void adam_step(Mlp& net, const MlpGrads& grads, AdamState& state) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (int l = 0; l < net.n_layers(); ++l) {
    adam_update(net.w[l].v, grads.w[l].v, state.mw[l].v, state.vw[l].v, state, bc1, bc2,
                "layer " + std::to_string(l) + " weights");
    adam_update(net.b[l], grads.b[l], state.mb[l], state.vb[l], state, bc1, bc2,
                "layer " + std::to_string(l) + " biases");
  }
}

std::vector<double> softmax(const double* z, int n) {
  double mx = z[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, z[i]);
  std::vector<double> p(n);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(z[i] - mx);
    total += p[i];
  }
  for (double& x : p) x /= total;
  return p;
}

void softmax_sq_error_grad(const std::vector<double>& probs, int target, double scale,
                           double* dz) {
  const int n = static_cast<int>(probs.size());
  double inner = 0.0;
  std::vector<double> e(n);
  for (int j = 0; j < n; ++j) {
    const double y = j == target ? 1.0 : 0.0;
    e[j] = 2.0 * (probs[j] - y);
    inner += e[j] * probs[j];
  }
  for (int m = 0; m < n; ++m) dz[m] = scale * probs[m] * (e[m] - inner);
}

double softmax_sq_error(const std::vector<double>& probs, int target) {
  double loss = 0.0;
  for (int j = 0; j < static_cast<int>(probs.size()); ++j) {
    const double y = j == target ? 1.0 : 0.0;
    loss += (probs[j] - y) * (probs[j] - y);
  }
  return loss;
}

void save_mlp(const std::string& path, const Mlp& net, std::uint64_t seed) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = "mlp";
  j["widths"] = net.spec.widths;
  j["activation"] = net.spec.act == Activation::ReLU ? "relu" : "tanh";
  j["seed"] = seed;
  j["w"] = nlohmann::json::array();
  j["b"] = nlohmann::json::array();
  for (int l = 0; l < net.n_layers(); ++l) {
    j["w"].push_back(net.w[l].v);
    j["b"].push_back(net.b[l]);
  }
  std::ofstream out(path);
  if (!out) throw UsageError("save_mlp: cannot open " + path);
  out << j.dump() << "\n";
}

Mlp load_mlp(const std::string& path, std::uint64_t* seed_out) {
  std::ifstream in(path);
  if (!in) throw UsageError("load_mlp: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_mlp: " + path + ": " + e.what());
  }
  if (j.value("format_version", -1) != 1)
    throw ParseError("load_mlp: " + path + ": unsupported format_version");
  MlpSpec spec;
  spec.widths = j.at("widths").get<std::vector<int>>();
  spec.act = j.at("activation").get<std::string>() == "relu" ? Activation::ReLU : Activation::Tanh;
  Mlp net = make_mlp(spec, 0);
  const auto& jw = j.at("w");
  const auto& jb = j.at("b");
  for (int l = 0; l < net.n_layers(); ++l) {
    auto wv = jw.at(l).get<std::vector<double>>();
    auto bv = jb.at(l).get<std::vector<double>>();
    if (wv.size() != net.w[l].v.size() || bv.size() != net.b[l].size())
      throw ParseError("load_mlp: " + path + ": parameter block size mismatch at layer " +
                       std::to_string(l));
    net.w[l].v = std::move(wv);
    net.b[l] = std::move(bv);
  }
  if (seed_out != nullptr) *seed_out = j.value("seed", 0ULL);
  return net;
}

}  // namespace stitchrl
