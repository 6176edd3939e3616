#pragma once

// GDN/IGDN, PReLU and the GDN-activated residual block, plus the named
// parameter store shared by all network modules.

#include <map>
#include <random>

#include "gcm/autodiff.hpp"

namespace gcm {

// Deterministic RNG. Uniform/normal draws are produced from raw engine
// output so results do not depend on the standard library's distribution
// implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t raw() { return eng_(); }

  // Uniform in [0,1).
  double uniform() { return (double)(eng_() >> 11) * 0x1.0p-53; }

  // Uniform in [-0.5, 0.5).
  double centered() { return uniform() - 0.5; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  size_t index(size_t n) { return (size_t)(eng_() % n); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0;
};

class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    auto [it, inserted] = params_.emplace(name, std::move(t));
    if (!inserted) throw std::runtime_error("duplicate parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& operator[](const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("unknown parameter " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("unknown parameter " + name);
    return it->second;
  }
  std::map<std::string, Tensor>& all() { return params_; }
  const std::map<std::string, Tensor>& all() const { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

// Binds a graph to a store so forward code can fetch parameters tersely.
struct Ctx {
  Graph& g;
  ParamStore& ps;
  Var p(const std::string& name) { return g.param(name, ps[name]); }
};

// ---- parameter init ------------------------------------------------------

inline void init_conv(ParamStore& ps, const std::string& name,
                      std::vector<size_t> shape, Rng& rng) {
  // fan-in scaled normal init
  size_t fan_in = 1;
  for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  double s = std::sqrt(1.0 / (double)fan_in);
  Tensor t(shape);
  for (size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * s;
  ps.add(name, std::move(t));
}

inline void init_bias(ParamStore& ps, const std::string& name, size_t C,
                      double v = 0.0) {
  ps.add(name, Tensor({C}, v));
}

constexpr double kGdnBetaMin = 1e-6;

// beta = 1, gamma = 0.1 * I: near-identity start.
inline void init_gdn(ParamStore& ps, const std::string& prefix, size_t C) {
  ps.add(prefix + ".beta", Tensor({C}, 1.0));
  Tensor gamma({C, C});
  for (size_t i = 0; i < C; ++i) gamma[i * C + i] = 0.1;
  ps.add(prefix + ".gamma", std::move(gamma));
}

inline void init_prelu(ParamStore& ps, const std::string& name, size_t C) {
  ps.add(name, Tensor({C}, 0.2));
}

// Clamp GDN parameters back into their feasible set. Called after every
// optimizer step.
inline void reproject_gdn(ParamStore& ps) {
  for (auto& [name, t] : ps.all()) {
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".beta") == 0) {
      for (size_t i = 0; i < t.size(); ++i)
        if (t[i] < kGdnBetaMin) t[i] = kGdnBetaMin;
    } else if (name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0) {
      for (size_t i = 0; i < t.size(); ++i)
        if (t[i] < 0.0) t[i] = 0.0;
    }
  }
}

// ---- layer forward passes ------------------------------------------------

// y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2), x: [C,H,W].
inline Var gdn(Var x, Var beta, Var gamma) {
  Graph* g = x.g;
  size_t C = g->val(x).dim(0);
  if (g->val(beta).size() != C || g->val(gamma).size() != C * C)
    throw ShapeError("gdn: channel count mismatch: x " + shape_str(g->val(x).shape()) +
                     " beta " + shape_str(g->val(beta).shape()) + " gamma " +
                     shape_str(g->val(gamma).shape()));
  Var x2 = mul(x, x);
  Var s = conv2d(x2, reshape(gamma, {C, C, 1, 1}), 1);
  s = bias_add(s, beta);
  return div(x, sqrt_op(s));
}

// Approximate inverse: x_i = y_i * sqrt(beta_i + sum_j gamma_ij y_j^2).
inline Var igdn(Var y, Var beta, Var gamma) {
  Graph* g = y.g;
  size_t C = g->val(y).dim(0);
  if (g->val(beta).size() != C || g->val(gamma).size() != C * C)
    throw ShapeError("igdn: channel count mismatch: y " + shape_str(g->val(y).shape()) +
                     " beta " + shape_str(g->val(beta).shape()) + " gamma " +
                     shape_str(g->val(gamma).shape()));
  Var y2 = mul(y, y);
  Var s = conv2d(y2, reshape(gamma, {C, C, 1, 1}), 1);
  s = bias_add(s, beta);
  return mul(y, sqrt_op(s));
}

inline Var gdn(Ctx& c, const std::string& prefix, Var x) {
  return gdn(x, c.p(prefix + ".beta"), c.p(prefix + ".gamma"));
}
inline Var igdn(Ctx& c, const std::string& prefix, Var x) {
  return igdn(x, c.p(prefix + ".beta"), c.p(prefix + ".gamma"));
}

inline void init_resblock(ParamStore& ps, const std::string& prefix, size_t C,
                          Rng& rng) {
  init_gdn(ps, prefix + ".gdn1", C);
  init_conv(ps, prefix + ".k1", {C, C, 3, 3}, rng);
  init_gdn(ps, prefix + ".gdn2", C);
  init_conv(ps, prefix + ".k2", {C, C, 3, 3}, rng);
}

// x + conv(gdn(conv(gdn(x)))), stride-1 3x3 convs with "same" padding.
inline Var resblock_gdn(Ctx& c, const std::string& prefix, Var x) {
  Var t = gdn(c, prefix + ".gdn1", x);
  t = conv2d(t, c.p(prefix + ".k1"), 1, PadSpec(1));
  t = gdn(c, prefix + ".gdn2", t);
  t = conv2d(t, c.p(prefix + ".k2"), 1, PadSpec(1));
  return add(x, t);
}

// Same depth without normalization or skip, for convergence comparisons.
inline Var plainblock_relu(Ctx& c, const std::string& prefix, Var x) {
  Graph* g = x.g;
  size_t C = g->val(x).dim(0);
  Var zero = g->input(Tensor({C}, 0.0));
  Var t = prelu(x, zero);  // alpha 0 == plain ReLU
  t = conv2d(t, c.p(prefix + ".k1"), 1, PadSpec(1));
  Var zero2 = g->input(Tensor({C}, 0.0));
  t = prelu(t, zero2);
  t = conv2d(t, c.p(prefix + ".k2"), 1, PadSpec(1));
  return t;
}

}  // namespace gcm
