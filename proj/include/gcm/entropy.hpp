#pragma once

// Probability and rate computation: per-channel factorized density for the
// hyper latent, conditional Gaussian for the main latent, and the two
// quantization paths (uniform noise for training, rounding for inference).

#include <array>

#include "gcm/layers.hpp"

namespace gcm {

constexpr double kSigmaMin = 0.01;
constexpr double kTailFloor = 1e-9;
constexpr double kLog2e = 1.4426950408889634;  // 1/ln 2

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double gaussian_prob(double v, double mu, double sigma) {
  if (sigma < kSigmaMin) sigma = kSigmaMin;
  double p = normal_cdf((v + 0.5 - mu) / sigma) - normal_cdf((v - 0.5 - mu) / sigma);
  return p < kTailFloor ? kTailFloor : p;
}

// ---- factorized density --------------------------------------------------
// Per-channel monotone CDF: four affine stages with softplus-positive
// weights, the first three followed by x + tanh(a) .* tanh(x). Hidden width
// 3; the map is strictly increasing onto (0,1) by construction.

constexpr size_t kFacHidden = 3;
constexpr size_t kFacStages = 4;

inline void init_factorized(ParamStore& ps, const std::string& prefix, size_t C) {
  // With zero biases and zero gates, the composed map is v * 27 * prod(h).
  // Start near CDF(v) = sigmoid(v/4) so +/-30 keeps strictly positive mass.
  double target = 0.25 / 27.0;
  double h = std::pow(target, 1.0 / 4.0);
  double raw = std::log(std::expm1(h));  // softplus inverse
  auto dims_in = std::array<size_t, 4>{1, kFacHidden, kFacHidden, kFacHidden};
  auto dims_out = std::array<size_t, 4>{kFacHidden, kFacHidden, kFacHidden, 1};
  for (size_t j = 0; j < kFacStages; ++j) {
    std::string sj = std::to_string(j + 1);
    ps.add(prefix + ".H" + sj, Tensor({C, dims_out[j], dims_in[j]}, raw));
    ps.add(prefix + ".b" + sj, Tensor({C, dims_out[j]}, 0.0));
    if (j + 1 < kFacStages) ps.add(prefix + ".a" + sj, Tensor({C, dims_out[j]}, 0.0));
  }
}

namespace detail {

struct FacTrace {
  // per stage: pre-gate affine output u and gated output v (v==u last stage)
  std::array<std::array<double, kFacHidden>, kFacStages> u{};
  std::array<std::array<double, kFacHidden>, kFacStages> v{};
  double out = 0;  // sigmoid(u4)
};

// Raw parameter views for one channel.
struct FacChan {
  const double* H[kFacStages];
  const double* b[kFacStages];
  const double* a[kFacStages - 1];
  size_t din[kFacStages], dout[kFacStages];
};

inline FacChan fac_channel(const ParamStore& ps, const std::string& prefix,
                           size_t c) {
  FacChan f{};
  size_t dims_in[4] = {1, kFacHidden, kFacHidden, kFacHidden};
  size_t dims_out[4] = {kFacHidden, kFacHidden, kFacHidden, 1};
  for (size_t j = 0; j < kFacStages; ++j) {
    std::string sj = std::to_string(j + 1);
    f.din[j] = dims_in[j];
    f.dout[j] = dims_out[j];
    f.H[j] = ps.at(prefix + ".H" + sj).data() + c * dims_out[j] * dims_in[j];
    f.b[j] = ps.at(prefix + ".b" + sj).data() + c * dims_out[j];
    if (j + 1 < kFacStages)
      f.a[j] = ps.at(prefix + ".a" + sj).data() + c * dims_out[j];
  }
  return f;
}

inline double fac_forward(const FacChan& f, double t, FacTrace* tr = nullptr) {
  std::array<double, kFacHidden> cur{};
  cur[0] = t;
  size_t ncur = 1;
  for (size_t j = 0; j < kFacStages; ++j) {
    std::array<double, kFacHidden> next{};
    for (size_t o = 0; o < f.dout[j]; ++o) {
      double s = f.b[j][o];
      for (size_t i = 0; i < f.din[j]; ++i) {
        double h = f.H[j][o * f.din[j] + i];
        double w = h > 30 ? h : std::log1p(std::exp(h));  // softplus
        s += w * cur[i];
      }
      next[o] = s;
      if (tr) tr->u[j][o] = s;
    }
    if (j + 1 < kFacStages) {
      for (size_t o = 0; o < f.dout[j]; ++o) {
        double gate = std::tanh(f.a[j][o]);
        next[o] = next[o] + gate * std::tanh(next[o]);
        if (tr) tr->v[j][o] = next[o];
      }
    } else if (tr) {
      tr->v[j] = next;
    }
    cur = next;
    ncur = f.dout[j];
  }
  (void)ncur;
  double out = 1.0 / (1.0 + std::exp(-cur[0]));
  if (tr) tr->out = out;
  return out;
}

// Backprop d(out)/d(t, params) for one evaluation; accumulates grad * gout
// into the per-channel gradient views. Returns d(out)/dt * gout.
struct FacGrads {
  double* H[kFacStages];
  double* b[kFacStages];
  double* a[kFacStages - 1];
};

inline double fac_backward(const FacChan& f, double t, double gout, FacGrads* gr) {
  FacTrace tr;
  fac_forward(f, t, &tr);
  // inputs to each stage
  std::array<double, kFacHidden> stage_in[kFacStages];
  stage_in[0] = {t, 0, 0};
  for (size_t j = 1; j < kFacStages; ++j) stage_in[j] = tr.v[j - 1];

  std::array<double, kFacHidden> d{};
  d[0] = gout * tr.out * (1.0 - tr.out);  // through final sigmoid
  for (size_t j = kFacStages; j-- > 0;) {
    std::array<double, kFacHidden> du{};
    if (j + 1 < kFacStages) {
      for (size_t o = 0; o < f.dout[j]; ++o) {
        double gate = std::tanh(f.a[j][o]);
        double th = std::tanh(tr.u[j][o]);
        du[o] = d[o] * (1.0 + gate * (1.0 - th * th));
        if (gr) gr->a[j][o] += d[o] * th * (1.0 - gate * gate);
      }
    } else {
      du = d;
    }
    std::array<double, kFacHidden> dprev{};
    for (size_t o = 0; o < f.dout[j]; ++o) {
      if (gr) gr->b[j][o] += du[o];
      for (size_t i = 0; i < f.din[j]; ++i) {
        double h = f.H[j][o * f.din[j] + i];
        double w = h > 30 ? h : std::log1p(std::exp(h));
        double dw = 1.0 / (1.0 + std::exp(-h));  // softplus'
        if (gr) gr->H[j][o * f.din[j] + i] += du[o] * stage_in[j][i] * dw;
        dprev[i] += du[o] * w;
      }
    }
    d = dprev;
  }
  return d[0];
}

}  // namespace detail

// CDF of channel c evaluated at t (no tape).
inline double factorized_cdf(const ParamStore& ps, const std::string& prefix,
                             size_t c, double t) {
  return detail::fac_forward(detail::fac_channel(ps, prefix, c), t);
}

// P(value = v) = CDF(v+0.5) - CDF(v-0.5), floored.
inline double factorized_prob(const ParamStore& ps, const std::string& prefix,
                              size_t c, double v) {
  double p = factorized_cdf(ps, prefix, c, v + 0.5) -
             factorized_cdf(ps, prefix, c, v - 0.5);
  return p < kTailFloor ? kTailFloor : p;
}

// Tape node: per-element likelihood of z under the factorized model, with
// gradients to z and to every prior parameter. z: [C,H,W].
inline Var likelihood_z(Ctx& c, const std::string& prefix, Var z) {
  Graph& g = c.g;
  if (g.val(z).rank() != 3) throw ShapeError("likelihood_z: z must be [C,H,W]");
  size_t C = g.val(z).dim(0);
  size_t inner = g.val(z).size() / C;

  // register parameter leaves so the trainer sees their gradients
  // (adding nodes may reallocate the tape; re-fetch values afterwards)
  std::vector<std::pair<std::string, Var>> pvars;
  for (size_t j = 1; j <= kFacStages; ++j) {
    std::string sj = std::to_string(j);
    pvars.emplace_back(prefix + ".H" + sj, c.p(prefix + ".H" + sj));
    pvars.emplace_back(prefix + ".b" + sj, c.p(prefix + ".b" + sj));
    if (j < kFacStages) pvars.emplace_back(prefix + ".a" + sj, c.p(prefix + ".a" + sj));
  }

  ParamStore& ps = c.ps;
  Tensor tz = g.val(z);  // copy: add_node below invalidates references
  Tensor out(tz.shape());
  std::vector<uint8_t> floored(tz.size(), 0);
  for (size_t ch = 0; ch < C; ++ch) {
    auto fc = detail::fac_channel(ps, prefix, ch);
    for (size_t i = 0; i < inner; ++i) {
      double v = tz[ch * inner + i];
      double p = detail::fac_forward(fc, v + 0.5) - detail::fac_forward(fc, v - 0.5);
      if (p < kTailFloor) {
        p = kTailFloor;
        floored[ch * inner + i] = 1;
      }
      out[ch * inner + i] = p;
    }
  }
  Var res = g.add_node(std::move(out));
  Graph* gp = &g;
  std::string pfx = prefix;
  g.set_back(res, [gp, z, res, pvars, pfx, C, inner, floored]() {
    const Tensor& go = gp->grad(res);
    const Tensor& tz = gp->val(z);
    Tensor& gz = gp->grad(z);
    // channel-sliced gradient views into the param grad tensors
    auto gslice = [&](const std::string& name, size_t ch, size_t per) -> double* {
      for (auto& [n, v] : pvars)
        if (n == name) return gp->grad(v).data() + ch * per;
      return nullptr;
    };
    // rebuild the channel param views from the recorded leaf values
    ParamStore tmp;
    for (auto& [n, v] : pvars) tmp.add(n, gp->val(v));
    for (size_t ch = 0; ch < C; ++ch) {
      auto fc = detail::fac_channel(tmp, pfx, ch);
      detail::FacGrads gr{};
      size_t dims_in[4] = {1, kFacHidden, kFacHidden, kFacHidden};
      size_t dims_out[4] = {kFacHidden, kFacHidden, kFacHidden, 1};
      for (size_t j = 0; j < kFacStages; ++j) {
        std::string sj = std::to_string(j + 1);
        gr.H[j] = gslice(pfx + ".H" + sj, ch, dims_out[j] * dims_in[j]);
        gr.b[j] = gslice(pfx + ".b" + sj, ch, dims_out[j]);
        if (j + 1 < kFacStages) gr.a[j] = gslice(pfx + ".a" + sj, ch, dims_out[j]);
      }
      for (size_t i = 0; i < inner; ++i) {
        size_t k = ch * inner + i;
        if (floored[k]) continue;  // clamped tail: zero gradient
        double up = go[k];
        if (up == 0.0) continue;
        double v = tz[k];
        double dplus = detail::fac_backward(fc, v + 0.5, up, &gr);
        double dminus = detail::fac_backward(fc, v - 0.5, -up, &gr);
        gz[k] += dplus + dminus;
      }
    }
  });
  return res;
}

// ---- conditional Gaussian ------------------------------------------------

// p_i = Phi((y+0.5-mu)/sigma) - Phi((y-0.5-mu)/sigma), sigma clamped below,
// probabilities floored at the tail bound.
inline Var likelihood_y(Var yhat, Var mu, Var sigma) {
  Var s = clamp_min(sigma, kSigmaMin);
  Var upper = div(add_const(sub(yhat, mu), 0.5), s);
  Var lower = div(add_const(sub(yhat, mu), -0.5), s);
  Var p = sub(normcdf(upper), normcdf(lower));
  return clamp_min(p, kTailFloor);
}

// -sum log2 p, in bits.
inline Var bits_of(Var p) { return mul_const(reduce_sum(log_op(p)), -kLog2e); }

inline Var rate_y(Var yhat, Var mu, Var sigma) {
  return bits_of(likelihood_y(yhat, mu, sigma));
}

inline Var rate_z(Ctx& c, const std::string& prefix, Var z) {
  return bits_of(likelihood_z(c, prefix, z));
}

// ---- quantization --------------------------------------------------------

// Training path: i.i.d. uniform noise in [-0.5, 0.5).
inline Tensor noisy_quantize(const Tensor& y, Rng& rng) {
  Tensor out = y;
  for (size_t i = 0; i < out.size(); ++i) out[i] += rng.centered();
  return out;
}

// Inference path: round half away from zero.
inline Tensor round_quantize(const Tensor& y) {
  Tensor out = y;
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::round(out[i]);
  return out;
}

}  // namespace gcm
