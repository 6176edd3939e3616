#pragma once

// Image quality metrics built from differentiable ops, so the training loss
// can optimize them directly. Inputs are [C,H,W] with values nominally in
// [0,1] (peak 1 for PSNR).

#include "gcm/layers.hpp"

namespace gcm {

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;
constexpr size_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr size_t kMsScales = 5;
inline const std::array<double, kMsScales> kMsWeights = {0.0448, 0.2856, 0.3001,
                                                         0.2363, 0.1333};

inline Var mse(Var x, Var y) {
  Var d = sub(x, y);
  return reduce_mean(mul(d, d));
}

inline double psnr_of(double mse_val) {
  if (mse_val <= 0) return 99.0;
  return -10.0 * std::log10(mse_val);
}

inline double msssim_db_of(double d) {
  if (d >= 1.0) return 99.0;
  return -10.0 * std::log10(1.0 - d);
}

namespace detail {

// [C,C,k,k] kernel applying the same normalized gaussian to each channel.
inline Tensor gaussian_window(size_t C) {
  size_t k = kSsimWindow;
  std::vector<double> w1(k);
  double half = (double)(k - 1) / 2.0;
  double sum = 0;
  for (size_t i = 0; i < k; ++i) {
    double d = (double)i - half;
    w1[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    sum += w1[i];
  }
  for (auto& v : w1) v /= sum;
  Tensor ker({C, C, k, k}, 0.0);
  for (size_t c = 0; c < C; ++c)
    for (size_t i = 0; i < k; ++i)
      for (size_t j = 0; j < k; ++j) ker.at({c, c, i, j}) = w1[i] * w1[j];
  return ker;
}

// [C,C,2,2] mean-pool kernel.
inline Tensor pool_kernel(size_t C) {
  Tensor ker({C, C, 2, 2}, 0.0);
  for (size_t c = 0; c < C; ++c)
    for (size_t i = 0; i < 2; ++i)
      for (size_t j = 0; j < 2; ++j) ker.at({c, c, i, j}) = 0.25;
  return ker;
}

struct SsimTerms {
  Var luminance;  // mean of l * cs over the map
  Var contrast;   // mean of cs over the map
};

inline SsimTerms ssim_terms(Graph& g, Var x, Var y) {
  size_t C = g.val(x).dim(0);
  Var win = g.input(gaussian_window(C));
  auto blur = [&](Var t) { return conv2d(t, win, 1, PadSpec(0)); };
  Var mx = blur(x);
  Var my = blur(y);
  Var mx2 = mul(mx, mx);
  Var my2 = mul(my, my);
  Var mxy = mul(mx, my);
  Var sx = sub(blur(mul(x, x)), mx2);
  Var sy = sub(blur(mul(y, y)), my2);
  Var sxy = sub(blur(mul(x, y)), mxy);
  Var cs = div(add_const(mul_const(sxy, 2.0), kSsimC2),
               add_const(add(sx, sy), kSsimC2));
  Var l = div(add_const(mul_const(mxy, 2.0), kSsimC1),
              add_const(add(mx2, my2), kSsimC1));
  return {reduce_mean(mul(l, cs)), reduce_mean(cs)};
}

}  // namespace detail

// Single-scale SSIM (mean of the full l*cs map).
inline Var ssim(Graph& g, Var x, Var y) {
  return detail::ssim_terms(g, x, y).luminance;
}

// How many of the five scales fit: each used scale needs >= 11 pixels per
// side after the preceding 2x pools.
inline size_t ms_scale_count(size_t H, size_t W) {
  size_t n = 0;
  size_t h = H, w = W;
  while (n < kMsScales && h >= kSsimWindow && w >= kSsimWindow) {
    ++n;
    h /= 2;
    w /= 2;
  }
  if (n == 0)
    throw ShapeError("ms_ssim: image smaller than the 11x11 window");
  return n;
}

// Multi-scale SSIM; when fewer than five scales fit, the per-scale exponents
// are renormalized to keep the score in [0,1].
inline Var ms_ssim(Graph& g, Var x, Var y) {
  size_t C = g.val(x).dim(0);
  size_t n = ms_scale_count(g.val(x).dim(1), g.val(x).dim(2));
  double wsum = 0;
  for (size_t s = 0; s < n; ++s) wsum += kMsWeights[s];
  Var pool = g.input(detail::pool_kernel(C));
  Var prod = g.input(Tensor({1}, 1.0));
  for (size_t s = 0; s < n; ++s) {
    detail::SsimTerms t = detail::ssim_terms(g, x, y);
    Var term = (s + 1 == n) ? t.luminance : t.contrast;
    term = clamp_min(term, 1e-6);
    prod = mul(prod, pow_const(term, kMsWeights[s] / wsum));
    if (s + 1 < n) {
      x = conv2d(x, pool, 2, PadSpec(0));
      y = conv2d(y, pool, 2, PadSpec(0));
    }
  }
  return prod;
}

}  // namespace gcm
