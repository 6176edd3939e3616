#pragma once

// Gated conditional 3D context model: three separable causal stacks
// (channel / vertical / horizontal) with tanh*sigmoid gating, 1x1x1
// hyperprior conditioning, cross-stack links, a residual connection on the
// horizontal path from layer 2 on, and a 1x1x1 fusion layer producing
// (mu, sigma) for every latent position.

#include <utility>

#include "gcm/layers.hpp"

namespace gcm {

// Total order over latent positions: channel outermost, then raster scan.
struct CausalOrder {
  size_t M, H, W;
  size_t index(size_t c, size_t h, size_t w) const { return (c * H + h) * W + w; }
  // strict precedence
  bool precedes(size_t qc, size_t qh, size_t qw, size_t pc, size_t ph,
                size_t pw) const {
    return index(qc, qh, qw) < index(pc, ph, pw);
  }
};

enum class MaskType { A, B };

struct StackMasks {
  Tensor channel, vertical, horizontal;  // each [n,n,n]
};

// Layer-1 masks (type A) partition the strict causal predecessors of the
// center within the n^3 window:
//   channel:    dc in [-m,-1], all dh,dw
//   vertical:   dc=0, dh in [-m,-1], all dw
//   horizontal: dc=0, dh=0, dw in [-m,-1]
// Type B (layers >= 2) additionally admits the current plane/row/column of
// each stack's own causal axis (dc=0 for channel, dh=0 for vertical, dw=0
// for horizontal). Those extra taps read stack features that themselves only
// carry information from that axis' strict past, so causality is preserved
// while the receptive field widens with depth instead of pinching into blind
// spots.
inline StackMasks build_masks(size_t n, MaskType type) {
  if (n % 2 == 0 || n < 3) throw ShapeError("build_masks: n must be odd and >= 3");
  long m = (long)(n / 2);
  StackMasks sm{Tensor({n, n, n}), Tensor({n, n, n}), Tensor({n, n, n})};
  for (long dc = -m; dc <= m; ++dc)
    for (long dh = -m; dh <= m; ++dh)
      for (long dw = -m; dw <= m; ++dw) {
        size_t idx = (size_t)(((dc + m) * (long)n + (dh + m)) * (long)n + (dw + m));
        long c_hi = type == MaskType::A ? -1 : 0;
        if (dc <= c_hi) sm.channel[idx] = 1.0;
        if (dc == 0 && dh <= (type == MaskType::A ? -1 : 0)) sm.vertical[idx] = 1.0;
        if (dc == 0 && dh == 0 && dw <= (type == MaskType::A ? -1 : 0))
          sm.horizontal[idx] = 1.0;
      }
  return sm;
}

struct ContextConfig {
  size_t layers = 3;
  size_t k = 12;  // gate width; k/2 tanh + k/2 sigmoid channels
  size_t n = 3;   // base kernel size
};

inline void validate(const ContextConfig& c) {
  if (c.layers < 1) throw ShapeError("context: layers must be >= 1");
  if (c.k % 2 != 0 || c.k == 0) throw ShapeError("context: k must be even");
  if (c.n % 2 == 0 || c.n < 3) throw ShapeError("context: n must be odd >= 3");
}

inline void init_context(ParamStore& ps, const ContextConfig& cfg,
                         size_t zp_channels, Rng& rng) {
  validate(cfg);
  size_t kw = cfg.k / 2;
  for (size_t l = 1; l <= cfg.layers; ++l) {
    size_t in = (l == 1) ? 1 : kw;
    std::string base = "ctx.l" + std::to_string(l) + ".";
    for (const char* s : {"c", "v", "h"})
      for (const char* b : {"1", "2"}) {
        init_conv(ps, base + s + b + ".W", {kw, in, cfg.n, cfg.n, cfg.n}, rng);
        init_conv(ps, base + s + b + ".V", {kw, zp_channels, 1, 1}, rng);
        init_bias(ps, base + s + b + ".b", kw);
      }
    for (const char* lk : {"cv", "ch", "vh"})
      for (const char* b : {"1", "2"})
        init_conv(ps, base + lk + b + ".L", {kw, kw, 1, 1, 1}, rng);
    if (l >= 2) init_conv(ps, base + "res.L", {kw, kw, 1, 1, 1}, rng);
  }
  init_conv(ps, "ctx.fuse.W", {2, 3 * kw, 1, 1, 1}, rng);
  // sigma head bias: softplus(0.54) ~ 1 for a unit-scale start
  ps.add("ctx.fuse.b", Tensor({2}, {0.0, 0.54}));
}

namespace detail {

// 1x1 conv of z_p to the gate width, broadcast across the depth axis.
inline Var conditioning(Ctx& c, const std::string& name, Var zp, size_t depth) {
  Var m = conv2d(zp, c.p(name), 1);
  return broadcast_depth(m, depth);
}

}  // namespace detail

// yhat: [M,H,W] latent, zp: [Czp,H,W] hyper-decoder output at the latent
// resolution. Returns (mu, sigma), each [M,H,W]; sigma > 0 via softplus.
inline std::pair<Var, Var> predict_params(Ctx& c, const ContextConfig& cfg, Var yhat,
                                          Var zp) {
  validate(cfg);
  Graph& g = c.g;
  const Tensor& ty = g.val(yhat);
  if (ty.rank() != 3) throw ShapeError("predict_params: yhat must be [M,H,W]");
  size_t M = ty.dim(0), H = ty.dim(1), W = ty.dim(2);
  if (g.val(zp).rank() != 3 || g.val(zp).dim(1) != H || g.val(zp).dim(2) != W)
    throw ShapeError("predict_params: zp " + shape_str(g.val(zp).shape()) +
                     " not aligned with yhat " + shape_str(ty.shape()));
  size_t kw = cfg.k / 2;

  Var a = reshape(yhat, {1, M, H, W});
  Var ac = a, av = a, ah = a;
  for (size_t l = 1; l <= cfg.layers; ++l) {
    StackMasks masks = build_masks(cfg.n, l == 1 ? MaskType::A : MaskType::B);
    std::string base = "ctx.l" + std::to_string(l) + ".";
    auto stack_raw = [&](const char* s, const char* b, Var in, const Tensor& mask) {
      Var r = conv3d_masked(in, c.p(base + s + b + ".W"), mask);
      r = bias_add(r, c.p(base + s + b + ".b"));
      return add(r, detail::conditioning(c, base + s + b + ".V", zp, M));
    };
    Var c1 = stack_raw("c", "1", ac, masks.channel);
    Var c2 = stack_raw("c", "2", ac, masks.channel);
    Var v1 = stack_raw("v", "1", av, masks.vertical);
    Var v2 = stack_raw("v", "2", av, masks.vertical);
    v1 = add(v1, conv3d(c1, c.p(base + "cv1.L")));
    v2 = add(v2, conv3d(c2, c.p(base + "cv2.L")));
    Var h1 = stack_raw("h", "1", ah, masks.horizontal);
    Var h2 = stack_raw("h", "2", ah, masks.horizontal);
    h1 = add(h1, add(conv3d(v1, c.p(base + "vh1.L")), conv3d(c1, c.p(base + "ch1.L"))));
    h2 = add(h2, add(conv3d(v2, c.p(base + "vh2.L")), conv3d(c2, c.p(base + "ch2.L"))));

    Var gc = mul(tanh_op(c1), sigmoid(c2));
    Var gv = mul(tanh_op(v1), sigmoid(v2));
    Var gh = mul(tanh_op(h1), sigmoid(h2));
    if (l >= 2) gh = add(ah, conv3d(gh, c.p(base + "res.L")));
    ac = gc;
    av = gv;
    ah = gh;
  }
  Var fused = conv3d(concat0({ac, av, ah}), c.p("ctx.fuse.W"));
  fused = bias_add(fused, c.p("ctx.fuse.b"));
  Var mu = reshape(slice0(fused, 0, 1), {M, H, W});
  Var sigma = softplus(reshape(slice0(fused, 1, 2), {M, H, W}));
  return {mu, sigma};
}

// Forward-only convenience over plain tensors.
inline std::pair<Tensor, Tensor> predict_params_t(ParamStore& ps,
                                                  const ContextConfig& cfg,
                                                  const Tensor& yhat,
                                                  const Tensor& zp) {
  Graph g;
  Ctx c{g, ps};
  auto [mu, sigma] = predict_params(c, cfg, g.input(yhat), g.input(zp));
  return {g.val(mu), g.val(sigma)};
}

// One serial prediction: all positions preceding p populated in `prefix`,
// later positions hold an arbitrary fill (they never enter the computation,
// so the result is bitwise identical to predict_params on the full tensor).
inline std::pair<double, double> decode_step(ParamStore& ps, const ContextConfig& cfg,
                                             const Tensor& prefix, const Tensor& zp,
                                             size_t ch, size_t h, size_t w) {
  auto [mu, sigma] = predict_params_t(ps, cfg, prefix, zp);
  size_t idx = (ch * prefix.dim(1) + h) * prefix.dim(2) + w;
  return {mu[idx], sigma[idx]};
}

// Stateful serial decoder enforcing the causal call order.
class SerialDecoder {
 public:
  SerialDecoder(ParamStore& ps, const ContextConfig& cfg, size_t M, size_t H,
                size_t W, Tensor zp)
      : ps_(ps), cfg_(cfg), order_{M, H, W}, yhat_({M, H, W}), zp_(std::move(zp)) {}

  // (mu, sigma) for the position about to be decoded.
  std::pair<double, double> step(size_t c, size_t h, size_t w) {
    if (order_.index(c, h, w) != next_)
      throw std::runtime_error("decode_step out of order: expected index " +
                               std::to_string(next_) + ", got " +
                               std::to_string(order_.index(c, h, w)));
    return decode_step(ps_, cfg_, yhat_, zp_, c, h, w);
  }

  void push(double value) {
    yhat_[next_] = value;
    ++next_;
  }

  const Tensor& decoded() const { return yhat_; }

 private:
  ParamStore& ps_;
  ContextConfig cfg_;
  CausalOrder order_;
  Tensor yhat_;
  Tensor zp_;
  size_t next_ = 0;
};

// ---- structural receptive-field audit ------------------------------------

// Boolean reachability of latent positions through the stack wiring: entry
// (p, q) is true iff a change at q can structurally reach the (mu, sigma)
// prediction at p through some chain of unmasked taps. Used by the
// blind-spot tests and the inspect subcommand.
inline std::vector<std::vector<uint8_t>> structural_coverage(const ContextConfig& cfg,
                                                             size_t M, size_t H,
                                                             size_t W) {
  validate(cfg);
  size_t P = M * H * W;
  auto idx = [&](size_t c, size_t h, size_t w) { return (c * H + h) * W + w; };
  // cover[stack][p] = set of input positions visible to that stack's feature
  // at p. Stacks: 0 channel, 1 vertical, 2 horizontal.
  std::vector<std::vector<std::vector<uint8_t>>> cover(
      3, std::vector<std::vector<uint8_t>>(P, std::vector<uint8_t>(P, 0)));
  long m = (long)(cfg.n / 2);

  for (size_t l = 1; l <= cfg.layers; ++l) {
    StackMasks masks = build_masks(cfg.n, l == 1 ? MaskType::A : MaskType::B);
    const Tensor* mlist[3] = {&masks.channel, &masks.vertical, &masks.horizontal};
    auto prev = cover;
    for (int s = 0; s < 3; ++s) {
      for (size_t c = 0; c < M; ++c)
        for (size_t h = 0; h < H; ++h)
          for (size_t w = 0; w < W; ++w) {
            std::vector<uint8_t>& out = cover[s][idx(c, h, w)];
            std::fill(out.begin(), out.end(), 0);
            for (long dc = -m; dc <= m; ++dc)
              for (long dh = -m; dh <= m; ++dh)
                for (long dw = -m; dw <= m; ++dw) {
                  size_t mi =
                      (size_t)(((dc + m) * (long)cfg.n + (dh + m)) * (long)cfg.n +
                               (dw + m));
                  if ((*mlist[s])[mi] == 0.0) continue;
                  long qc = (long)c + dc, qh = (long)h + dh, qw = (long)w + dw;
                  if (qc < 0 || qc >= (long)M || qh < 0 || qh >= (long)H || qw < 0 ||
                      qw >= (long)W)
                    continue;
                  size_t q = idx((size_t)qc, (size_t)qh, (size_t)qw);
                  if (l == 1) {
                    out[q] = 1;  // taps the latent itself
                  } else {
                    for (size_t i = 0; i < P; ++i)
                      if (prev[s][q][i]) out[i] = 1;
                  }
                }
          }
    }
    // links at the same position: channel -> vertical, channel -> horizontal,
    // vertical -> horizontal; residual keeps prior horizontal coverage.
    for (size_t p = 0; p < P; ++p) {
      for (size_t i = 0; i < P; ++i) {
        if (cover[0][p][i]) {
          cover[1][p][i] = 1;
          cover[2][p][i] = 1;
        }
        if (cover[1][p][i]) cover[2][p][i] = 1;
        if (l >= 2 && prev[2][p][i]) cover[2][p][i] = 1;
      }
    }
  }
  std::vector<std::vector<uint8_t>> out(P, std::vector<uint8_t>(P, 0));
  for (size_t p = 0; p < P; ++p)
    for (size_t i = 0; i < P; ++i)
      out[p][i] = cover[0][p][i] | cover[1][p][i] | cover[2][p][i];
  return out;
}

// Same audit for a naive single-stack masked 3D conv of equal depth: layer 1
// masks the strict predecessors in the window, later layers add the center.
// Exhibits the classic blind spots the split stacks eliminate.
inline std::vector<std::vector<uint8_t>> naive_coverage(size_t layers, size_t n,
                                                        size_t M, size_t H,
                                                        size_t W) {
  size_t P = M * H * W;
  auto idx = [&](size_t c, size_t h, size_t w) { return (c * H + h) * W + w; };
  long m = (long)(n / 2);
  std::vector<std::vector<uint8_t>> cover(P, std::vector<uint8_t>(P, 0));
  for (size_t l = 1; l <= layers; ++l) {
    auto prev = cover;
    for (size_t c = 0; c < M; ++c)
      for (size_t h = 0; h < H; ++h)
        for (size_t w = 0; w < W; ++w) {
          std::vector<uint8_t>& out = cover[idx(c, h, w)];
          std::fill(out.begin(), out.end(), 0);
          for (long dc = -m; dc <= m; ++dc)
            for (long dh = -m; dh <= m; ++dh)
              for (long dw = -m; dw <= m; ++dw) {
                bool strict = dc < 0 || (dc == 0 && (dh < 0 || (dh == 0 && dw < 0)));
                bool active = strict || (l >= 2 && dc == 0 && dh == 0 && dw == 0);
                if (!active) continue;
                long qc = (long)c + dc, qh = (long)h + dh, qw = (long)w + dw;
                if (qc < 0 || qc >= (long)M || qh < 0 || qh >= (long)H || qw < 0 ||
                    qw >= (long)W)
                  continue;
                size_t q = idx((size_t)qc, (size_t)qh, (size_t)qw);
                if (l == 1) {
                  out[q] = 1;
                } else {
                  for (size_t i = 0; i < P; ++i)
                    if (prev[q][i]) out[i] = 1;
                }
              }
        }
  }
  return cover;
}

}  // namespace gcm
