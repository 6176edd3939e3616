#pragma once

// Reverse-mode autodiff on a plain tape. Ops evaluate eagerly; backward()
// walks the tape in reverse invoking per-node closures. No fusion, no graph
// rewriting. A Graph is confined to one thread.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gcm/tensor.hpp"

namespace gcm {

class Graph;

struct Var {
  Graph* g = nullptr;
  int id = -1;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor t) { return add_node(std::move(t)); }

  Var param(const std::string& name, const Tensor& t) {
    Var v = add_node(t);
    nodes_[v.id].pname = name;
    named_[name] = v.id;
    return v;
  }

  Var add_node(Tensor val) {
    nodes_.push_back(Node{std::move(val), Tensor(), nullptr, {}});
    return Var{this, (int)nodes_.size() - 1};
  }

  void set_back(Var v, std::function<void()> back) {
    nodes_[v.id].back = std::move(back);
  }

  const Tensor& val(Var v) const { return nodes_[v.id].val; }
  Tensor& grad(Var v) { return nodes_[v.id].grad; }

  const std::map<std::string, int>& named_params() const { return named_; }
  const Tensor& grad_of(const std::string& name) const {
    return nodes_[named_.at(name)].grad;
  }

  // Populates gradients for every node reachable from the loss (all earlier
  // nodes get zero-filled gradients of matching shape). Values are untouched.
  void backward(Var loss) {
    if (nodes_[loss.id].val.size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(nodes_[loss.id].val.shape()));
    for (auto& n : nodes_) n.grad = Tensor(n.val.shape());
    nodes_[loss.id].grad[0] = 1.0;
    for (int i = loss.id; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back();
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void()> back;
    std::string pname;
  };
  std::vector<Node> nodes_;
  std::map<std::string, int> named_;
};

namespace detail {
inline void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}
}  // namespace detail

// ---- elementwise ---------------------------------------------------------

inline Var add(Var a, Var b) {
  Graph* g = a.g;
  detail::check_same(g->val(a), g->val(b), "add");
  Tensor out(g->val(a).shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = g->val(a)[i] + g->val(b)[i];
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, b, v]() {
    const Tensor& go = g->grad(v);
    Tensor &ga = g->grad(a), &gb = g->grad(b);
    for (size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i];
      gb[i] += go[i];
    }
  });
  return v;
}

inline Var sub(Var a, Var b) {
  Graph* g = a.g;
  detail::check_same(g->val(a), g->val(b), "sub");
  Tensor out(g->val(a).shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = g->val(a)[i] - g->val(b)[i];
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, b, v]() {
    const Tensor& go = g->grad(v);
    Tensor &ga = g->grad(a), &gb = g->grad(b);
    for (size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i];
      gb[i] -= go[i];
    }
  });
  return v;
}

inline Var mul(Var a, Var b) {
  Graph* g = a.g;
  detail::check_same(g->val(a), g->val(b), "mul");
  Tensor out(g->val(a).shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = g->val(a)[i] * g->val(b)[i];
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, b, v]() {
    const Tensor& go = g->grad(v);
    const Tensor &ta = g->val(a), &tb = g->val(b);
    Tensor &ga = g->grad(a), &gb = g->grad(b);
    for (size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i] * tb[i];
      gb[i] += go[i] * ta[i];
    }
  });
  return v;
}

inline Var div(Var a, Var b) {
  Graph* g = a.g;
  detail::check_same(g->val(a), g->val(b), "div");
  Tensor out(g->val(a).shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = g->val(a)[i] / g->val(b)[i];
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, b, v]() {
    const Tensor& go = g->grad(v);
    const Tensor &ta = g->val(a), &tb = g->val(b);
    Tensor &ga = g->grad(a), &gb = g->grad(b);
    for (size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i] / tb[i];
      gb[i] -= go[i] * ta[i] / (tb[i] * tb[i]);
    }
  });
  return v;
}

template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Graph* g = a.g;
  Tensor out(g->val(a).shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(g->val(a)[i]);
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, v, df]() {
    const Tensor& go = g->grad(v);
    const Tensor& ta = g->val(a);
    const Tensor& tv = g->val(v);
    Tensor& ga = g->grad(a);
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * df(ta[i], tv[i]);
  });
  return v;
}

inline Var neg(Var a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Var add_const(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Var mul_const(Var a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}
inline Var tanh_op(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}
inline Var sigmoid(Var a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}
inline Var exp_op(Var a) {
  return unary(a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}
inline Var log_op(Var a) {
  return unary(a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}
inline Var sqrt_op(Var a) {
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}
inline Var pow_const(Var a, double p) {
  return unary(a, [p](double x) { return std::pow(x, p); },
               [p](double x, double) { return p * std::pow(x, p - 1.0); });
}
inline Var softplus(Var a) {
  return unary(a,
               [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
               [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}
// Standard normal CDF.
inline Var normcdf(Var a) {
  return unary(a, [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); },
               [](double x, double) {
                 return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
               });
}
// Lower clamp; gradient is zero where the clamp is active.
inline Var clamp_min(Var a, double lo) {
  return unary(a, [lo](double x) { return x < lo ? lo : x; },
               [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

// x if x>0 else alpha_c * x, alpha per leading-axis channel. Works for any
// rank >= 1 tensor with channels on axis 0.
inline Var prelu(Var x, Var alpha) {
  Graph* g = x.g;
  const Tensor& tx = g->val(x);
  const Tensor& ta = g->val(alpha);
  size_t C = tx.dim(0);
  if (ta.size() != C)
    throw ShapeError("prelu: alpha size " + std::to_string(ta.size()) +
                     " != channels " + std::to_string(C));
  size_t inner = tx.size() / C;
  Tensor out(tx.shape());
  for (size_t c = 0; c < C; ++c)
    for (size_t i = 0; i < inner; ++i) {
      double v = tx[c * inner + i];
      out[c * inner + i] = v > 0 ? v : ta[c] * v;
    }
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, x, alpha, v, C, inner]() {
    const Tensor& go = g->grad(v);
    const Tensor& tx = g->val(x);
    const Tensor& ta = g->val(alpha);
    Tensor& gx = g->grad(x);
    Tensor& ga = g->grad(alpha);
    for (size_t c = 0; c < C; ++c)
      for (size_t i = 0; i < inner; ++i) {
        size_t k = c * inner + i;
        if (tx[k] > 0) {
          gx[k] += go[k];
        } else {
          gx[k] += go[k] * ta[c];
          ga[c] += go[k] * tx[k];
        }
      }
  });
  return v;
}

// ---- shape ops -----------------------------------------------------------

inline Var reshape(Var a, std::vector<size_t> shape) {
  Graph* g = a.g;
  Tensor out = g->val(a).reshaped(std::move(shape));
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, v]() {
    const Tensor& go = g->grad(v);
    Tensor& ga = g->grad(a);
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
  return v;
}

// Concatenate along axis 0; all other extents must match.
inline Var concat0(const std::vector<Var>& parts) {
  Graph* g = parts.at(0).g;
  std::vector<size_t> shape = g->val(parts[0]).shape();
  size_t total0 = 0;
  for (Var p : parts) {
    const auto& s = g->val(p).shape();
    if (s.size() != shape.size() ||
        !std::equal(s.begin() + 1, s.end(), shape.begin() + 1))
      throw ShapeError("concat0: incompatible shapes " + shape_str(shape) + " vs " +
                       shape_str(s));
    total0 += s[0];
  }
  shape[0] = total0;
  Tensor out(shape);
  size_t off = 0;
  for (Var p : parts) {
    const Tensor& t = g->val(p);
    std::copy(t.data(), t.data() + t.size(), out.data() + off);
    off += t.size();
  }
  Var v = g->add_node(std::move(out));
  std::vector<Var> ps = parts;
  g->set_back(v, [g, ps, v]() {
    const Tensor& go = g->grad(v);
    size_t off = 0;
    for (Var p : ps) {
      Tensor& gp = g->grad(p);
      for (size_t i = 0; i < gp.size(); ++i) gp[i] += go[off + i];
      off += gp.size();
    }
  });
  return v;
}

// Slice [from, to) along axis 0.
inline Var slice0(Var a, size_t from, size_t to) {
  Graph* g = a.g;
  const Tensor& ta = g->val(a);
  if (from >= to || to > ta.dim(0)) throw ShapeError("slice0: bad range");
  std::vector<size_t> shape = ta.shape();
  size_t inner = ta.size() / shape[0];
  shape[0] = to - from;
  Tensor out(shape);
  std::copy(ta.data() + from * inner, ta.data() + to * inner, out.data());
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, v, from, inner]() {
    const Tensor& go = g->grad(v);
    Tensor& ga = g->grad(a);
    for (size_t i = 0; i < go.size(); ++i) ga[from * inner + i] += go[i];
  });
  return v;
}

// Zero-pad a [C,H,W] tensor spatially.
inline Var pad2d(Var a, size_t ph, size_t pw) {
  Graph* g = a.g;
  const Tensor& ta = g->val(a);
  if (ta.rank() != 3) throw ShapeError("pad2d: expects rank-3 [C,H,W]");
  size_t C = ta.dim(0), H = ta.dim(1), W = ta.dim(2);
  Tensor out({C, H + 2 * ph, W + 2 * pw});
  for (size_t c = 0; c < C; ++c)
    for (size_t h = 0; h < H; ++h)
      for (size_t w = 0; w < W; ++w)
        out[(c * (H + 2 * ph) + h + ph) * (W + 2 * pw) + w + pw] =
            ta[(c * H + h) * W + w];
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, v, C, H, W, ph, pw]() {
    const Tensor& go = g->grad(v);
    Tensor& ga = g->grad(a);
    for (size_t c = 0; c < C; ++c)
      for (size_t h = 0; h < H; ++h)
        for (size_t w = 0; w < W; ++w)
          ga[(c * H + h) * W + w] +=
              go[(c * (H + 2 * ph) + h + ph) * (W + 2 * pw) + w + pw];
  });
  return v;
}

// Crop a [C,H,W] tensor to [C, h1-h0, w1-w0].
inline Var crop2d(Var a, size_t h0, size_t h1, size_t w0, size_t w1) {
  Graph* g = a.g;
  const Tensor& ta = g->val(a);
  if (ta.rank() != 3) throw ShapeError("crop2d: expects rank-3 [C,H,W]");
  size_t C = ta.dim(0), H = ta.dim(1), W = ta.dim(2);
  if (h1 > H || w1 > W || h0 >= h1 || w0 >= w1) throw ShapeError("crop2d: bad window");
  Tensor out({C, h1 - h0, w1 - w0});
  for (size_t c = 0; c < C; ++c)
    for (size_t h = h0; h < h1; ++h)
      for (size_t w = w0; w < w1; ++w)
        out[(c * (h1 - h0) + h - h0) * (w1 - w0) + w - w0] = ta[(c * H + h) * W + w];
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, v, C, H, W, h0, h1, w0, w1]() {
    const Tensor& go = g->grad(v);
    Tensor& ga = g->grad(a);
    for (size_t c = 0; c < C; ++c)
      for (size_t h = h0; h < h1; ++h)
        for (size_t w = w0; w < w1; ++w)
          ga[(c * H + h) * W + w] +=
              go[(c * (h1 - h0) + h - h0) * (w1 - w0) + w - w0];
  });
  return v;
}

inline Var reduce_sum(Var a) {
  Graph* g = a.g;
  double s = 0;
  const Tensor& ta = g->val(a);
  for (size_t i = 0; i < ta.size(); ++i) s += ta[i];
  Var v = g->add_node(Tensor({1}, {s}));
  g->set_back(v, [g, a, v]() {
    double go = g->grad(v)[0];
    Tensor& ga = g->grad(a);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += go;
  });
  return v;
}

inline Var reduce_mean(Var a) {
  Graph* g = a.g;
  size_t n = g->val(a).size();
  return mul_const(reduce_sum(a), 1.0 / (double)n);
}

// Broadcast a [C] vector across the trailing extents of shape (bias add).
inline Var bias_add(Var x, Var b) {
  Graph* g = x.g;
  const Tensor& tx = g->val(x);
  const Tensor& tb = g->val(b);
  size_t C = tx.dim(0);
  if (tb.size() != C)
    throw ShapeError("bias_add: bias size " + std::to_string(tb.size()) +
                     " != channels " + std::to_string(C));
  size_t inner = tx.size() / C;
  Tensor out(tx.shape());
  for (size_t c = 0; c < C; ++c)
    for (size_t i = 0; i < inner; ++i)
      out[c * inner + i] = tx[c * inner + i] + tb[c];
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, x, b, v, C, inner]() {
    const Tensor& go = g->grad(v);
    Tensor& gx = g->grad(x);
    Tensor& gb = g->grad(b);
    for (size_t c = 0; c < C; ++c)
      for (size_t i = 0; i < inner; ++i) {
        gx[c * inner + i] += go[c * inner + i];
        gb[c] += go[c * inner + i];
      }
  });
  return v;
}

// Broadcast [K,H,W] across a new depth axis -> [K,D,H,W].
inline Var broadcast_depth(Var a, size_t D) {
  Graph* g = a.g;
  const Tensor& ta = g->val(a);
  if (ta.rank() != 3) throw ShapeError("broadcast_depth: expects rank-3 [K,H,W]");
  size_t K = ta.dim(0), H = ta.dim(1), W = ta.dim(2);
  Tensor out({K, D, H, W});
  for (size_t k = 0; k < K; ++k)
    for (size_t d = 0; d < D; ++d)
      std::copy(ta.data() + k * H * W, ta.data() + (k + 1) * H * W,
                out.data() + (k * D + d) * H * W);
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, a, v, K, D, H, W]() {
    const Tensor& go = g->grad(v);
    Tensor& ga = g->grad(a);
    for (size_t k = 0; k < K; ++k)
      for (size_t d = 0; d < D; ++d)
        for (size_t i = 0; i < H * W; ++i)
          ga[k * H * W + i] += go[(k * D + d) * H * W + i];
  });
  return v;
}

// ---- convolutions --------------------------------------------------------

struct PadSpec {
  size_t lo = 0, hi = 0;
  PadSpec() = default;
  PadSpec(size_t both) : lo(both), hi(both) {}
  PadSpec(size_t l, size_t h) : lo(l), hi(h) {}
  size_t total() const { return lo + hi; }
};

// Cross-correlation. x: [Cin,H,W], k: [Cout,Cin,kh,kw].
// Out extent: floor((H + pad_total - kh)/stride) + 1.
inline Var conv2d(Var x, Var k, size_t stride, PadSpec pad = PadSpec()) {
  Graph* g = x.g;
  const Tensor& tx = g->val(x);
  const Tensor& tk = g->val(k);
  if (tx.rank() != 3 || tk.rank() != 4)
    throw ShapeError("conv2d: want x [Cin,H,W], k [Cout,Cin,kh,kw]; got " +
                     shape_str(tx.shape()) + " and " + shape_str(tk.shape()));
  size_t Cin = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
  size_t Cout = tk.dim(0), kh = tk.dim(2), kw = tk.dim(3);
  if (tk.dim(1) != Cin)
    throw ShapeError("conv2d: shape mismatch x " + shape_str(tx.shape()) + " vs k " +
                     shape_str(tk.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (kh > H + pad.total() || kw > W + pad.total())
    throw ShapeError("conv2d: kernel larger than padded input: x " +
                     shape_str(tx.shape()) + " k " + shape_str(tk.shape()));
  size_t Ho = (H + pad.total() - kh) / stride + 1;
  size_t Wo = (W + pad.total() - kw) / stride + 1;
  Tensor out({Cout, Ho, Wo});
  const long plo = (long)pad.lo;
  for (size_t co = 0; co < Cout; ++co)
    for (size_t oh = 0; oh < Ho; ++oh)
      for (size_t ow = 0; ow < Wo; ++ow) {
        double acc = 0;
        for (size_t ci = 0; ci < Cin; ++ci)
          for (size_t r = 0; r < kh; ++r) {
            long ih = (long)(oh * stride + r) - plo;
            if (ih < 0 || ih >= (long)H) continue;
            const double* xrow = tx.data() + (ci * H + ih) * W;
            const double* krow = tk.data() + ((co * Cin + ci) * kh + r) * kw;
            for (size_t c = 0; c < kw; ++c) {
              long iw = (long)(ow * stride + c) - plo;
              if (iw < 0 || iw >= (long)W) continue;
              acc += xrow[iw] * krow[c];
            }
          }
        out[(co * Ho + oh) * Wo + ow] = acc;
      }
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, x, k, v, stride, plo, Cin, H, W, Cout, kh, kw, Ho, Wo]() {
    const Tensor& go = g->grad(v);
    const Tensor& tx = g->val(x);
    const Tensor& tk = g->val(k);
    Tensor& gx = g->grad(x);
    Tensor& gk = g->grad(k);
    for (size_t co = 0; co < Cout; ++co)
      for (size_t oh = 0; oh < Ho; ++oh)
        for (size_t ow = 0; ow < Wo; ++ow) {
          double dgo = go[(co * Ho + oh) * Wo + ow];
          if (dgo == 0.0) continue;
          for (size_t ci = 0; ci < Cin; ++ci)
            for (size_t r = 0; r < kh; ++r) {
              long ih = (long)(oh * stride + r) - plo;
              if (ih < 0 || ih >= (long)H) continue;
              for (size_t c = 0; c < kw; ++c) {
                long iw = (long)(ow * stride + c) - plo;
                if (iw < 0 || iw >= (long)W) continue;
                gx[(ci * H + ih) * W + iw] += dgo * tk[((co * Cin + ci) * kh + r) * kw + c];
                gk[((co * Cin + ci) * kh + r) * kw + c] += dgo * tx[(ci * H + ih) * W + iw];
              }
            }
        }
  });
  return v;
}

// Gradient-of-conv2d semantics. x: [Cin,H,W], k: [Cin,Cout,kh,kw].
// Out extent: stride*(H-1) + kh - pad_total.
inline Var conv2d_transpose(Var x, Var k, size_t stride, PadSpec pad = PadSpec()) {
  Graph* g = x.g;
  const Tensor& tx = g->val(x);
  const Tensor& tk = g->val(k);
  if (tx.rank() != 3 || tk.rank() != 4)
    throw ShapeError("conv2d_transpose: want x [Cin,H,W], k [Cin,Cout,kh,kw]; got " +
                     shape_str(tx.shape()) + " and " + shape_str(tk.shape()));
  size_t Cin = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
  size_t Cout = tk.dim(1), kh = tk.dim(2), kw = tk.dim(3);
  if (tk.dim(0) != Cin)
    throw ShapeError("conv2d_transpose: shape mismatch x " + shape_str(tx.shape()) +
                     " vs k " + shape_str(tk.shape()));
  if (stride < 1) throw ShapeError("conv2d_transpose: stride must be >= 1");
  long Ho = (long)(stride * (H - 1) + kh) - (long)pad.total();
  long Wo = (long)(stride * (W - 1) + kw) - (long)pad.total();
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d_transpose: empty output");
  Tensor out({Cout, (size_t)Ho, (size_t)Wo});
  const long plo = (long)pad.lo;
  for (size_t ci = 0; ci < Cin; ++ci)
    for (size_t h = 0; h < H; ++h)
      for (size_t w = 0; w < W; ++w) {
        double xv = tx[(ci * H + h) * W + w];
        if (xv == 0.0) continue;
        for (size_t co = 0; co < Cout; ++co)
          for (size_t r = 0; r < kh; ++r) {
            long oh = (long)(h * stride + r) - plo;
            if (oh < 0 || oh >= Ho) continue;
            for (size_t c = 0; c < kw; ++c) {
              long ow = (long)(w * stride + c) - plo;
              if (ow < 0 || ow >= Wo) continue;
              out[(co * Ho + oh) * Wo + ow] += xv * tk[((ci * Cout + co) * kh + r) * kw + c];
            }
          }
      }
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, x, k, v, stride, plo, Cin, H, W, Cout, kh, kw, Ho, Wo]() {
    const Tensor& go = g->grad(v);
    const Tensor& tx = g->val(x);
    const Tensor& tk = g->val(k);
    Tensor& gx = g->grad(x);
    Tensor& gk = g->grad(k);
    for (size_t ci = 0; ci < Cin; ++ci)
      for (size_t h = 0; h < H; ++h)
        for (size_t w = 0; w < W; ++w) {
          double acc_x = 0;
          for (size_t co = 0; co < Cout; ++co)
            for (size_t r = 0; r < kh; ++r) {
              long oh = (long)(h * stride + r) - plo;
              if (oh < 0 || oh >= Ho) continue;
              for (size_t c = 0; c < kw; ++c) {
                long ow = (long)(w * stride + c) - plo;
                if (ow < 0 || ow >= Wo) continue;
                double dgo = go[(co * Ho + oh) * Wo + ow];
                acc_x += dgo * tk[((ci * Cout + co) * kh + r) * kw + c];
                gk[((ci * Cout + co) * kh + r) * kw + c] += dgo * tx[(ci * H + h) * W + w];
              }
            }
          gx[(ci * H + h) * W + w] += acc_x;
        }
  });
  return v;
}

// Masked 3D cross-correlation with "same" padding and stride 1.
// x: [Cin,D,H,W], k: [Cout,Cin,kd,kh,kw], mask: [kd,kh,kw] with entries in
// {0,1}, shared across channel pairs. The effective kernel is k .* mask, in
// both forward and backward, so masked taps contribute an exact 0.
inline Var conv3d_masked(Var x, Var k, const Tensor& mask) {
  Graph* g = x.g;
  const Tensor& tx = g->val(x);
  const Tensor& tk = g->val(k);
  if (tx.rank() != 4 || tk.rank() != 5)
    throw ShapeError("conv3d_masked: want x [Cin,D,H,W], k [Cout,Cin,kd,kh,kw]; got " +
                     shape_str(tx.shape()) + " and " + shape_str(tk.shape()));
  size_t Cin = tx.dim(0), D = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  size_t Cout = tk.dim(0), kd = tk.dim(2), kh = tk.dim(3), kw = tk.dim(4);
  if (tk.dim(1) != Cin)
    throw ShapeError("conv3d_masked: shape mismatch x " + shape_str(tx.shape()) +
                     " vs k " + shape_str(tk.shape()));
  if (mask.shape() != std::vector<size_t>{kd, kh, kw})
    throw ShapeError("conv3d_masked: mask shape " + shape_str(mask.shape()) +
                     " != kernel taps [" + std::to_string(kd) + "," +
                     std::to_string(kh) + "," + std::to_string(kw) + "]");
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0.0 && mask[i] != 1.0)
      throw ShapeError("conv3d_masked: mask entries must be 0 or 1");
  long pd = (long)(kd / 2), ph = (long)(kh / 2), pw = (long)(kw / 2);
  // Active tap list keeps masked taps out of the accumulation entirely.
  struct Tap {
    size_t d, h, w;
  };
  std::vector<Tap> taps;
  for (size_t d = 0; d < kd; ++d)
    for (size_t h = 0; h < kh; ++h)
      for (size_t w = 0; w < kw; ++w)
        if (mask[(d * kh + h) * kw + w] == 1.0) taps.push_back({d, h, w});
  Tensor out({Cout, D, H, W});
  for (size_t co = 0; co < Cout; ++co)
    for (size_t od = 0; od < D; ++od)
      for (size_t oh = 0; oh < H; ++oh)
        for (size_t ow = 0; ow < W; ++ow) {
          double acc = 0;
          for (size_t ci = 0; ci < Cin; ++ci)
            for (const Tap& t : taps) {
              long id = (long)(od + t.d) - pd;
              long ih = (long)(oh + t.h) - ph;
              long iw = (long)(ow + t.w) - pw;
              if (id < 0 || id >= (long)D || ih < 0 || ih >= (long)H || iw < 0 ||
                  iw >= (long)W)
                continue;
              acc += tx[((ci * D + id) * H + ih) * W + iw] *
                     tk[(((co * Cin + ci) * kd + t.d) * kh + t.h) * kw + t.w];
            }
          out[((co * D + od) * H + oh) * W + ow] = acc;
        }
  Var v = g->add_node(std::move(out));
  g->set_back(v, [g, x, k, v, taps, pd, ph, pw, Cin, D, H, W, Cout, kd, kh, kw]() {
    const Tensor& go = g->grad(v);
    const Tensor& tx = g->val(x);
    const Tensor& tk = g->val(k);
    Tensor& gx = g->grad(x);
    Tensor& gk = g->grad(k);
    for (size_t co = 0; co < Cout; ++co)
      for (size_t od = 0; od < D; ++od)
        for (size_t oh = 0; oh < H; ++oh)
          for (size_t ow = 0; ow < W; ++ow) {
            double dgo = go[((co * D + od) * H + oh) * W + ow];
            if (dgo == 0.0) continue;
            for (size_t ci = 0; ci < Cin; ++ci)
              for (const auto& t : taps) {
                long id = (long)(od + t.d) - pd;
                long ih = (long)(oh + t.h) - ph;
                long iw = (long)(ow + t.w) - pw;
                if (id < 0 || id >= (long)D || ih < 0 || ih >= (long)H || iw < 0 ||
                    iw >= (long)W)
                  continue;
                gx[((ci * D + id) * H + ih) * W + iw] +=
                    dgo * tk[(((co * Cin + ci) * kd + t.d) * kh + t.h) * kw + t.w];
                gk[(((co * Cin + ci) * kd + t.d) * kh + t.h) * kw + t.w] +=
                    dgo * tx[((ci * D + id) * H + ih) * W + iw];
              }
          }
  });
  return v;
}

// Unmasked 3D conv (all-ones mask), used for the 1x1x1 gate and fusion convs.
inline Var conv3d(Var x, Var k) {
  const Tensor& tk = x.g->val(k);
  Tensor ones({tk.dim(2), tk.dim(3), tk.dim(4)}, 1.0);
  return conv3d_masked(x, k, ones);
}

// Operator sugar.
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

}  // namespace gcm
