#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "fd_check.hpp"
#include "gcm/autodiff.hpp"
#include "gcm/layers.hpp"
#include "gcm/tensor.hpp"

using namespace gcm;
using gcmtest::fd_max_rel_err;
using gcmtest::random_tensor;

TEST_CASE("tensor basics and bounds checks") {
  Tensor t({2, 3}, 0.0);
  CHECK(t.size() == 6);
  t.at({1, 2}) = 5.0;
  CHECK(t.at({1, 2}) == 5.0);
  CHECK_THROWS_AS(t.at({2, 0}), ShapeError);
  CHECK_THROWS_AS(t.at(6), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.reshaped({5}), ShapeError);
}

TEST_CASE("LTNS container roundtrip") {
  Rng rng(7);
  Tensor t = random_tensor({3, 4, 5}, rng);
  std::stringstream ss;
  save_tensor(ss, t);
  Tensor u = load_tensor(ss);
  REQUIRE(u.shape() == t.shape());
  for (size_t i = 0; i < t.size(); ++i) CHECK(u[i] == t[i]);  // bitwise

  std::stringstream bad("XXXX");
  CHECK_THROWS(load_tensor(bad));
}

// Direct 6-nested-loop reference for conv2d.
static Tensor conv2d_oracle(const Tensor& x, const Tensor& k, size_t stride,
                            size_t pad) {
  size_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  size_t Cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  size_t Ho = (H + 2 * pad - kh) / stride + 1;
  size_t Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out({Cout, Ho, Wo});
  for (size_t co = 0; co < Cout; ++co)
    for (size_t oh = 0; oh < Ho; ++oh)
      for (size_t ow = 0; ow < Wo; ++ow)
        for (size_t ci = 0; ci < Cin; ++ci)
          for (size_t r = 0; r < kh; ++r)
            for (size_t c = 0; c < kw; ++c) {
              long ih = (long)(oh * stride + r) - (long)pad;
              long iw = (long)(ow * stride + c) - (long)pad;
              if (ih < 0 || ih >= (long)H || iw < 0 || iw >= (long)W) continue;
              out.at({co, oh, ow}) += x.at({ci, (size_t)ih, (size_t)iw}) *
                                      k.at({co, ci, r, c});
            }
  return out;
}

TEST_CASE("conv2d ones / scalar / oracle") {
  Graph g;
  // 1x3x3 ones, 1x1x3x3 ones kernel, stride 1, pad 1 -> center 9
  Var x = g.input(Tensor({1, 3, 3}, 1.0));
  Var k = g.input(Tensor({1, 1, 3, 3}, 1.0));
  Var y = conv2d(x, k, 1, PadSpec(1));
  CHECK(g.val(y).at({0, 1, 1}) == doctest::Approx(9.0));

  Var x2 = g.input(Tensor({1, 1, 1}, {5.0}));
  Var k2 = g.input(Tensor({1, 1, 1, 1}, {2.0}));
  Var y2 = conv2d(x2, k2, 1);
  CHECK(g.val(y2)[0] == doctest::Approx(10.0));

  Rng rng(11);
  Tensor xr = random_tensor({2, 5, 5}, rng);
  Tensor kr = random_tensor({3, 2, 3, 3}, rng);
  Var xv = g.input(xr), kv = g.input(kr);
  for (size_t stride : {1u, 2u})
    for (size_t pad : {0u, 1u}) {
      Var yv = conv2d(xv, kv, stride, PadSpec(pad));
      Tensor ref = conv2d_oracle(xr, kr, stride, pad);
      REQUIRE(g.val(yv).shape() == ref.shape());
      for (size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(g.val(yv)[i] - ref[i]) < 1e-12);
    }
}

TEST_CASE("conv2d shape errors carry both shapes") {
  Graph g;
  Var x = g.input(Tensor({2, 4, 4}, 1.0));
  Var k = g.input(Tensor({1, 3, 3, 3}, 1.0));
  try {
    conv2d(x, k, 1);
    FAIL("expected throw");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,4,4]") != std::string::npos);
    CHECK(msg.find("[1,3,3,3]") != std::string::npos);
  }
}

TEST_CASE("conv2d_transpose identity / stamping / adjoint") {
  Graph g;
  Var x = g.input(Tensor({1, 3, 3}, 2.0));
  Var k = g.input(Tensor({1, 1, 1, 1}, {1.0}));
  Var y = conv2d_transpose(x, k, 1);
  for (size_t i = 0; i < 9; ++i) CHECK(g.val(y)[i] == 2.0);

  Var x1 = g.input(Tensor({1, 1, 1}, {1.0}));
  Var k2 = g.input(Tensor({1, 1, 2, 2}, 1.0));
  Var y2 = conv2d_transpose(x1, k2, 2);
  REQUIRE(g.val(y2).shape() == std::vector<size_t>{1, 2, 2});
  for (size_t i = 0; i < 4; ++i) CHECK(g.val(y2)[i] == 1.0);

  // <conv2d(x), y> == <x, conv2d_transpose(y)> with a shared kernel.
  // Extents chosen so stride divides (H + pad_total - kh) and the transpose
  // output matches x exactly.
  Rng rng(3);
  struct Case {
    size_t stride, H;
  };
  for (Case c : {Case{1, 6}, Case{2, 7}}) {
    Tensor xt = random_tensor({2, c.H, c.H}, rng);
    Tensor kt = random_tensor({3, 2, 3, 3}, rng);
    size_t pad = 1;
    Var xv = g.input(xt), kv = g.input(kt);
    Var cy = conv2d(xv, kv, c.stride, PadSpec(pad));
    Tensor yt = random_tensor(g.val(cy).shape(), rng);
    Var yv = g.input(yt);
    Var ty = conv2d_transpose(yv, kv, c.stride, PadSpec(pad));
    REQUIRE(g.val(ty).shape() == xt.shape());
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < g.val(cy).size(); ++i) lhs += g.val(cy)[i] * yt[i];
    for (size_t i = 0; i < xt.size(); ++i) rhs += xt[i] * g.val(ty)[i];
    CHECK(std::abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("conv3d_masked zero mask / center tap / oracle") {
  Graph g;
  Rng rng(5);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  Tensor k = random_tensor({2, 1, 3, 3, 3}, rng);

  Var xv = g.input(x), kv = g.input(k);
  Tensor zero_mask({3, 3, 3}, 0.0);
  Var y0 = conv3d_masked(xv, kv, zero_mask);
  for (size_t i = 0; i < g.val(y0).size(); ++i) CHECK(g.val(y0)[i] == 0.0);

  // center-only mask + center-1 kernel = identity
  Tensor cmask({3, 3, 3}, 0.0);
  cmask.at({1, 1, 1}) = 1.0;
  Tensor ck({1, 1, 3, 3, 3}, 0.0);
  ck.at({0, 0, 1, 1, 1}) = 1.0;
  Var yv = conv3d_masked(xv, g.input(ck), cmask);
  for (size_t i = 0; i < x.size(); ++i) CHECK(g.val(yv)[i] == x[i]);

  // random mask vs loop oracle over masked taps
  Tensor mask({3, 3, 3});
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  Var ym = conv3d_masked(xv, kv, mask);
  size_t D = 3, H = 4, W = 4;
  for (size_t co = 0; co < 2; ++co)
    for (size_t d = 0; d < D; ++d)
      for (size_t h = 0; h < H; ++h)
        for (size_t w = 0; w < W; ++w) {
          double ref = 0;
          for (size_t kd = 0; kd < 3; ++kd)
            for (size_t kh = 0; kh < 3; ++kh)
              for (size_t kw = 0; kw < 3; ++kw) {
                if (mask.at({kd, kh, kw}) == 0.0) continue;
                long id = (long)d + (long)kd - 1, ih = (long)h + (long)kh - 1,
                     iw = (long)w + (long)kw - 1;
                if (id < 0 || id >= (long)D || ih < 0 || ih >= (long)H || iw < 0 ||
                    iw >= (long)W)
                  continue;
                ref += x.at({0, (size_t)id, (size_t)ih, (size_t)iw}) *
                       k.at({co, 0, kd, kh, kw});
              }
          CHECK(std::abs(g.val(ym).at({co, d, h, w}) - ref) < 1e-12);
        }

  CHECK_THROWS_AS(conv3d_masked(xv, kv, Tensor({2, 2, 2}, 1.0)), ShapeError);
}

TEST_CASE("backward trivial gradients") {
  Graph g;
  Rng rng(9);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Var xv = g.input(x);
  Var loss = reduce_sum(xv);
  g.backward(loss);
  for (size_t i = 0; i < x.size(); ++i) CHECK(g.grad(xv)[i] == 1.0);

  Graph g2;
  Var x2 = g2.input(Tensor({1}, {3.0}));
  Var l2 = reduce_sum(mul(x2, x2));
  g2.backward(l2);
  CHECK(g2.grad(x2)[0] == doctest::Approx(6.0));

  // non-scalar loss rejected
  Graph g3;
  Var x3 = g3.input(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(g3.backward(x3), ShapeError);
}

TEST_CASE("finite-difference checks for every primitive") {
  Rng rng(42);
  for (int seed = 0; seed < 20; ++seed) {
    Rng r((uint64_t)seed * 977 + 13);
    // elementwise chain: mixes add/sub/mul/div/tanh/sigmoid/exp/log/sqrt/pow
    {
      Tensor a = random_tensor({2, 3}, r, 0.4, 0.0);
      Tensor b = random_tensor({2, 3}, r, 0.3, 2.0);  // positive-ish divisor
      double err = fd_max_rel_err({a, b}, [](Graph& g, std::vector<Var>& v) {
        Var s = add(v[0], v[1]);
        s = sub(s, mul(v[0], v[1]));
        s = div(s, v[1]);
        s = tanh_op(s);
        s = add(s, sigmoid(v[0]));
        s = add(s, exp_op(mul_const(v[0], 0.3)));
        s = add(s, log_op(add_const(mul(v[1], v[1]), 1.0)));
        s = add(s, sqrt_op(add_const(mul(v[0], v[0]), 0.5)));
        s = add(s, pow_const(add_const(mul(v[1], v[1]), 1.0), 1.7));
        s = add(s, softplus(v[0]));
        s = add(s, normcdf(v[0]));
        return reduce_mean(s);
      });
      CHECK(err < 1e-4);
    }
    // conv2d + conv2d_transpose + prelu + bias
    {
      Tensor x = random_tensor({2, 5, 5}, r);
      Tensor k = random_tensor({3, 2, 3, 3}, r);
      Tensor kt = random_tensor({3, 2, 3, 3}, r);
      Tensor alpha = random_tensor({3}, r, 0.2, 0.25);
      Tensor bias = random_tensor({3}, r);
      double err = fd_max_rel_err({x, k, kt, alpha, bias},
                                  [](Graph& g, std::vector<Var>& v) {
                                    Var y = conv2d(v[0], v[1], 2, PadSpec(1));
                                    y = bias_add(y, v[4]);
                                    y = prelu(y, v[3]);
                                    Var z = conv2d_transpose(y, v[2], 2, PadSpec(1));
                                    return reduce_mean(mul(z, z));
                                  });
      CHECK(err < 1e-4);
    }
    // conv3d_masked + broadcast/concat/slice/pad/crop/reshape
    {
      Tensor x = random_tensor({1, 3, 3, 3}, r);
      Tensor k = random_tensor({2, 1, 3, 3, 3}, r);
      Tensor h = random_tensor({2, 3, 3}, r);
      Tensor mask({3, 3, 3}, 0.0);
      for (size_t d = 0; d < 3; ++d)
        for (size_t i = 0; i < 3; ++i)
          for (size_t j = 0; j < 3; ++j)
            if (d < 1 || (d == 1 && i < 2)) mask.at({d, i, j}) = 1.0;
      double err = fd_max_rel_err({x, k, h}, [mask](Graph& g, std::vector<Var>& v) {
        Var y = conv3d_masked(v[0], v[1], mask);
        Var hb = broadcast_depth(v[2], 3);
        Var s = add(y, hb);
        Var c = concat0({slice0(s, 0, 1), slice0(s, 1, 2)});
        Var r3 = reshape(c, {2 * 3, 3, 3});
        Var p = pad2d(r3, 1, 1);
        Var cr = crop2d(p, 1, 4, 1, 4);
        return reduce_mean(mul(cr, cr));
      });
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("ops are deterministic on identical inputs") {
  Rng rng(123);
  Tensor x = random_tensor({2, 6, 6}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Graph g1, g2;
  Var y1 = conv2d(g1.input(x), g1.input(k), 2, PadSpec(1));
  Var y2 = conv2d(g2.input(x), g2.input(k), 2, PadSpec(1));
  for (size_t i = 0; i < g1.val(y1).size(); ++i)
    CHECK(g1.val(y1)[i] == g2.val(y2)[i]);  // bitwise
}
