#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fd_check.hpp"
#include "gcm/entropy.hpp"

using namespace gcm;
using gcmtest::fd_max_rel_err;
using gcmtest::random_tensor;

TEST_CASE("unit gaussian center bin mass") {
  // Phi(0.5) - Phi(-0.5) for the standard normal
  CHECK(gaussian_prob(0.0, 0.0, 1.0) == doctest::Approx(0.3829249).epsilon(1e-6));
  Graph g;
  Var p = likelihood_y(g.input(Tensor({1, 1, 1}, 0.0)),
                       g.input(Tensor({1, 1, 1}, 0.0)),
                       g.input(Tensor({1, 1, 1}, 1.0)));
  CHECK(g.val(p)[0] == doctest::Approx(0.3829249).epsilon(1e-6));
}

TEST_CASE("gaussian integer bins sum to one") {
  double mus[] = {0.0, 0.3, -2.7, 11.25};
  double sigmas[] = {0.01, 0.2, 1.0, 6.5};
  for (double mu : mus)
    for (double s : sigmas) {
      double sum = 0;
      for (int v = -100; v <= 100; ++v) sum += gaussian_prob((double)v, mu, s);
      // tail floors add at most 201 * 1e-9 on top of the true mass
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      double exact = normal_cdf((100.5 - mu) / std::max(s, kSigmaMin)) -
                     normal_cdf((-100.5 - mu) / std::max(s, kSigmaMin));
      CHECK(std::abs(sum - exact) <= 201 * kTailFloor + 1e-12);
    }
}

TEST_CASE("gaussian translation consistency") {
  for (int k = -5; k <= 5; ++k) {
    double a = gaussian_prob(3.0, 0.4, 1.7);
    double b = gaussian_prob(3.0 + k, 0.4 + k, 1.7);
    CHECK(std::abs(a - b) < 1e-12);
  }
}

TEST_CASE("rate grows with sigma at fixed symbol") {
  double sigmas[] = {0.5, 1.0, 2.0, 4.0};
  double prev = 2.0;
  for (double s : sigmas) {
    double p = gaussian_prob(0.0, 0.0, s);
    CHECK(p < prev);
    prev = p;
  }
  // bits_of matches a scalar -sum log2 p oracle
  Graph g;
  Rng rng(9);
  Tensor y = round_quantize(random_tensor({2, 3, 3}, rng, 3.0));
  Tensor mu = random_tensor({2, 3, 3}, rng);
  Tensor sg = random_tensor({2, 3, 3}, rng, 0.5, 1.0);
  Var r = rate_y(g.input(y), g.input(mu), g.input(sg));
  double expect = 0;
  for (size_t i = 0; i < y.size(); ++i)
    expect -= std::log2(gaussian_prob(y[i], mu[i], sg[i]));
  CHECK(g.val(r)[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("factorized model at init: monotone CDF, positive mass, near-unit sum") {
  ParamStore ps;
  init_factorized(ps, "prior", 4);
  for (size_t c = 0; c < 4; ++c) {
    double prev = factorized_cdf(ps, "prior", c, -101.0);
    CHECK(prev >= 0.0);
    for (int v = -100; v <= 100; ++v) {
      double cur = factorized_cdf(ps, "prior", c, (double)v);
      CHECK(cur > prev);
      prev = cur;
    }
    CHECK(prev <= 1.0);
    for (int v = -30; v <= 30; ++v)
      CHECK(factorized_prob(ps, "prior", c, (double)v) > kTailFloor);
    double sum = 0;
    for (int v = -100; v <= 100; ++v) sum += factorized_prob(ps, "prior", c, (double)v);
    CHECK(sum >= 1.0 - 1e-6);
    CHECK(sum <= 1.0 + 201 * kTailFloor);
  }
  // init is close to sigmoid(v/4)
  CHECK(factorized_cdf(ps, "prior", 0, 0.0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(factorized_cdf(ps, "prior", 0, 4.0) ==
        doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-6));
}

TEST_CASE("likelihood_z tape node matches scalar evaluation") {
  ParamStore ps;
  Rng rng(21);
  init_factorized(ps, "prior", 3);
  // perturb away from init so the test is not degenerate
  for (auto& [name, t] : ps.all())
    for (size_t i = 0; i < t.size(); ++i) t[i] += 0.1 * rng.normal();
  Tensor z = round_quantize(random_tensor({3, 2, 2}, rng, 4.0));
  Graph g;
  Ctx c{g, ps};
  Var p = likelihood_z(c, "prior", g.input(z));
  for (size_t ch = 0; ch < 3; ++ch)
    for (size_t i = 0; i < 4; ++i)
      CHECK(g.val(p)[ch * 4 + i] ==
            doctest::Approx(factorized_prob(ps, "prior", ch, z[ch * 4 + i]))
                .epsilon(1e-12));
}

TEST_CASE("gradient FD: conditional gaussian") {
  for (int seed = 0; seed < 20; ++seed) {
    Rng r((uint64_t)seed * 17 + 3);
    Tensor y = round_quantize(random_tensor({2, 3, 3}, r, 2.0));
    Tensor mu = random_tensor({2, 3, 3}, r);
    Tensor sg = random_tensor({2, 3, 3}, r, 0.4, 0.8);  // well above the clamp
    double e = fd_max_rel_err({y, mu, sg}, [](Graph& g, std::vector<Var>& v) {
      return rate_y(v[0], v[1], v[2]);
    });
    CHECK(e < 1e-4);
  }
}

TEST_CASE("gradient FD: factorized prior parameters and input") {
  for (int seed = 0; seed < 8; ++seed) {
    ParamStore ps;
    Rng r((uint64_t)seed * 101 + 5);
    init_factorized(ps, "prior", 2);
    for (auto& [name, t] : ps.all())
      for (size_t i = 0; i < t.size(); ++i) t[i] += 0.15 * r.normal();
    Tensor z = round_quantize(random_tensor({2, 2, 2}, r, 3.0));

    // analytic grads via named leaves
    Graph g;
    Ctx c{g, ps};
    Var zin = g.input(z);
    Var rate = rate_z(c, "prior", zin);
    g.backward(rate);

    double h = 1e-5;
    for (auto& [name, t] : ps.all()) {
      const Tensor& an = g.grad_of(name);
      for (size_t i = 0; i < t.size(); ++i) {
        ParamStore pp = ps;
        pp[name][i] = t[i] + h;
        double fp = [&] {
          Graph gg;
          Ctx cc{gg, pp};
          return gg.val(rate_z(cc, "prior", gg.input(z)))[0];
        }();
        pp[name][i] = t[i] - h;
        double fm = [&] {
          Graph gg;
          Ctx cc{gg, pp};
          return gg.val(rate_z(cc, "prior", gg.input(z)))[0];
        }();
        double fd = (fp - fm) / (2 * h);
        double denom = std::max({std::abs(fd), std::abs(an[i]), 1e-4});
        CHECK(std::abs(fd - an[i]) / denom < 1e-4);
      }
    }
    // input gradient
    const Tensor& gz = g.grad(zin);
    for (size_t i = 0; i < z.size(); ++i) {
      Tensor zp = z;
      zp[i] = z[i] + h;
      Graph gp;
      Ctx cp{gp, ps};
      double fp = gp.val(rate_z(cp, "prior", gp.input(zp)))[0];
      zp[i] = z[i] - h;
      Graph gm;
      Ctx cm{gm, ps};
      double fm = gm.val(rate_z(cm, "prior", gm.input(zp)))[0];
      double fd = (fp - fm) / (2 * h);
      double denom = std::max({std::abs(fd), std::abs(gz[i]), 1e-4});
      CHECK(std::abs(fd - gz[i]) / denom < 1e-4);
    }
  }
}

TEST_CASE("quantizers") {
  Tensor t({6}, {0.5, -0.5, 1.5, -1.5, 0.49, -0.49});
  Tensor q = round_quantize(t);
  CHECK(q[0] == 1.0);
  CHECK(q[1] == -1.0);
  CHECK(q[2] == 2.0);
  CHECK(q[3] == -2.0);
  CHECK(q[4] == 0.0);
  CHECK(q[5] == 0.0);

  Rng rng(33);
  Tensor zeros({1000000}, 0.0);
  Tensor noisy = noisy_quantize(zeros, rng);
  double mean = 0, lo = 1, hi = -1;
  for (size_t i = 0; i < noisy.size(); ++i) {
    mean += noisy[i];
    lo = std::min(lo, noisy[i]);
    hi = std::max(hi, noisy[i]);
  }
  mean /= (double)noisy.size();
  CHECK(std::abs(mean) < 0.002);
  CHECK(lo >= -0.5);
  CHECK(hi < 0.5);
}
