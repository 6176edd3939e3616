#pragma once

// Rate-distortion training: Adam with separate learning rates for the
// context-model group, CSV progress logging, divergence rollback, and the
// evaluation sweep that measures actual coded bitstreams.

#include <limits>
#include <ostream>

#include "gcm/codec.hpp"

namespace gcm {

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update from the gradients recorded in g. Parameters whose
  // names start with "ctx." form the context group with their own rate.
  void step(ParamStore& ps, Graph& g, double lr_main, double lr_context) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, (double)t_);
    double bc2 = 1.0 - std::pow(beta2_, (double)t_);
    for (auto& [name, p] : ps.all()) {
      const Tensor* grad = nullptr;
      try {
        grad = &g.grad_of(name);
      } catch (...) {
        continue;  // not part of this graph
      }
      double lr = name.rfind("ctx.", 0) == 0 ? lr_context : lr_main;
      Tensor& m = state(m_, name, p);
      Tensor& v = state(v_, name, p);
      for (size_t i = 0; i < p.size(); ++i) {
        double gi = (*grad)[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

  size_t steps() const { return t_; }

 private:
  Tensor& state(std::map<std::string, Tensor>& store, const std::string& name,
                const Tensor& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor(like.shape())).first;
    return it->second;
  }

  double beta1_, beta2_, eps_;
  size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

struct TrainConfig {
  size_t steps = 500;
  double lambda = 8.0;
  double lr_main = 1e-4;
  double lr_context = 5e-5;
  double lr_after_drop = 1e-5;
  size_t lr_drop_step = std::numeric_limits<size_t>::max();
  size_t crop = 64;  // must be a multiple of the padding unit
  uint64_t seed = 1;
  size_t snapshot_every = 50;     // divergence-rollback granularity
  std::string checkpoint_path;    // saved at the end when non-empty
};

struct TrainResult {
  size_t steps_done = 0;
  bool diverged = false;
  double last_loss = 0, last_bpp = 0, last_dist = 0;
};

namespace detail {
inline Tensor random_crop(const Tensor& img, size_t crop, Rng& rng) {
  size_t H = img.dim(1), W = img.dim(2);
  if (H < crop || W < crop)
    throw ShapeError("training image smaller than crop size");
  size_t h0 = H == crop ? 0 : rng.index(H - crop + 1);
  size_t w0 = W == crop ? 0 : rng.index(W - crop + 1);
  Tensor out({3, crop, crop});
  for (size_t c = 0; c < 3; ++c)
    for (size_t h = 0; h < crop; ++h)
      for (size_t w = 0; w < crop; ++w)
        out.at({c, h, w}) = img.at({c, h0 + h, w0 + w});
  return out;
}
}  // namespace detail

// Minimizes lambda * (1 - ms_ssim) + bits / pixel over random crops. Writes
// "step,loss,rate_bpp,distortion_d" rows to csv when provided. On a
// non-finite loss or gradient the last snapshot is restored and training
// stops with diverged = true.
inline TrainResult train(ParamStore& ps, const ModelConfig& cfg,
                         const TrainConfig& tc, const std::vector<Tensor>& images,
                         std::ostream* csv = nullptr) {
  if (images.empty()) throw std::runtime_error("train: no images");
  Rng rng(tc.seed);
  Rng noise(tc.seed ^ 0x9E3779B97F4A7C15ull);
  Adam opt;
  ParamStore snapshot = ps;
  TrainResult res;
  if (csv) *csv << "step,loss,rate_bpp,distortion_d\n";
  double pixels = (double)(tc.crop * tc.crop);

  for (size_t step = 1; step <= tc.steps; ++step) {
    const Tensor& img = images[rng.index(images.size())];
    Tensor crop = detail::random_crop(img, tc.crop, rng);

    Graph g;
    Ctx c{g, ps};
    RdTerms t = rd_forward(c, cfg, crop, noise);
    Var bpp = mul_const(add(t.bits_latent, t.bits_hyper), 1.0 / pixels);
    Var loss = add(mul_const(t.dist, tc.lambda), bpp);
    double lv = g.val(loss)[0];
    bool bad = !std::isfinite(lv);
    if (!bad) {
      g.backward(loss);
      for (auto& [name, p] : ps.all()) {
        (void)p;
        try {
          const Tensor& gr = g.grad_of(name);
          for (size_t i = 0; i < gr.size() && !bad; ++i)
            bad = !std::isfinite(gr[i]);
        } catch (...) {
        }
        if (bad) break;
      }
    }
    if (bad) {
      ps = snapshot;  // roll back to the last healthy state
      res.diverged = true;
      break;
    }

    double lr = step > tc.lr_drop_step ? tc.lr_after_drop : tc.lr_main;
    opt.step(ps, g, lr, tc.lr_context);
    reproject_gdn(ps);

    res.steps_done = step;
    res.last_loss = lv;
    res.last_bpp = g.val(bpp)[0];
    res.last_dist = g.val(t.dist)[0];
    if (csv)
      *csv << step << "," << lv << "," << res.last_bpp << "," << res.last_dist
           << "\n";
    if (step % tc.snapshot_every == 0) snapshot = ps;
  }
  if (!tc.checkpoint_path.empty() && !res.diverged)
    save_checkpoint(tc.checkpoint_path, cfg, ps);
  return res;
}

// ---- evaluation ----------------------------------------------------------

struct RdPoint {
  std::string image;
  double lambda = 0;
  double bpp = 0;       // from the actual coded stream
  double msssim = 0;
  double msssim_db = 0;
  double psnr = 0;
};

inline RdPoint evaluate_image(ParamStore& ps, const ModelConfig& cfg,
                              const Tensor& img, const std::string& name,
                              double lambda, uint8_t lambda_index = kLambdaUnset) {
  RdPoint pt;
  pt.image = name;
  pt.lambda = lambda;
  CompressStats st = compress(ps, cfg, img, lambda_index);
  pt.bpp = st.bpp;
  Tensor recon = decompress(ps, cfg, st.bytes);
  Graph g;
  Var a = g.input(img), b = g.input(recon);
  pt.msssim = g.val(ms_ssim(g, a, b))[0];
  pt.msssim_db = msssim_db_of(pt.msssim);
  pt.psnr = psnr_of(g.val(mse(a, b))[0]);
  return pt;
}

// One model evaluated over a set of images; CSV columns:
// image,lambda,bpp,msssim,msssim_db,psnr.
inline std::vector<RdPoint> rd_sweep(
    ParamStore& ps, const ModelConfig& cfg, double lambda,
    const std::vector<std::pair<std::string, Tensor>>& images,
    std::ostream* csv = nullptr) {
  if (csv) *csv << "image,lambda,bpp,msssim,msssim_db,psnr\n";
  std::vector<RdPoint> pts;
  for (const auto& [name, img] : images) {
    RdPoint pt = evaluate_image(ps, cfg, img, name, lambda);
    if (csv)
      *csv << pt.image << "," << pt.lambda << "," << pt.bpp << "," << pt.msssim
           << "," << pt.msssim_db << "," << pt.psnr << "\n";
    pts.push_back(std::move(pt));
  }
  return pts;
}

}  // namespace gcm
