#pragma once

// Full compression model: analysis/synthesis transforms, hyper transforms,
// latent refinement, the conditional entropy stage, and the serialized
// bitstream and checkpoint formats.

#include "gcm/context_model.hpp"
#include "gcm/image.hpp"
#include "gcm/metrics.hpp"
#include "gcm/range_coder.hpp"

namespace gcm {

inline const std::array<double, 5> kLambdaPresets = {2.0, 8.0, 32.0, 128.0, 384.0};
constexpr uint8_t kLambdaUnset = 255;
constexpr size_t kPadMultiple = 64;  // four 2x stages, then two more in the hyper path
constexpr uint8_t kStreamVersion = 1;

struct HashMismatch : std::runtime_error {
  explicit HashMismatch(const std::string& m) : std::runtime_error(m) {}
};

struct ModelConfig {
  size_t N = 48;   // transform width
  size_t M = 32;   // latent channels
  size_t Mz = 48;  // hyper latent channels
  ContextConfig ctx;
  bool plain_blocks = false;  // ReLU residual variant for comparisons

  size_t zp_channels() const { return 2 * M; }

  std::string serialize() const {
    std::ostringstream os;
    os << "N=" << N << ";M=" << M << ";Mz=" << Mz << ";layers=" << ctx.layers
       << ";k=" << ctx.k << ";n=" << ctx.n
       << ";blocks=" << (plain_blocks ? "relu" : "gdn");
    return os.str();
  }

  static ModelConfig parse(const std::string& s) {
    ModelConfig c;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ';')) {
      auto eq = item.find('=');
      if (eq == std::string::npos) throw std::runtime_error("bad config: " + item);
      std::string key = item.substr(0, eq), val = item.substr(eq + 1);
      if (key == "N") c.N = std::stoul(val);
      else if (key == "M") c.M = std::stoul(val);
      else if (key == "Mz") c.Mz = std::stoul(val);
      else if (key == "layers") c.ctx.layers = std::stoul(val);
      else if (key == "k") c.ctx.k = std::stoul(val);
      else if (key == "n") c.ctx.n = std::stoul(val);
      else if (key == "blocks") c.plain_blocks = (val == "relu");
      else throw std::runtime_error("bad config key: " + key);
    }
    return c;
  }
};

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t config_hash(const ModelConfig& c) { return fnv1a(c.serialize()); }

// ---- parameter initialization -------------------------------------------

inline void init_codec(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  validate(cfg.ctx);
  size_t N = cfg.N, M = cfg.M, Mz = cfg.Mz;
  // analysis: four 5x5 stride-2 stages with GDN, residual blocks mid-stack
  init_conv(ps, "enc.c1", {N, 3, 5, 5}, rng);
  init_bias(ps, "enc.b1", N);
  init_gdn(ps, "enc.gdn1", N);
  init_conv(ps, "enc.c2", {N, N, 5, 5}, rng);
  init_bias(ps, "enc.b2", N);
  init_gdn(ps, "enc.gdn2", N);
  init_resblock(ps, "enc.rb1", N, rng);
  init_conv(ps, "enc.c3", {N, N, 5, 5}, rng);
  init_bias(ps, "enc.b3", N);
  init_gdn(ps, "enc.gdn3", N);
  init_resblock(ps, "enc.rb2", N, rng);
  init_conv(ps, "enc.c4", {M, N, 5, 5}, rng);
  init_bias(ps, "enc.b4", M);
  init_gdn(ps, "enc.gdn4", M);
  // hyper analysis: two 3x3 stride-2 stages
  init_conv(ps, "henc.c1", {Mz, M, 3, 3}, rng);
  init_bias(ps, "henc.b1", Mz);
  init_prelu(ps, "henc.a1", Mz);
  init_conv(ps, "henc.c2", {Mz, Mz, 3, 3}, rng);
  init_bias(ps, "henc.b2", Mz);
  // hyper synthesis: mirrored transposed convs, widened to 2M at the output
  init_conv(ps, "hdec.c1", {Mz, Mz, 3, 3}, rng);
  init_bias(ps, "hdec.b1", Mz);
  init_prelu(ps, "hdec.a1", Mz);
  init_conv(ps, "hdec.c2", {Mz, 2 * M, 3, 3}, rng);
  init_bias(ps, "hdec.b2", 2 * M);
  // latent refinement: projection plus three residual units
  init_conv(ps, "icn.proj", {M, 2 * M, 3, 3}, rng);
  init_bias(ps, "icn.pb", M);
  for (int u = 1; u <= 3; ++u) {
    std::string b = "icn.u" + std::to_string(u);
    init_conv(ps, b + ".c1", {M, M, 3, 3}, rng);
    init_bias(ps, b + ".b1", M);
    init_prelu(ps, b + ".a", M);
    init_conv(ps, b + ".c2", {M, M, 3, 3}, rng);
    init_bias(ps, b + ".b2", M);
  }
  // synthesis: mirror of analysis on concat(latent, refinement) = 2M channels
  init_conv(ps, "dec.c1", {2 * M, N, 5, 5}, rng);  // transposed: [Cin,Cout,kh,kw]
  init_bias(ps, "dec.b1", N);
  init_gdn(ps, "dec.igdn1", N);
  init_resblock(ps, "dec.rb1", N, rng);
  init_conv(ps, "dec.c2", {N, N, 5, 5}, rng);
  init_bias(ps, "dec.b2", N);
  init_gdn(ps, "dec.igdn2", N);
  init_resblock(ps, "dec.rb2", N, rng);
  init_conv(ps, "dec.c3", {N, N, 5, 5}, rng);
  init_bias(ps, "dec.b3", N);
  init_gdn(ps, "dec.igdn3", N);
  init_conv(ps, "dec.c4", {N, 3, 5, 5}, rng);
  init_bias(ps, "dec.b4", 3);
  // entropy side
  init_context(ps, cfg.ctx, cfg.zp_channels(), rng);
  init_factorized(ps, "prior", Mz);
}

// ---- forward transforms --------------------------------------------------

namespace detail {
inline Var block(Ctx& c, const ModelConfig& cfg, const std::string& prefix, Var x) {
  return cfg.plain_blocks ? plainblock_relu(c, prefix, x)
                          : resblock_gdn(c, prefix, x);
}
}  // namespace detail

// [3,H,W] -> [M,H/16,W/16]
inline Var analysis(Ctx& c, const ModelConfig& cfg, Var x) {
  Var t = conv2d(x, c.p("enc.c1"), 2, PadSpec(2));
  t = gdn(c, "enc.gdn1", bias_add(t, c.p("enc.b1")));
  t = conv2d(t, c.p("enc.c2"), 2, PadSpec(2));
  t = gdn(c, "enc.gdn2", bias_add(t, c.p("enc.b2")));
  t = detail::block(c, cfg, "enc.rb1", t);
  t = conv2d(t, c.p("enc.c3"), 2, PadSpec(2));
  t = gdn(c, "enc.gdn3", bias_add(t, c.p("enc.b3")));
  t = detail::block(c, cfg, "enc.rb2", t);
  t = conv2d(t, c.p("enc.c4"), 2, PadSpec(2));
  return gdn(c, "enc.gdn4", bias_add(t, c.p("enc.b4")));
}

// [M,h,w] -> [Mz,h/4,w/4]
inline Var hyper_analysis(Ctx& c, const ModelConfig& cfg, Var y) {
  (void)cfg;
  Var t = conv2d(y, c.p("henc.c1"), 2, PadSpec(1));
  t = prelu(bias_add(t, c.p("henc.b1")), c.p("henc.a1"));
  t = conv2d(t, c.p("henc.c2"), 2, PadSpec(1));
  return bias_add(t, c.p("henc.b2"));
}

// [Mz,h/4,w/4] -> [2M,h,w]
inline Var hyper_synthesis(Ctx& c, const ModelConfig& cfg, Var zhat) {
  (void)cfg;
  Var t = conv2d_transpose(zhat, c.p("hdec.c1"), 2, PadSpec(1, 0));
  t = prelu(bias_add(t, c.p("hdec.b1")), c.p("hdec.a1"));
  t = conv2d_transpose(t, c.p("hdec.c2"), 2, PadSpec(1, 0));
  return bias_add(t, c.p("hdec.b2"));
}

// [2M,h,w] -> [M,h,w]
inline Var latent_refine(Ctx& c, const ModelConfig& cfg, Var zp) {
  (void)cfg;
  Var u = bias_add(conv2d(zp, c.p("icn.proj"), 1, PadSpec(1)), c.p("icn.pb"));
  for (int i = 1; i <= 3; ++i) {
    std::string b = "icn.u" + std::to_string(i);
    Var t = prelu(bias_add(conv2d(u, c.p(b + ".c1"), 1, PadSpec(1)), c.p(b + ".b1")),
                  c.p(b + ".a"));
    t = bias_add(conv2d(t, c.p(b + ".c2"), 1, PadSpec(1)), c.p(b + ".b2"));
    u = add(u, t);
  }
  return u;
}

// concat([M], [M]) -> [3,16h,16w]; output is unclamped (clamp at eval time)
inline Var synthesis(Ctx& c, const ModelConfig& cfg, Var yhat, Var refined) {
  Var t = concat0({yhat, refined});
  t = conv2d_transpose(t, c.p("dec.c1"), 2, PadSpec(2, 1));
  t = igdn(c, "dec.igdn1", bias_add(t, c.p("dec.b1")));
  t = detail::block(c, cfg, "dec.rb1", t);
  t = conv2d_transpose(t, c.p("dec.c2"), 2, PadSpec(2, 1));
  t = igdn(c, "dec.igdn2", bias_add(t, c.p("dec.b2")));
  t = detail::block(c, cfg, "dec.rb2", t);
  t = conv2d_transpose(t, c.p("dec.c3"), 2, PadSpec(2, 1));
  t = igdn(c, "dec.igdn3", bias_add(t, c.p("dec.b3")));
  t = conv2d_transpose(t, c.p("dec.c4"), 2, PadSpec(2, 1));
  return bias_add(t, c.p("dec.b4"));
}

// ---- training-graph assembly ---------------------------------------------

struct RdTerms {
  Var xhat;         // unclamped reconstruction
  Var dist;         // 1 - ms_ssim
  Var bits_latent;  // conditional-Gaussian bits for the main latent
  Var bits_hyper;   // factorized bits for the hyper latent
};

// One end-to-end differentiable pass with additive-noise quantization.
inline RdTerms rd_forward(Ctx& c, const ModelConfig& cfg, const Tensor& img,
                          Rng& noise_rng) {
  Graph& g = c.g;
  Var x = g.input(img);
  Var y = analysis(c, cfg, x);
  Var z = hyper_analysis(c, cfg, y);
  Tensor ny(g.val(y).shape());
  for (size_t i = 0; i < ny.size(); ++i) ny[i] = noise_rng.centered();
  Tensor nz(g.val(z).shape());
  for (size_t i = 0; i < nz.size(); ++i) nz[i] = noise_rng.centered();
  Var ytilde = add(y, g.input(ny));
  Var ztilde = add(z, g.input(nz));
  Var zp = hyper_synthesis(c, cfg, ztilde);
  auto [mu, sigma] = predict_params(c, cfg.ctx, ytilde, zp);
  Var by = rate_y(ytilde, mu, sigma);
  Var bz = rate_z(c, "prior", ztilde);
  Var xhat = synthesis(c, cfg, ytilde, latent_refine(c, cfg, zp));
  Var d = sub(g.input(Tensor({1}, 1.0)), ms_ssim(g, x, xhat));
  return {xhat, d, by, bz};
}

// ---- bitstream -----------------------------------------------------------

namespace detail {
inline void put_u16(std::vector<uint8_t>& v, uint16_t x) {
  v.push_back((uint8_t)(x & 0xFF));
  v.push_back((uint8_t)(x >> 8));
}
inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back((uint8_t)(x >> (8 * i)));
}
inline void put_u64(std::vector<uint8_t>& v, uint64_t x) {
  for (int i = 0; i < 8; ++i) v.push_back((uint8_t)(x >> (8 * i)));
}

struct ByteReader {
  const std::vector<uint8_t>& v;
  size_t pos = 0;
  uint8_t u8() {
    if (pos >= v.size()) throw CorruptStream("truncated stream");
    return v[pos++];
  }
  uint16_t u16() { uint16_t a = u8(); return (uint16_t)(a | ((uint16_t)u8() << 8)); }
  uint32_t u32() {
    uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= (uint32_t)u8() << (8 * i);
    return x;
  }
  uint64_t u64() {
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= (uint64_t)u8() << (8 * i);
    return x;
  }
};
}  // namespace detail

struct StreamInfo {
  uint8_t version;
  uint64_t hash;
  size_t width, height;
  uint8_t lambda_index;
  size_t z_bytes, y_bytes;
};

struct CompressStats {
  std::vector<uint8_t> bytes;
  size_t y_bytes, z_bytes;
  double bpp;  // coded bits over true pixels
};

inline CompressStats compress(ParamStore& ps, const ModelConfig& cfg,
                              const Tensor& img, uint8_t lambda_index = kLambdaUnset) {
  size_t W = img.dim(2), H = img.dim(1);
  Tensor x = reflect_pad_to(img, kPadMultiple);

  Tensor yhat, zhat;
  {
    Graph g;
    Ctx c{g, ps};
    Var y = analysis(c, cfg, g.input(x));
    Var z = hyper_analysis(c, cfg, y);
    yhat = round_quantize(g.val(y));
    zhat = round_quantize(g.val(z));
  }
  Tensor zp;
  {
    Graph g;
    Ctx c{g, ps};
    zp = g.val(hyper_synthesis(c, cfg, g.input(zhat)));
  }
  auto [mu, sigma] = predict_params_t(ps, cfg.ctx, yhat, zp);

  RangeEncoder zenc;
  FactorizedCoder fc(ps, "prior", cfg.Mz);
  size_t zinner = zhat.dim(1) * zhat.dim(2);
  for (size_t c = 0; c < cfg.Mz; ++c)
    for (size_t i = 0; i < zinner; ++i)
      fc.encode(zenc, c, (int64_t)std::llround(zhat[c * zinner + i]));
  std::vector<uint8_t> zseg = zenc.finish();

  RangeEncoder yenc;
  GaussianCoder gc;
  for (size_t i = 0; i < yhat.size(); ++i)
    gc.encode(yenc, (int64_t)std::llround(yhat[i]), mu[i], sigma[i]);
  std::vector<uint8_t> yseg = yenc.finish();

  std::vector<uint8_t> out = {'G', 'C', 'M', 'C'};
  out.push_back(kStreamVersion);
  detail::put_u64(out, config_hash(cfg));
  detail::put_u16(out, (uint16_t)W);
  detail::put_u16(out, (uint16_t)H);
  out.push_back(lambda_index);
  detail::put_u32(out, (uint32_t)zseg.size());
  out.insert(out.end(), zseg.begin(), zseg.end());
  out.insert(out.end(), yseg.begin(), yseg.end());

  CompressStats st;
  st.y_bytes = yseg.size();
  st.z_bytes = zseg.size();
  st.bpp = 8.0 * (double)(yseg.size() + zseg.size()) / (double)(W * H);
  st.bytes = std::move(out);
  return st;
}

inline StreamInfo parse_header(const std::vector<uint8_t>& bytes) {
  detail::ByteReader r{bytes};
  if (bytes.size() < 22 || r.u8() != 'G' || r.u8() != 'C' || r.u8() != 'M' ||
      r.u8() != 'C')
    throw CorruptStream("bad magic");
  StreamInfo s;
  s.version = r.u8();
  if (s.version != kStreamVersion) throw CorruptStream("unsupported version");
  s.hash = r.u64();
  s.width = r.u16();
  s.height = r.u16();
  s.lambda_index = r.u8();
  s.z_bytes = r.u32();
  if (r.pos + s.z_bytes > bytes.size()) throw CorruptStream("truncated hyper segment");
  s.y_bytes = bytes.size() - r.pos - s.z_bytes;
  if (s.width == 0 || s.height == 0) throw CorruptStream("empty image");
  return s;
}

inline Tensor decompress(ParamStore& ps, const ModelConfig& cfg,
                         const std::vector<uint8_t>& bytes,
                         StreamInfo* info_out = nullptr) {
  StreamInfo s = parse_header(bytes);
  if (s.hash != config_hash(cfg))
    throw HashMismatch("stream was produced by a different model configuration");
  if (info_out) *info_out = s;

  size_t Hp = (s.height + kPadMultiple - 1) / kPadMultiple * kPadMultiple;
  size_t Wp = (s.width + kPadMultiple - 1) / kPadMultiple * kPadMultiple;
  size_t Hy = Hp / 16, Wy = Wp / 16;
  size_t Hz = Hy / 4, Wz = Wy / 4;

  const size_t zoff = 22;
  RangeDecoder zdec(bytes.data() + zoff, s.z_bytes);
  FactorizedCoder fc(ps, "prior", cfg.Mz);
  Tensor zhat({cfg.Mz, Hz, Wz});
  for (size_t c = 0; c < cfg.Mz; ++c)
    for (size_t i = 0; i < Hz * Wz; ++i)
      zhat[c * Hz * Wz + i] = (double)fc.decode(zdec, c);

  Tensor zp;
  {
    Graph g;
    Ctx c{g, ps};
    zp = g.val(hyper_synthesis(c, cfg, g.input(zhat)));
  }

  RangeDecoder ydec(bytes.data() + zoff + s.z_bytes, s.y_bytes);
  GaussianCoder gc;
  SerialDecoder sd(ps, cfg.ctx, cfg.M, Hy, Wy, zp);
  for (size_t c = 0; c < cfg.M; ++c)
    for (size_t h = 0; h < Hy; ++h)
      for (size_t w = 0; w < Wy; ++w) {
        auto [mu, sigma] = sd.step(c, h, w);
        sd.push((double)gc.decode(ydec, mu, sigma));
      }

  Tensor xhat;
  {
    Graph g;
    Ctx c{g, ps};
    Var yv = g.input(sd.decoded());
    xhat = g.val(synthesis(c, cfg, yv, latent_refine(c, cfg, g.input(zp))));
  }
  return crop_to(clamp01(xhat), s.height, s.width);
}

// ---- checkpoints ---------------------------------------------------------

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const ParamStore& ps) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write("LTCK", 4);
    uint32_t ver = 1;
    f.write((const char*)&ver, 4);
    std::string cstr = cfg.serialize();
    uint32_t clen = (uint32_t)cstr.size();
    f.write((const char*)&clen, 4);
    f.write(cstr.data(), clen);
    uint32_t count = (uint32_t)ps.all().size();
    f.write((const char*)&count, 4);
    for (const auto& [name, t] : ps.all()) {
      uint32_t nlen = (uint32_t)name.size();
      f.write((const char*)&nlen, 4);
      f.write(name.data(), nlen);
      save_tensor(f, t);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

inline ModelConfig load_checkpoint(const std::string& path, ParamStore& ps) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != "LTCK")
    throw std::runtime_error(path + ": not a checkpoint");
  uint32_t ver = 0;
  f.read((char*)&ver, 4);
  if (ver != 1) throw std::runtime_error(path + ": unsupported checkpoint version");
  uint32_t clen = 0;
  f.read((char*)&clen, 4);
  std::string cstr(clen, '\0');
  f.read(cstr.data(), clen);
  uint32_t count = 0;
  f.read((char*)&count, 4);
  if (!f) throw std::runtime_error(path + ": truncated checkpoint");
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t nlen = 0;
    f.read((char*)&nlen, 4);
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    if (!f) throw std::runtime_error(path + ": truncated checkpoint");
    Tensor t = load_tensor(f);
    if (ps.has(name))
      ps[name] = std::move(t);
    else
      ps.add(name, std::move(t));
  }
  return ModelConfig::parse(cstr);
}

}  // namespace gcm
