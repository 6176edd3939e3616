#pragma once

// Binary PPM (P6, maxval 255) input/output and reflect padding. Images are
// [3,H,W] tensors with values in [0,1].

#include <fstream>
#include <sstream>

#include "gcm/tensor.hpp"

namespace gcm {

struct ImageError : std::runtime_error {
  explicit ImageError(const std::string& m) : std::runtime_error(m) {}
};

inline Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw ImageError(path + ": not a binary PPM (P6)");
  auto next_int = [&]() -> long {
    // skip whitespace and '#' comments between header fields
    while (true) {
      int c = f.peek();
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
    long v;
    if (!(f >> v)) throw ImageError(path + ": bad PPM header");
    return v;
  };
  long W = next_int(), H = next_int(), maxval = next_int();
  if (W <= 0 || H <= 0 || maxval != 255)
    throw ImageError(path + ": unsupported PPM dimensions or maxval");
  f.get();  // single whitespace after maxval
  std::vector<unsigned char> raw((size_t)W * H * 3);
  f.read((char*)raw.data(), (std::streamsize)raw.size());
  if ((size_t)f.gcount() != raw.size()) throw ImageError(path + ": truncated PPM");
  Tensor img({3, (size_t)H, (size_t)W});
  for (size_t h = 0; h < (size_t)H; ++h)
    for (size_t w = 0; w < (size_t)W; ++w)
      for (size_t c = 0; c < 3; ++c)
        img.at({c, h, w}) = raw[(h * W + w) * 3 + c] / 255.0;
  return img;
}

inline void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ImageError("write_ppm: expected [3,H,W]");
  size_t H = img.dim(1), W = img.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot write " + path);
  f << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> raw(W * H * 3);
  for (size_t h = 0; h < H; ++h)
    for (size_t w = 0; w < W; ++w)
      for (size_t c = 0; c < 3; ++c) {
        double v = img.at({c, h, w});
        long q = std::lround(v * 255.0);
        raw[(h * W + w) * 3 + c] = (unsigned char)std::clamp(q, 0l, 255l);
      }
  f.write((char*)raw.data(), (std::streamsize)raw.size());
}

// Reflect-pad the right and bottom edges so both sides are multiples of m.
inline Tensor reflect_pad_to(const Tensor& img, size_t m) {
  size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  size_t Hp = (H + m - 1) / m * m;
  size_t Wp = (W + m - 1) / m * m;
  if (Hp == H && Wp == W) return img;
  auto reflect = [](size_t i, size_t n) {
    if (i < n) return i;
    size_t over = i - (n - 1);
    size_t r = (n - 1 >= over) ? n - 1 - over : 0;  // mirror without edge repeat
    return r;
  };
  Tensor out({C, Hp, Wp});
  for (size_t c = 0; c < C; ++c)
    for (size_t h = 0; h < Hp; ++h)
      for (size_t w = 0; w < Wp; ++w)
        out.at({c, h, w}) = img.at({c, reflect(h, H), reflect(w, W)});
  return out;
}

inline Tensor crop_to(const Tensor& img, size_t H, size_t W) {
  size_t C = img.dim(0);
  Tensor out({C, H, W});
  for (size_t c = 0; c < C; ++c)
    for (size_t h = 0; h < H; ++h)
      for (size_t w = 0; w < W; ++w) out.at({c, h, w}) = img.at({c, h, w});
  return out;
}

inline Tensor clamp01(const Tensor& t) {
  Tensor out = t;
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
  return out;
}

}  // namespace gcm
