#pragma once

// Carryless 32-bit range coder with 16-bit frequency totals, plus quantized
// frequency tables for the conditional-Gaussian and factorized models. The
// decoder mirrors the encoder's integer arithmetic exactly, so encode/decode
// are bit-exact inverses on any platform.

#include <algorithm>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gcm/entropy.hpp"

namespace gcm {

struct CorruptStream : std::runtime_error {
  explicit CorruptStream(const std::string& m) : std::runtime_error(m) {}
};

namespace rc {
constexpr uint32_t kTop = 1u << 24;
constexpr uint32_t kBot = 1u << 16;
constexpr uint32_t kTotal = 1u << 16;
}  // namespace rc

class RangeEncoder {
 public:
  // Narrow the interval to [cum, cum+freq) / tot. tot must be <= 2^16.
  void encode(uint32_t cum, uint32_t freq, uint32_t tot = rc::kTotal) {
    low_ += cum * (range_ /= tot);
    range_ *= freq;
    normalize();
  }

  // Emit the two bytes that select the smallest multiple of 2^16 inside the
  // final interval. Interval width is >= 2^16 after normalization, so two
  // bytes always suffice; the decoder zero-pads past the end of the stream.
  std::vector<uint8_t> finish() {
    uint32_t v = (low_ + (rc::kBot - 1)) & ~(rc::kBot - 1);
    out_.push_back((uint8_t)(v >> 24));
    out_.push_back((uint8_t)(v >> 16));
    return std::move(out_);
  }

  size_t size_so_far() const { return out_.size(); }

 private:
  void normalize() {
    while ((low_ ^ (low_ + range_)) < rc::kTop ||
           (range_ < rc::kBot && ((range_ = (0u - low_) & (rc::kBot - 1)), true))) {
      out_.push_back((uint8_t)(low_ >> 24));
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  uint32_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  std::vector<uint8_t> out_;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t n) : buf_(data), n_(n) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
  }
  explicit RangeDecoder(const std::vector<uint8_t>& v)
      : RangeDecoder(v.data(), v.size()) {}

  // Returns the cumulative-frequency position of the next symbol.
  uint32_t decode_freq(uint32_t tot = rc::kTotal) {
    uint32_t f = (code_ - low_) / (range_ /= tot);
    if (f >= tot) throw CorruptStream("range decoder: position out of bounds");
    return f;
  }

  void decode_update(uint32_t cum, uint32_t freq) {
    low_ += cum * range_;
    range_ *= freq;
    while ((low_ ^ (low_ + range_)) < rc::kTop ||
           (range_ < rc::kBot && ((range_ = (0u - low_) & (rc::kBot - 1)), true))) {
      code_ = (code_ << 8) | next_byte();
      low_ <<= 8;
      range_ <<= 8;
    }
  }

 private:
  uint8_t next_byte() { return pos_ < n_ ? buf_[pos_++] : 0; }

  const uint8_t* buf_;
  size_t n_;
  size_t pos_ = 0;
  uint32_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

// ---- quantized frequency tables -----------------------------------------
// Alphabet: integers in [-127, 127] (255 symbols) plus an escape symbol that
// is followed by a 32-bit raw value coded as four uniform bytes. Every symbol
// gets width >= 1 so it stays codable; widths sum to exactly 2^16.

struct QuantizedCdf {
  static constexpr int kMinVal = -127;
  static constexpr int kMaxVal = 127;
  static constexpr size_t kSymbols = 256;  // 255 values + escape
  static constexpr size_t kEscape = 255;

  std::array<uint32_t, kSymbols + 1> cum{};  // cum[0]=0 .. cum[256]=2^16

  // probs[0..254] = mass of values -127..127, probs[255] = escape mass.
  static QuantizedCdf build(const std::array<double, kSymbols>& probs) {
    std::array<uint64_t, kSymbols> w{};
    uint64_t sum = 0;
    for (size_t i = 0; i < kSymbols; ++i) {
      double p = probs[i] < 0 ? 0 : probs[i];
      uint64_t wi = (uint64_t)std::llround(p * (double)rc::kTotal);
      if (wi < 1) wi = 1;
      w[i] = wi;
      sum += wi;
    }
    while (sum > rc::kTotal) {
      size_t imax = 0;
      for (size_t i = 1; i < kSymbols; ++i)
        if (w[i] > w[imax]) imax = i;
      uint64_t take = std::min(sum - rc::kTotal, w[imax] - 1);
      w[imax] -= take;
      sum -= take;
    }
    if (sum < rc::kTotal) {
      size_t imax = 0;
      for (size_t i = 1; i < kSymbols; ++i)
        if (w[i] > w[imax]) imax = i;
      w[imax] += rc::kTotal - sum;
    }
    QuantizedCdf q;
    q.cum[0] = 0;
    for (size_t i = 0; i < kSymbols; ++i) q.cum[i + 1] = q.cum[i] + (uint32_t)w[i];
    return q;
  }

  uint32_t freq(size_t sym) const { return cum[sym + 1] - cum[sym]; }
  uint32_t min_width() const {
    uint32_t m = rc::kTotal;
    for (size_t i = 0; i < kSymbols; ++i) m = std::min(m, freq(i));
    return m;
  }

  static size_t sym_of(int32_t v) { return (size_t)(v - kMinVal); }
  static int32_t val_of(size_t sym) { return (int32_t)sym + kMinVal; }

  size_t find(uint32_t f) const {
    // largest i with cum[i] <= f
    size_t i = (size_t)(std::upper_bound(cum.begin(), cum.end(), f) - cum.begin());
    return i - 1;
  }

  void encode_value(RangeEncoder& enc, int32_t v) const {
    if (v >= kMinVal && v <= kMaxVal) {
      size_t s = sym_of(v);
      enc.encode(cum[s], freq(s));
    } else {
      enc.encode(cum[kEscape], freq(kEscape));
      uint32_t raw = (uint32_t)v;
      for (int sh = 24; sh >= 0; sh -= 8) {
        uint32_t b = (raw >> sh) & 0xFF;
        enc.encode(b << 8, 1u << 8);  // uniform byte
      }
    }
  }

  int32_t decode_value(RangeDecoder& dec) const {
    size_t s = find(dec.decode_freq());
    dec.decode_update(cum[s], freq(s));
    if (s != kEscape) return val_of(s);
    uint32_t raw = 0;
    for (int i = 0; i < 4; ++i) {
      uint32_t b = dec.decode_freq() >> 8;
      dec.decode_update(b << 8, 1u << 8);
      raw = (raw << 8) | b;
    }
    return (int32_t)raw;
  }
};

// ---- parameter snapping for the Gaussian tables --------------------------
// The mean snaps to a 1/64 grid and the scale to a 64-entry geometric table,
// so both sides of the codec derive identical frequency tables from slightly
// different floating-point predictions.

constexpr int kMuGrid = 64;
constexpr size_t kSigmaLevels = 64;
constexpr double kSigmaTableMax = 64.0;

inline const std::array<double, kSigmaLevels>& sigma_table() {
  static const std::array<double, kSigmaLevels> t = [] {
    std::array<double, kSigmaLevels> a{};
    double ratio = kSigmaTableMax / kSigmaMin;
    for (size_t i = 0; i < kSigmaLevels; ++i)
      a[i] = kSigmaMin * std::pow(ratio, (double)i / (double)(kSigmaLevels - 1));
    return a;
  }();
  return t;
}

inline size_t snap_sigma_index(double sigma) {
  if (sigma < kSigmaMin) sigma = kSigmaMin;
  if (sigma > kSigmaTableMax) sigma = kSigmaTableMax;
  double ratio = kSigmaTableMax / kSigmaMin;
  double x = (double)(kSigmaLevels - 1) * std::log(sigma / kSigmaMin) / std::log(ratio);
  long i = std::lround(x);
  if (i < 0) i = 0;
  if (i >= (long)kSigmaLevels) i = kSigmaLevels - 1;
  return (size_t)i;
}

struct SnappedMu {
  int64_t whole;  // integer part, subtracted from the coded value
  int frac;       // remainder on the 1/64 grid, in [0, 64)
};

inline SnappedMu snap_mu(double mu) {
  int64_t q = (int64_t)std::llround(mu * kMuGrid);
  int64_t whole = q >= 0 ? q / kMuGrid : -(((-q) + kMuGrid - 1) / kMuGrid);
  int frac = (int)(q - whole * kMuGrid);
  return {whole, frac};
}

// Caches one table per (mu fraction, sigma level) pair; symbols are coded as
// v - whole(mu), so the residual alphabet is centered near zero.
class GaussianCoder {
 public:
  const QuantizedCdf& table(int frac, size_t sidx) {
    size_t key = (size_t)frac * kSigmaLevels + sidx;
    if (!built_[key]) {
      std::array<double, QuantizedCdf::kSymbols> probs{};
      double mu = (double)frac / kMuGrid;
      double sigma = sigma_table()[sidx];
      double in_range = 0;
      for (int v = QuantizedCdf::kMinVal; v <= QuantizedCdf::kMaxVal; ++v) {
        double p = gaussian_prob((double)v, mu, sigma);
        probs[QuantizedCdf::sym_of(v)] = p;
        in_range += p;
      }
      probs[QuantizedCdf::kEscape] = std::max(1.0 - in_range, kTailFloor);
      tables_[key] = QuantizedCdf::build(probs);
      built_[key] = true;
    }
    return tables_[key];
  }

  void encode(RangeEncoder& enc, int64_t v, double mu, double sigma) {
    SnappedMu m = snap_mu(mu);
    table(m.frac, snap_sigma_index(sigma)).encode_value(enc, (int32_t)(v - m.whole));
  }

  int64_t decode(RangeDecoder& dec, double mu, double sigma) {
    SnappedMu m = snap_mu(mu);
    return table(m.frac, snap_sigma_index(sigma)).decode_value(dec) + m.whole;
  }

 private:
  std::vector<QuantizedCdf> tables_ =
      std::vector<QuantizedCdf>(kMuGrid * kSigmaLevels);
  std::vector<uint8_t> built_ = std::vector<uint8_t>(kMuGrid * kSigmaLevels, 0);
};

// Per-channel tables for the factorized prior; values are coded directly.
class FactorizedCoder {
 public:
  FactorizedCoder(const ParamStore& ps, const std::string& prefix, size_t channels)
      : tables_(channels) {
    for (size_t c = 0; c < channels; ++c) {
      std::array<double, QuantizedCdf::kSymbols> probs{};
      double in_range = 0;
      for (int v = QuantizedCdf::kMinVal; v <= QuantizedCdf::kMaxVal; ++v) {
        double p = factorized_prob(ps, prefix, c, (double)v);
        probs[QuantizedCdf::sym_of(v)] = p;
        in_range += p;
      }
      probs[QuantizedCdf::kEscape] = std::max(1.0 - in_range, kTailFloor);
      tables_[c] = QuantizedCdf::build(probs);
    }
  }

  void encode(RangeEncoder& enc, size_t c, int64_t v) const {
    tables_[c].encode_value(enc, (int32_t)v);
  }
  int64_t decode(RangeDecoder& dec, size_t c) const {
    return tables_[c].decode_value(dec);
  }
  const QuantizedCdf& table(size_t c) const { return tables_[c]; }

 private:
  std::vector<QuantizedCdf> tables_;
};

}  // namespace gcm
