#pragma once

// Dense row-major tensor of doubles with shape metadata, plus the LTNS
// binary container used for checkpoints.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcm {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const std::vector<size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count_(shape_), fill) {}
  Tensor(std::vector<size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count_(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  size_t dim(size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  double& at(size_t i) {
    if (i >= data_.size()) throw ShapeError("flat index out of range");
    return data_[i];
  }
  double at(size_t i) const {
    if (i >= data_.size()) throw ShapeError("flat index out of range");
    return data_[i];
  }
  double& at(std::initializer_list<size_t> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<size_t> idx) const { return data_[offset(idx)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(std::vector<size_t> shape) const {
    if (count_(shape) != data_.size())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                       " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  static size_t count(const std::vector<size_t>& s) { return count_(s); }

 private:
  size_t offset(std::initializer_list<size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
    size_t off = 0, d = 0;
    for (size_t i : idx) {
      if (i >= shape_[d]) throw ShapeError("index out of range in dim " + std::to_string(d));
      off = off * shape_[d] + i;
      ++d;
    }
    return off;
  }
  static size_t count_(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t e : s) {
      if (e == 0) throw ShapeError("zero extent in shape " + shape_str(s));
      n *= e;
    }
    return n;
  }

  std::vector<size_t> shape_;
  std::vector<double> data_;
};

// --- LTNS container -------------------------------------------------------
// magic "LTNS" | version u32 | rank u32 | extents u64[rank] | f64 payload,
// all little-endian.

namespace detail {
template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) b[i] = (unsigned char)((uint64_t)v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}
template <typename T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  is.read(reinterpret_cast<char*>(b), sizeof(T));
  if (!is) throw std::runtime_error("LTNS: truncated stream");
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= (uint64_t)b[i] << (8 * i);
  return (T)v;
}
}  // namespace detail

inline void save_tensor(std::ostream& os, const Tensor& t) {
  os.write("LTNS", 4);
  detail::put_le<uint32_t>(os, 1);
  detail::put_le<uint32_t>(os, (uint32_t)t.rank());
  for (size_t e : t.shape()) detail::put_le<uint64_t>(os, e);
  for (size_t i = 0; i < t.size(); ++i) {
    uint64_t bits;
    double d = t[i];
    std::memcpy(&bits, &d, 8);
    detail::put_le<uint64_t>(os, bits);
  }
}

inline Tensor load_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LTNS", 4) != 0)
    throw std::runtime_error("LTNS: bad magic");
  uint32_t ver = detail::get_le<uint32_t>(is);
  if (ver != 1) throw std::runtime_error("LTNS: unsupported version");
  uint32_t rank = detail::get_le<uint32_t>(is);
  if (rank > 8) throw std::runtime_error("LTNS: implausible rank");
  std::vector<size_t> shape(rank);
  for (auto& e : shape) e = (size_t)detail::get_le<uint64_t>(is);
  Tensor t(shape);
  for (size_t i = 0; i < t.size(); ++i) {
    uint64_t bits = detail::get_le<uint64_t>(is);
    double d;
    std::memcpy(&d, &bits, 8);
    t[i] = d;
  }
  return t;
}

inline void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  save_tensor(f, t);
}

inline Tensor load_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return load_tensor(f);
}

}  // namespace gcm
