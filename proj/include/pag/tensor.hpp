#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pag {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Dims = std::vector<std::size_t>;

inline std::string dims_to_string(const Dims& dims) {
  std::ostringstream oss;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) oss << 'x';
    oss << dims[i];
  }
  return oss.str();
}

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

// Dense row-major array of doubles. Feature maps are laid out C x H x W,
// spatial maps H x W, scalars have dims {1}.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Dims dims, double fill = 0.0)
      : dims_(std::move(dims)), data_(dims_product(dims_), fill) {
    validate_dims();
  }

  Tensor(Dims dims, std::vector<double> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims();
    if (data_.size() != dims_product(dims_)) {
      throw Error("tensor data length " + std::to_string(data_.size()) +
                  " does not match dims " + dims_to_string(dims_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // C x H x W accessors.
  std::size_t channels() const { return rank() == 3 ? dims_[0] : 1; }
  std::size_t height() const { return dims_[rank() - 2]; }
  std::size_t width() const { return dims_[rank() - 1]; }

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * height() + y) * width() + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * height() + y) * width() + x];
  }
  double& at(std::size_t y, std::size_t x) { return data_[y * width() + x]; }
  double at(std::size_t y, std::size_t x) const {
    return data_[y * width() + x];
  }

  double item() const {
    if (data_.size() != 1) {
      throw Error("item() on non-scalar tensor of dims " + dims_to_string(dims_));
    }
    return data_[0];
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  double mean() const { return data_.empty() ? 0.0 : sum() / double(data_.size()); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Dims dims) const { return Tensor(std::move(dims), data_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void validate_dims() const {
    if (dims_.empty()) throw Error("tensor must have rank >= 1");
    for (auto d : dims_) {
      if (d == 0) throw Error("tensor extents must be positive, got " + dims_to_string(dims_));
    }
  }

  Dims dims_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw Error("max_abs_diff: dims " + dims_to_string(a.dims()) + " vs " +
                dims_to_string(b.dims()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// PTSR binary format: "PTSR", u8 version (1), u8 rank, rank x u32 LE extents,
// then row-major f64 LE values.

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw Error("PTSR: unexpected end of stream");
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline constexpr std::uint8_t kPtsrVersion = 1;

inline void write_ptsr(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw Error("PTSR: rank exceeds 255");
  os.write("PTSR", 4);
  detail::write_le<std::uint8_t>(os, kPtsrVersion);
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.dims()) {
    if (d > 0xFFFFFFFFu) throw Error("PTSR: extent exceeds u32");
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  for (double v : t.data()) detail::write_le<double>(os, v);
  if (!os) throw Error("PTSR: write failed");
}

inline Tensor read_ptsr(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "PTSR", 4) != 0) {
    throw Error("PTSR: bad magic");
  }
  auto version = detail::read_le<std::uint8_t>(is);
  if (version != kPtsrVersion) {
    throw Error("PTSR: unsupported version " + std::to_string(version));
  }
  auto rank = detail::read_le<std::uint8_t>(is);
  if (rank == 0) throw Error("PTSR: rank 0");
  Dims dims(rank);
  for (auto& d : dims) d = detail::read_le<std::uint32_t>(is);
  Tensor t(dims);
  for (auto& v : t.storage()) v = detail::read_le<double>(is);
  return t;
}

inline void save_ptsr(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_ptsr(os, t);
}

inline Tensor load_ptsr(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return read_ptsr(is);
}

}  // namespace pag
