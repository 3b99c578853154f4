#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "medix/common.hpp"

namespace medix {

using Shape = std::vector<Index>;

inline Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense n-dimensional array over a contiguous row-major buffer. The buffer is
/// an Eigen array, so elementwise math stays expression-based; matrix views
/// are made on demand with `matrix()`.
template <typename Scalar>
class Tensor {
 public:
  using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<MatrixRM>;
  using ConstMatrixMap = Eigen::Map<const MatrixRM>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = ArrayX::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, ArrayX data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    require(data_.size() == shape_size(shape_), ErrorKind::shape,
            "tensor data length " + std::to_string(data_.size()) + " != product of dims " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Tensor t(std::move(shape));
    require(static_cast<Index>(values.size()) == t.size(), ErrorKind::shape, "initializer size mismatch");
    Index i = 0;
    for (Scalar v : values) t.data_[i++] = v;
    return t;
  }

  static Tensor from(Shape shape, const std::vector<Scalar>& values) {
    Tensor t(std::move(shape));
    require(static_cast<Index>(values.size()) == t.size(), ErrorKind::shape, "value vector size mismatch");
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& operator()(Index i, Index j) { return data_[i * shape_[1] + j]; }
  Scalar operator()(Index i, Index j) const { return data_[i * shape_[1] + j]; }
  Scalar& operator()(Index i, Index j, Index k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  Scalar operator()(Index i, Index j, Index k) const { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  Scalar& operator()(Index b, Index i, Index j, Index k) {
    return data_[((b * shape_[1] + i) * shape_[2] + j) * shape_[3] + k];
  }
  Scalar operator()(Index b, Index i, Index j, Index k) const {
    return data_[((b * shape_[1] + i) * shape_[2] + j) * shape_[3] + k];
  }

  ArrayX& array() { return data_; }
  const ArrayX& array() const { return data_; }

  /// Row-major matrix view of the flat buffer.
  MatrixMap matrix(Index rows, Index cols) {
    require(rows * cols == size(), ErrorKind::shape, "matrix view size mismatch");
    return MatrixMap(data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    require(rows * cols == size(), ErrorKind::shape, "matrix view size mismatch");
    return ConstMatrixMap(data(), rows, cols);
  }

  /// Natural matrix view of a rank-2 tensor.
  MatrixMap matrix() { return matrix(shape_[0], shape_[1]); }
  ConstMatrixMap matrix() const { return matrix(shape_[0], shape_[1]); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const { return data_.isFinite().all(); }

  /// Same buffer, new dims (sizes must agree).
  Tensor reshaped(Shape shape) const {
    require(shape_size(shape) == size(), ErrorKind::shape, "reshape size mismatch");
    return Tensor(std::move(shape), data_);
  }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, data_.template cast<T>());
  }

 private:
  void validate_shape() const {
    for (Index d : shape_)
      require(d >= 0, ErrorKind::shape, "negative tensor dimension in " + shape_str(shape_));
  }

  Shape shape_;
  ArrayX data_;
};

template <typename Scalar>
void ensure_finite(const Tensor<Scalar>& t, const std::string& where) {
  require(t.all_finite(), ErrorKind::numeric, "non-finite values produced by " + where);
}

// ---------------------------------------------------------------------------
// DMTX tensor file format.
// Magic "DMTX", u8 version = 1, u8 dtype (0 = f32, 1 = f64), u8 rank,
// rank x u32 little-endian dims, then the payload little-endian row-major.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_le(std::ostream& out, T value) {
  // Host is little-endian on every supported target; serialize verbatim.
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  require(static_cast<bool>(in), ErrorKind::data, "truncated DMTX stream");
  return value;
}

}  // namespace detail

template <typename Scalar>
void write_dmtx(std::ostream& out, const Tensor<Scalar>& t) {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  out.write("DMTX", 4);
  detail::write_le<std::uint8_t>(out, 1);
  detail::write_le<std::uint8_t>(out, std::is_same_v<Scalar, float> ? 0 : 1);
  require(t.rank() <= 255, ErrorKind::shape, "DMTX rank limit exceeded");
  detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (Index i = 0; i < t.rank(); ++i) {
    require(t.dim(i) >= 0 && t.dim(i) <= 0xFFFFFFFFLL, ErrorKind::shape, "DMTX dim out of u32 range");
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim(i)));
  }
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  require(static_cast<bool>(out), ErrorKind::data, "DMTX write failed");
}

template <typename Scalar>
void write_dmtx(const std::string& path, const Tensor<Scalar>& t) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::data, "cannot open for write: " + path);
  write_dmtx(f, t);
}

/// Reads a DMTX stream; a payload of the other dtype is converted to Scalar.
template <typename Scalar>
Tensor<Scalar> read_dmtx(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  require(static_cast<bool>(in) && std::memcmp(magic, "DMTX", 4) == 0, ErrorKind::data, "bad DMTX magic");
  const auto version = detail::read_le<std::uint8_t>(in);
  require(version == 1, ErrorKind::data, "unsupported DMTX version " + std::to_string(version));
  const auto dtype = detail::read_le<std::uint8_t>(in);
  require(dtype == 0 || dtype == 1, ErrorKind::data, "unsupported DMTX dtype " + std::to_string(dtype));
  const auto rank = detail::read_le<std::uint8_t>(in);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<Index>(detail::read_le<std::uint32_t>(in));
  const Index n = shape_size(shape);

  auto read_payload = [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> buf(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(T)));
    require(static_cast<bool>(in), ErrorKind::data, "truncated DMTX payload");
    Tensor<Scalar> t(shape);
    for (Index i = 0; i < n; ++i) t[i] = static_cast<Scalar>(buf[static_cast<std::size_t>(i)]);
    return t;
  };
  return dtype == 0 ? read_payload(float{}) : read_payload(double{});
}

template <typename Scalar>
Tensor<Scalar> read_dmtx(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::data, "cannot open: " + path);
  return read_dmtx<Scalar>(f);
}

template <typename Scalar>
std::string dmtx_bytes(const Tensor<Scalar>& t) {
  std::ostringstream os(std::ios::binary);
  write_dmtx(os, t);
  return os.str();
}

}  // namespace medix
