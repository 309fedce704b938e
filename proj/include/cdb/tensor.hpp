#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "cdb/error.hpp"
#include "cdb/gemm.hpp"

namespace cdb {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

/// Dense row-major tensor. The scalar type fixes the element precision.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw InvalidShape("shape " + shape_str(shape_) + " holds " +
                         std::to_string(shape_size(shape_)) + " elements, got " +
                         std::to_string(data_.size()));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <std::integral... I>
  T& operator()(I... idx) {
    return data_[offset(idx...)];
  }
  template <std::integral... I>
  const T& operator()(I... idx) const {
    return data_[offset(idx...)];
  }

  /// Same elements under a new shape. The rvalue overload moves the buffer.
  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  template <std::integral... I>
  std::size_t offset(I... idx) const {
    const std::array<std::size_t, sizeof...(I)> ix{static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < ix.size(); ++a) off = off * shape_[a] + ix[a];
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <Real To, Real From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  if constexpr (std::same_as<To, From>) {
    return t;
  } else {
    std::vector<To> out(t.size());
    std::transform(t.data().begin(), t.data().end(), out.begin(),
                   [](From v) { return static_cast<To>(v); });
    return Tensor<To>(t.shape(), std::move(out));
  }
}

template <Real T>
void require_finite(const Tensor<T>& t, const char* op) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NonFinite(std::string(op) + ": element " + std::to_string(i) + " is not finite");
    }
  }
}

template <Real T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw InvalidShape(std::string(op) + ": expected rank " + std::to_string(rank) +
                       ", got shape " + shape_str(t.shape()));
  }
}

template <Real T>
void require_nonempty(const Tensor<T>& t, const char* op) {
  if (t.empty()) throw InvalidShape(std::string(op) + ": empty tensor " + shape_str(t.shape()));
}

struct Position {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const Position&) const = default;
};

/// Peak coordinates, one entry per channel.
using PositionList = std::vector<Position>;

/// 3x3 mean filter with zero padding and a fixed divisor of 9.
template <Real T>
Tensor<T> avg_pool_3x3_same(const Tensor<T>& f) {
  require_rank(f, 3, "avg_pool_3x3_same");
  require_nonempty(f, "avg_pool_3x3_same");
  require_finite(f, "avg_pool_3x3_same");
  const std::size_t c = f.extent(0), h = f.extent(1), w = f.extent(2);
  Tensor<T> out(f.shape());
  const T* in = f.raw();
  T* o = out.raw();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = in + ch * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t y0 = y == 0 ? 0 : y - 1;
      const std::size_t y1 = std::min(h - 1, y + 1);
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t x0 = x == 0 ? 0 : x - 1;
        const std::size_t x1 = std::min(w - 1, x + 1);
        T acc = 0;
        for (std::size_t yy = y0; yy <= y1; ++yy)
          for (std::size_t xx = x0; xx <= x1; ++xx) acc += plane[yy * w + xx];
        o[(ch * h + y) * w + x] = acc / T(9);
      }
    }
  }
  return out;
}

/// Row-major-first argmax of every channel.
template <Real T>
PositionList peak_positions(const Tensor<T>& f) {
  require_rank(f, 3, "peak_positions");
  require_nonempty(f, "peak_positions");
  const std::size_t c = f.extent(0), h = f.extent(1), w = f.extent(2);
  PositionList out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = f.raw() + ch * h * w;
    std::size_t best = 0;
    for (std::size_t i = 1; i < h * w; ++i)
      if (plane[i] > plane[best]) best = i;
    out[ch] = {best / w, best % w};
  }
  return out;
}

template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.extent(1) != b.extent(0)) {
    throw InvalidShape("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
  }
  require_finite(a, "matmul");
  require_finite(b, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> out({m, n});
  if (m && n && k) detail::gemm<T>(false, false, m, n, k, T(1), a.raw(), b.raw(), T(0), out.raw());
  require_finite(out, "matmul");
  return out;
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.extent(0), n = a.extent(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

inline constexpr double kNormEpsilon = 1e-12;

/// Divide each row by its L2 norm; rows with norm below 1e-12 become zero.
template <Real T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  require_rank(x, 2, "l2_normalize_rows");
  require_finite(x, "l2_normalize_rows");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.raw() + r * cols;
    double sq = 0;
    for (std::size_t j = 0; j < cols; ++j) sq += static_cast<double>(in[j]) * in[j];
    const double norm = std::sqrt(sq);
    if (norm < kNormEpsilon) continue;
    T* o = out.raw() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) o[j] = static_cast<T>(in[j] / norm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary format: "CDBT", u8 rank, u32 extents (LE), u8 precision, raw LE data.

enum class Precision : std::uint8_t { Single = 0, Double = 1 };

template <Real T>
inline constexpr Precision precision_of = std::same_as<T, float> ? Precision::Single
                                                                  : Precision::Double;

inline constexpr std::array<char, 4> kTensorMagic{'C', 'D', 'B', 'T'};

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw FormatError("tensor stream truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
  return v;
}

template <Real T>
using Bits = std::conditional_t<std::same_as<T, float>, std::uint32_t, std::uint64_t>;

struct TensorHeader {
  Shape shape;
  Precision precision;
};

inline TensorHeader read_header(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kTensorMagic) throw FormatError("bad tensor magic");
  const auto rank = read_le<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = read_le<std::uint32_t>(is);
  const auto tag = read_le<std::uint8_t>(is);
  if (tag > 1) throw FormatError("unknown precision tag " + std::to_string(tag));
  return {std::move(shape), static_cast<Precision>(tag)};
}

template <Real T>
Tensor<T> read_body(std::istream& is, Shape shape) {
  std::vector<T> data(shape_size(shape));
  for (auto& v : data) v = std::bit_cast<T>(read_le<Bits<T>>(is));
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace detail

template <Real T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw InvalidShape("rank above 255 cannot be serialized");
  os.write(kTensorMagic.data(), kTensorMagic.size());
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw InvalidShape("extent exceeds u32");
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(precision_of<T>));
  for (T v : t.data()) detail::write_le(os, std::bit_cast<detail::Bits<T>>(v));
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline AnyTensor read_any_tensor(std::istream& is) {
  auto header = detail::read_header(is);
  if (header.precision == Precision::Single) return detail::read_body<float>(is, std::move(header.shape));
  return detail::read_body<double>(is, std::move(header.shape));
}

/// Reads a tensor and converts it to T if it was stored at the other precision.
template <Real T>
Tensor<T> read_tensor(std::istream& is) {
  return std::visit([](auto&& t) { return tensor_cast<T>(t); }, read_any_tensor(is));
}

}  // namespace cdb
