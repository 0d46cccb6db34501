#pragma once

// Dense row-major matrices, seeded randomness and the handful of numeric
// kernels every other module is built on.
//
// Accumulation order in every reduction is fixed (row by row, left to right)
// so results are reproducible bit for bit across runs and platforms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hydra/errors.hpp"

namespace hydra {

using Vector = std::vector<double>;

template <class T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;

  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
    data_.assign(rows * cols, fill);
  }

  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
    if (data_.size() != rows * cols) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(rows, cols));
    }
  }

  BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    if (rows_ == 0 || cols_ == 0) throw ShapeError("matrix literal must be nonempty");
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  static BasicMatrix row_vector(std::span<const T> v) {
    return BasicMatrix(1, v.size(), std::vector<T>(v.begin(), v.end()));
  }

  static BasicMatrix column_vector(std::span<const T> v) {
    return BasicMatrix(v.size(), 1, std::vector<T>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols_, cols_); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols_, cols_);
  }

  std::string shape() const { return shape_string(rows_, cols_); }
  bool same_shape(const BasicMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const BasicMatrix& o) const = default;

  template <class U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;

// Counts scalar multiply-adds performed by matmul/matvec on this thread.
// Used to check analytic MAC accounting against the real forward pass.
inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}
}  // namespace detail

template <class T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul shape mismatch: " + a.shape() + " x " + b.shape());
  BasicMatrix<T> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const T aip = a(i, p);
      auto brow = b.row(p);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aip * brow[j];
    }
  }
  mac_counter() += static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols();
  return c;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  detail::require(a.cols() == x.size(), "matvec shape mismatch: " + a.shape() + " x (" +
                                            std::to_string(x.size()) + ")");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) acc += arow[j] * x[j];
    y[i] = acc;
  }
  mac_counter() += static_cast<std::uint64_t>(a.rows()) * a.cols();
  return y;
}

template <class T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <class T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require(a.same_shape(b), "add shape mismatch: " + a.shape() + " vs " + b.shape());
  BasicMatrix<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

template <class T>
BasicMatrix<T> sub(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require(a.same_shape(b), "sub shape mismatch: " + a.shape() + " vs " + b.shape());
  BasicMatrix<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

template <class T>
BasicMatrix<T> scale(const BasicMatrix<T>& a, T s) {
  BasicMatrix<T> c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

inline void add_in_place(Vector& y, std::span<const double> x, double s = 1.0) {
  detail::require(y.size() == x.size(), "vector length mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

inline void add_in_place(Matrix& y, const Matrix& x, double s = 1.0) {
  detail::require(y.same_shape(x), "add_in_place shape mismatch: " + y.shape() + " vs " + x.shape());
  auto yd = y.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += s * xd[i];
}

template <class T>
T frobenius_norm(const BasicMatrix<T>& a) {
  T acc = 0;
  for (const auto& v : a.data()) acc += v * v;
  return std::sqrt(acc);
}

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
  detail::require(a.same_shape(b),
                  "frobenius_distance shape mismatch: " + a.shape() + " vs " + b.shape());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

template <class T>
bool all_finite(const BasicMatrix<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

// Max-subtracted softmax, renormalized so the outputs sum to one.
template <class T>
std::vector<T> softmax(std::span<const T> v) {
  if (v.empty()) throw ShapeError("softmax of an empty vector");
  const T peak = *std::max_element(v.begin(), v.end());
  std::vector<T> out(v.size());
  T total = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - peak);
    total += out[i];
  }
  for (auto& o : out) o /= total;
  return out;
}

inline Vector softmax(const Vector& v) { return softmax<double>(std::span<const double>(v)); }

// Portable seeded generator.
//
// Raw bits come from std::mt19937_64, whose output sequence is fixed by the
// C++ standard. Conversions to floating point are done here rather than with
// <random> distributions, whose algorithms are implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random mantissa bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform index in [0, n) by the multiply-high reduction.
  std::size_t index(std::size_t n) {
    if (n == 0) throw ContractError("SeededRng::index requires n >= 1");
    const unsigned __int128 prod = static_cast<unsigned __int128>(engine_()) * n;
    return static_cast<std::size_t>(prod >> 64);
  }

  // Standard normal via Box-Muller (one draw per call, no caching).
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = index(i);
      std::iter_swap(first + (i - 1), first + j);
    }
  }

  // Derives an independent child seed; used to fan out per-component streams.
  std::uint64_t fork() { return engine_() ^ 0x9E3779B97F4A7C15ULL; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// He/Kaiming uniform init: U(-b, b) with b = sqrt(6 / fan_in), fan_in = cols.
inline Matrix kaiming_uniform(std::size_t rows, std::size_t cols, SeededRng& rng) {
  if (rows == 0 || cols == 0) {
    throw ShapeError("kaiming_uniform dimensions must be positive, got " +
                     Matrix::shape_string(rows, cols));
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(cols));
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = rng.uniform(-bound, bound);
  return m;
}

inline Matrix gaussian(std::size_t rows, std::size_t cols, SeededRng& rng, double stddev = 1.0) {
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = stddev * rng.normal();
  return m;
}

}  // namespace hydra
