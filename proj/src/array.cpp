#include "ranlab/array.hpp"

#include <cmath>
#include <sstream>

#include "ranlab/errors.hpp"

namespace ranlab {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) RANLAB_REQUIRE(d > 0, "array dimensions must be positive");
  data_.assign(shape_size(shape_), fill);
}

Array::Array(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) RANLAB_REQUIRE(d > 0, "array dimensions must be positive");
  RANLAB_REQUIRE(shape_size(shape_) == data_.size(),
                 "data length does not match shape " + shape_string(shape_));
}

Array Array::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Array(Shape{n}, std::move(v));
}

Array Array::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Array(Shape{rows, cols}, std::move(v));
}

Array Array::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  RANLAB_REQUIRE(rows.size() > 0, "from_rows needs at least one row");
  const std::size_t cols = rows.begin()->size();
  std::vector<double> v;
  v.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    RANLAB_REQUIRE(r.size() == cols, "ragged rows");
    v.insert(v.end(), r.begin(), r.end());
  }
  return matrix(rows.size(), cols, std::move(v));
}

std::size_t Array::rows() const {
  RANLAB_REQUIRE(rank() == 2, "rows() needs a rank-2 array, got " + shape_string(shape_));
  return shape_[0];
}

std::size_t Array::cols() const {
  RANLAB_REQUIRE(rank() == 2, "cols() needs a rank-2 array, got " + shape_string(shape_));
  return shape_[1];
}

double Array::item() const {
  RANLAB_REQUIRE(data_.size() == 1, "item() on a non-scalar array");
  return data_[0];
}

std::span<const double> Array::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

std::span<double> Array::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

Array Array::reshaped(Shape shape) const {
  RANLAB_REQUIRE(shape_size(shape) == data_.size(),
                 "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Array(std::move(shape), data_);
}

bool Array::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double max_abs_diff(const Array& a, const Array& b) {
  RANLAB_REQUIRE(a.shape() == b.shape(), "max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const Array& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double dot(std::span<const double> a, std::span<const double> b) {
  RANLAB_REQUIRE(a.size() == b.size(), "dot length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace ranlab
