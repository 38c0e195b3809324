// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mapkd {

/// Thrown on any dimension/shape contract violation. The message always
/// names the offending shapes.
class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ValueError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using Shape4 = std::array<std::int64_t, 4>;

inline std::int64_t shape_numel(const Shape4& s) {
  return s[0] * s[1] * s[2] * s[3];
}

inline std::string shape_str(const Shape4& s) {
  std::ostringstream os;
  os << "(" << s[0] << "," << s[1] << "," << s[2] << "," << s[3] << ")";
  return os.str();
}

/// Dense rank-4 array (batch, channel, height, width) of 64-bit floats with
/// an optional same-shape gradient buffer. Copies are shallow: two Grid4
/// handles may alias the same storage, which is what lets the tape deposit
/// gradients into parameter leaves. Use clone() for a deep copy.
class Grid4 {
  struct Data {
    Shape4 shape{0, 0, 0, 0};
    std::vector<double> values;
    std::vector<double> grad;  // empty until a gradient is deposited
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;

public:
  Grid4() = default;

  explicit Grid4(Shape4 s, double fill = 0.0) : d_(std::make_shared<Data>()) {
    for (auto v : s)
      if (v < 0) throw ShapeError("Grid4: negative dimension in shape " + shape_str(s));
    d_->shape = s;
    d_->values.assign(static_cast<std::size_t>(shape_numel(s)), fill);
  }

  Grid4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w, double fill = 0.0)
      : Grid4(Shape4{b, c, h, w}, fill) {}

  static Grid4 from_values(Shape4 s, std::vector<double> v) {
    Grid4 g(s);
    if (static_cast<std::int64_t>(v.size()) != shape_numel(s))
      throw ShapeError("Grid4::from_values: " + std::to_string(v.size()) +
                       " values for shape " + shape_str(s));
    g.d_->values = std::move(v);
    return g;
  }

  static Grid4 scalar(double v) { return from_values({1, 1, 1, 1}, {v}); }

  bool valid() const { return d_ != nullptr; }
  const Shape4& shape() const { return d_->shape; }
  std::int64_t dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(d_->values.size()); }

  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }
  double* data() { return d_->values.data(); }
  const double* data() const { return d_->values.data(); }

  std::int64_t index(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
    const Shape4& s = d_->shape;
    return ((b * s[1] + c) * s[2] + h) * s[3] + w;
  }
  double& at(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
    return d_->values[static_cast<std::size_t>(index(b, c, h, w))];
  }
  double at(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return d_->values[static_cast<std::size_t>(index(b, c, h, w))];
  }
  double item() const {
    if (numel() != 1)
      throw ShapeError("Grid4::item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return d_->values[0];
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  /// Grad buffer, allocated to zeros on first access.
  std::vector<double>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    return d_->grad;
  }
  const std::vector<double>& grad_view() const { return d_->grad; }
  void zero_grad() {
    if (!d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
  }
  void drop_grad() { d_->grad.clear(); }

  Grid4 clone() const {
    Grid4 g(shape());
    g.d_->values = d_->values;
    g.d_->requires_grad = d_->requires_grad;
    return g;
  }

  bool same_storage(const Grid4& o) const { return d_ == o.d_; }

  bool all_finite() const {
    for (double v : d_->values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void check_same_shape(const Grid4& a, const Grid4& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace mapkd
