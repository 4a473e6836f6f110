#include "xmreid/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace xmreid {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ContractError("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<Real> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  if (data_.size() != shape_numel(shape_))
    throw ContractError("value count " + std::to_string(data_.size()) + " does not match shape " +
                        shape_string(shape_));
}

int Tensor::dim(int i) const {
  if (i < 0) i += ndim();
  if (i < 0 || i >= ndim()) throw ContractError("dimension index out of range for " + shape_string(shape_));
  return shape_[i];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw ContractError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

Real Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor slice_rows(const Tensor& t, int begin, int end) {
  if (t.ndim() < 1 || begin < 0 || end > t.dim(0) || begin > end)
    throw ContractError("slice_rows out of range on " + shape_string(t.shape()));
  Shape s = t.shape();
  const std::size_t row = t.size() / std::max(1, s[0]);
  s[0] = end - begin;
  std::vector<Real> v(t.values().begin() + static_cast<std::ptrdiff_t>(row * begin),
                      t.values().begin() + static_cast<std::ptrdiff_t>(row * end));
  return Tensor(std::move(s), std::move(v));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  Shape s = parts[0].shape();
  int rows = 0;
  for (const auto& p : parts) {
    Shape tail_a(p.shape().begin() + 1, p.shape().end());
    Shape tail_b(s.begin() + 1, s.end());
    if (tail_a != tail_b) throw ContractError("concat_rows trailing shape mismatch");
    rows += p.dim(0);
  }
  s[0] = rows;
  std::vector<Real> v;
  v.reserve(shape_numel(s));
  for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  return Tensor(std::move(s), std::move(v));
}

Real max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ContractError("max_abs_diff shape mismatch");
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](Real v) { return std::isfinite(v); });
}

}  // namespace xmreid
