#include "np/tensor.hpp"

#include <cmath>
#include <sstream>

namespace np {

i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
  for (i64 dim : shape)
    require(dim >= 1, "tensor: non-positive dimension in " + shape_str(shape));
  require(shape_numel(shape) == static_cast<i64>(data.size()),
          "tensor: shape " + shape_str(shape) + " does not match data length " +
              std::to_string(data.size()));
}

Tensor Tensor::zeros(Shape s) {
  i64 n = shape_numel(s);
  return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), 0.f));
}

Tensor Tensor::full(Shape s, float v) {
  i64 n = shape_numel(s);
  return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), v));
}

i64 Tensor::rows() const {
  require(rank() == 2, "tensor: rows() on rank-" + std::to_string(rank()));
  return shape[0];
}

i64 Tensor::cols() const {
  require(rank() == 2, "tensor: cols() on rank-" + std::to_string(rank()));
  return shape[1];
}

void Tensor::fill(float v) {
  for (float& x : data) x = v;
}

bool Tensor::all_finite() const {
  for (float x : data)
    if (!std::isfinite(x)) return false;
  return true;
}

Param::Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
  grad = Tensor::zeros(value.shape);
}

void sgd_step(const std::vector<Param*>& params, float lr) {
  require(lr > 0.f, "sgd_step: lr must be positive, got " + std::to_string(lr));
  for (Param* p : params) {
    for (size_t i = 0; i < p->value.data.size(); ++i)
      p->value.data[i] -= lr * p->grad.data[i];
    p->zero_grad();
  }
}

}  // namespace np
