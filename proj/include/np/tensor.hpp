#pragma once

#include <string>
#include <vector>

#include "np/common.hpp"

namespace np {

using Shape = std::vector<i64>;

i64 shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major float32 array; the universal value carrier.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<float> d);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, float v);

  i64 numel() const { return static_cast<i64>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  i64 dim(int i) const { return shape[static_cast<size_t>(i)]; }
  i64 rows() const;  // rank-2 accessors
  i64 cols() const;
  float& at(i64 r, i64 c) { return data[static_cast<size_t>(r * cols() + c)]; }
  float at(i64 r, i64 c) const { return data[static_cast<size_t>(r * cols() + c)]; }

  void fill(float v);
  bool all_finite() const;
};

// Trainable value plus accumulated gradient of identical shape.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param(std::string n, Tensor v);
  void zero_grad() { grad.fill(0.f); }
};

// value <- value - lr * grad elementwise, then grads are cleared.
void sgd_step(const std::vector<Param*>& params, float lr);

}  // namespace np
