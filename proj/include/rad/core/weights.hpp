#pragma once

#include "rad/core/tensor.hpp"

namespace rad {

// Layer weights with their sign-split parts, w = w+ + w- exactly.
class WeightMatrix {
 public:
  WeightMatrix() = default;
  explicit WeightMatrix(Tensor values) : values_(std::move(values)) {}

  const Tensor& values() const noexcept { return values_; }
  Tensor& values() noexcept { return values_; }
  const Shape& shape() const noexcept { return values_.shape(); }

  Tensor positive_part() const;  // max(w, 0)
  Tensor negative_part() const;  // min(w, 0)

 private:
  Tensor values_;
};

}  // namespace rad
