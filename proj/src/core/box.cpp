#include <algorithm>

#include "rad/core/box.hpp"
#include "rad/core/weights.hpp"

namespace rad {

double box_iou(const Box& a, const Box& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) return 0.0;
  const double ix = std::max(0.0, std::min<double>(a.right(), b.right()) - std::max<double>(a.x, b.x));
  const double iy = std::max(0.0, std::min<double>(a.bottom(), b.bottom()) - std::max<double>(a.y, b.y));
  const double inter = ix * iy;
  const double uni = double(a.w) * a.h + double(b.w) * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

Tensor WeightMatrix::positive_part() const {
  Tensor out(values_.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = values_[i] > 0.0f ? values_[i] : 0.0f;
  return out;
}

Tensor WeightMatrix::negative_part() const {
  Tensor out(values_.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = values_[i] < 0.0f ? values_[i] : 0.0f;
  return out;
}

}  // namespace rad
