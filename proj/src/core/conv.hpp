#pragma once

// Convolution lowering shared by the graph primitives: im2col + GEMM.

#include <cstddef>
#include <vector>

namespace rad::detail {

struct ConvGeometry {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, kernel;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_c * kernel * kernel; }
  std::size_t out_pixels() const { return out_h * out_w; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

void im2col(const ConvGeometry& g, const float* x, std::vector<float>& col);
// Scatter-adds col into x (x must be zeroed by the caller).
void col2im(const ConvGeometry& g, const float* col, float* x);

// out [Co, Ho*Wo] = W * im2col(x)
void conv_forward(const ConvGeometry& g, const float* x, const float* w, float* out);
// x_grad [Ci,H,W] = col2im(W^T * grad)
void conv_backward_input(const ConvGeometry& g, const float* w, const float* grad, float* x_grad);
// w_grad [Co, Ci*K*K] += grad * im2col(x)^T
void conv_backward_weight(const ConvGeometry& g, const float* x, const float* grad, float* w_grad);

}  // namespace rad::detail
