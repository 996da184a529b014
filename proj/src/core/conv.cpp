#include "conv.hpp"

#include <algorithm>
#include <cstring>

#include "rad/kernels/kernels.hpp"

namespace rad::detail {

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < kernel) return 0;
  return (in + 2 * pad - kernel) / stride + 1;
}

void im2col(const ConvGeometry& g, const float* x, std::vector<float>& col) {
  const std::size_t pixels = g.out_pixels();
  col.assign(g.patch() * pixels, 0.0f);
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        float* row = col.data() + ((c * g.kernel + ky) * g.kernel + kx) * pixels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          const float* src = x + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
          float* dst = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w)) dst[ox] = src[ix];
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const float* col, float* x) {
  const std::size_t pixels = g.out_pixels();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const float* row = col + ((c * g.kernel + ky) * g.kernel + kx) * pixels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          float* dst = x + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
          const float* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void conv_forward(const ConvGeometry& g, const float* x, const float* w, float* out) {
  const auto& k = kernels::active();
  if (g.is_pointwise()) {
    k.gemm_nn(g.out_c, g.out_pixels(), g.patch(), w, x, out, false);
    return;
  }
  std::vector<float> col;
  im2col(g, x, col);
  k.gemm_nn(g.out_c, g.out_pixels(), g.patch(), w, col.data(), out, false);
}

void conv_backward_input(const ConvGeometry& g, const float* w, const float* grad, float* x_grad) {
  const auto& k = kernels::active();
  if (g.is_pointwise()) {
    k.gemm_tn(g.patch(), g.out_pixels(), g.out_c, w, grad, x_grad, false);
    return;
  }
  std::vector<float> col(g.patch() * g.out_pixels());
  k.gemm_tn(g.patch(), g.out_pixels(), g.out_c, w, grad, col.data(), false);
  std::fill(x_grad, x_grad + g.in_c * g.in_h * g.in_w, 0.0f);
  col2im(g, col.data(), x_grad);
}

void conv_backward_weight(const ConvGeometry& g, const float* x, const float* grad, float* w_grad) {
  const auto& k = kernels::active();
  if (g.is_pointwise()) {
    k.gemm_nt(g.out_c, g.patch(), g.out_pixels(), grad, x, w_grad, true);
    return;
  }
  std::vector<float> col;
  im2col(g, x, col);
  k.gemm_nt(g.out_c, g.patch(), g.out_pixels(), grad, col.data(), w_grad, true);
}

}  // namespace rad::detail
