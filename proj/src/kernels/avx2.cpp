// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include "rad/kernels/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <vector>

namespace rad::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

// MR rows of C times a 16-wide column panel, K-loop in registers.
template <int MR>
inline void panel16(std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b, float* c,
                    bool accumulate) {
  __m256 acc0[MR], acc1[MR];
  for (int r = 0; r < MR; ++r) {
    acc0[r] = accumulate ? _mm256_loadu_ps(c + r * n) : _mm256_setzero_ps();
    acc1[r] = accumulate ? _mm256_loadu_ps(c + r * n + 8) : _mm256_setzero_ps();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_loadu_ps(b + p * n);
    const __m256 b1 = _mm256_loadu_ps(b + p * n + 8);
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_broadcast_ss(a + r * lda + p);
      acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    _mm256_storeu_ps(c + r * n, acc0[r]);
    _mm256_storeu_ps(c + r * n + 8, acc1[r]);
  }
}

template <int MR>
inline void panel8(std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b, float* c,
                   bool accumulate) {
  __m256 acc[MR];
  for (int r = 0; r < MR; ++r) acc[r] = accumulate ? _mm256_loadu_ps(c + r * n) : _mm256_setzero_ps();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_loadu_ps(b + p * n);
    for (int r = 0; r < MR; ++r) acc[r] = _mm256_fmadd_ps(_mm256_broadcast_ss(a + r * lda + p), b0, acc[r]);
  }
  for (int r = 0; r < MR; ++r) _mm256_storeu_ps(c + r * n, acc[r]);
}

template <int MR>
void row_block(std::size_t n, std::size_t k, const float* a, const float* b, float* c, bool accumulate) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) panel16<MR>(n, k, a, k, b + j, c + j, accumulate);
  for (; j + 8 <= n; j += 8) panel8<MR>(n, k, a, k, b + j, c + j, accumulate);
  for (; j < n; ++j) {
    for (int r = 0; r < MR; ++r) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += a[r * k + p] * b[p * n + j];
      c[r * n + j] = accumulate ? c[r * n + j] + acc : acc;
    }
  }
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<4>(n, k, a + i * k, b, c + i * n, accumulate);
  for (; i < m; ++i) row_block<1>(n, k, a + i * k, b, c + i * n, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  std::vector<float> packed(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) packed[i * k + p] = a[p * m + i];
  gemm_nn(m, n, k, packed.data(), b, c, accumulate);
}

inline float dot(std::size_t k, const float* x, const float* y) {
  __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
  std::size_t p = 0;
  for (; p + 16 <= k; p += 16) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + p), _mm256_loadu_ps(y + p), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + p + 8), _mm256_loadu_ps(y + p + 8), s1);
  }
  for (; p + 8 <= k; p += 8) s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + p), _mm256_loadu_ps(y + p), s0);
  float acc = hsum(_mm256_add_ps(s0, s1));
  for (; p < k; ++p) acc += x[p] * y[p];
  return acc;
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const float v = dot(k, a + i * k, b + j * k);
      c[i * n + j] = accumulate ? c[i * n + j] + v : v;
    }
  }
}

template <typename Op, typename Scalar>
inline void binary(std::size_t n, const float* a, const float* b, float* out, Op op, Scalar scalar) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, op(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = scalar(a[i], b[i]);
}

void add(std::size_t n, const float* a, const float* b, float* out) {
  binary(n, a, b, out, [](__m256 x, __m256 y) { return _mm256_add_ps(x, y); }, [](float x, float y) { return x + y; });
}
void sub(std::size_t n, const float* a, const float* b, float* out) {
  binary(n, a, b, out, [](__m256 x, __m256 y) { return _mm256_sub_ps(x, y); }, [](float x, float y) { return x - y; });
}
void mul(std::size_t n, const float* a, const float* b, float* out) {
  binary(n, a, b, out, [](__m256 x, __m256 y) { return _mm256_mul_ps(x, y); }, [](float x, float y) { return x * y; });
}
void div(std::size_t n, const float* a, const float* b, float* out) {
  binary(n, a, b, out, [](__m256 x, __m256 y) { return _mm256_div_ps(x, y); }, [](float x, float y) { return x / y; });
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 av = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void relu(std::size_t n, const float* x, float* out) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward(std::size_t n, const float* x, const float* grad, float* out) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_ps(out + i, _mm256_and_ps(mask, _mm256_loadu_ps(grad + i)));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? grad[i] : 0.0f;
}

double sum(std::size_t n, const float* x) {
  __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    s0 = _mm256_add_pd(s0, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
    s1 = _mm256_add_pd(s1, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, _mm256_add_pd(s0, s1));
  double acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) acc += x[i];
  return acc;
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{Isa::kAvx2, gemm_nn, gemm_tn, gemm_nt, add,  sub,           mul,
                                 div,        axpy,    relu,    relu_backward, sum};
  return &table;
}

}  // namespace rad::kernels

#else

namespace rad::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace rad::kernels

#endif
