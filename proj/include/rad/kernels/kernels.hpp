#pragma once

// Inner-loop arithmetic used by the graph primitives. Each instruction-set
// variant fills one KernelTable; the scalar table is the reference the others
// are equivalence-tested against. Selection happens once, at first use.

#include <cstddef>
#include <string_view>

namespace rad::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

struct KernelTable {
  Isa isa;
  // C[M,N] (+)= A[M,K] * B[K,N]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
                  bool accumulate);
  // C[M,N] (+)= A[K,M]^T * B[K,N]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
                  bool accumulate);
  // C[M,N] (+)= A[M,K] * B[N,K]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
                  bool accumulate);
  void (*add)(std::size_t n, const float* a, const float* b, float* out);
  void (*sub)(std::size_t n, const float* a, const float* b, float* out);
  void (*mul)(std::size_t n, const float* a, const float* b, float* out);
  void (*div)(std::size_t n, const float* a, const float* b, float* out);
  // y += alpha * x
  void (*axpy)(std::size_t n, float alpha, const float* x, float* y);
  void (*relu)(std::size_t n, const float* x, float* out);
  // out = grad where x > 0 else 0
  void (*relu_backward)(std::size_t n, const float* x, const float* grad, float* out);
  // Sum with 64-bit accumulation.
  double (*sum)(std::size_t n, const float* x);
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled in.
const KernelTable* avx2_table();

bool cpu_supports(Isa isa);

// Best supported table, unless RAD_ISA=scalar is set in the environment.
const KernelTable& active();
// Pins the active table (tests and benchmarks). Throws if unsupported.
void select(Isa isa);

}  // namespace rad::kernels
