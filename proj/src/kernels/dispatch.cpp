#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "rad/kernels/kernels.hpp"

namespace rad::kernels {

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::kScalar: return "scalar";
    case Isa::kAvx2: return "avx2";
  }
  return "unknown";
}

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::kScalar: return true;
    case Isa::kAvx2:
#if defined(__x86_64__) || defined(__i386__)
      return avx2_table() != nullptr && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

namespace {

const KernelTable* detect() {
  if (const char* env = std::getenv("RAD_ISA"); env && std::string(env) == "scalar") return &scalar_table();
  if (cpu_supports(Isa::kAvx2)) return avx2_table();
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{detect()};
  return table;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

void select(Isa isa) {
  if (!cpu_supports(isa)) throw std::runtime_error("instruction set not supported: " + std::string(isa_name(isa)));
  slot().store(isa == Isa::kScalar ? &scalar_table() : avx2_table(), std::memory_order_release);
}

}  // namespace rad::kernels
