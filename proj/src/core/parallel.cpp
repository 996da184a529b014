#include "rad/core/parallel.hpp"

#include <cstdlib>
#include <string>

#include "rad/core/error.hpp"

namespace rad {

std::size_t default_jobs() {
  if (const char* env = std::getenv("RAD_JOBS"); env && *env) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("RAD_JOBS must be a positive integer, got '") + env + "'");
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

}  // namespace rad
