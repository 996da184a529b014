#pragma once

#include <stdexcept>
#include <string>

namespace rad {

// Error categories map onto CLI exit codes (see cli/cli.hpp).
enum class ErrorKind {
  kUsage,      // invalid argument / flag value / contract violation by caller
  kIo,         // missing file, unreadable or corrupt data, write failure
  kNumeric,    // non-finite values, divergence
  kShape,      // tensor shape mismatch
  kAttack,     // attack-specific termination (empty target, zero gradient, bound violation)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(ErrorKind::kUsage, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::kShape, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::kNumeric, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::kIo, w) {}
};
struct MissingFileError : IoError {
  explicit MissingFileError(const std::string& path) : IoError("missing file: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};
struct CorruptDataError : IoError {
  explicit CorruptDataError(const std::string& w) : IoError("corrupt data: " + w) {}
};

// Raised when node selection yields no boxes; the attack treats it as convergence.
struct EmptyTargetError : Error {
  explicit EmptyTargetError(const std::string& w) : Error(ErrorKind::kAttack, w) {}
};
// Raised when the attack gradient has zero l1 norm; the caller stops iterating.
struct ZeroGradientError : Error {
  explicit ZeroGradientError(const std::string& w) : Error(ErrorKind::kAttack, w) {}
};
// An adversarial image left its l-infinity ball. Always an attack bug.
struct BoundViolationError : Error {
  explicit BoundViolationError(const std::string& w) : Error(ErrorKind::kAttack, w) {}
};

}  // namespace rad
