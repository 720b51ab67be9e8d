#pragma once

#include <stdexcept>
#include <string>

namespace vasplat {

enum class ErrorCode {
  kInvalidArgument,
  kDegenerateRotation,
  kMalformedHeader,
  kDimensionMismatch,
  kTruncatedFile,
  kIo,
  kNonFinite,
  kUsage,
  kResolutionMismatch,
  kEmptyInput,
  kNonConvergence,
  kNotFound,
  kDivergence,
  kMissingData,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised by the Poisson solver when it stops before reaching tolerance.
class SolverError : public Error {
 public:
  SolverError(const std::string& message, double residual, int iterations)
      : Error(ErrorCode::kNonConvergence, message),
        residual_(residual),
        iterations_(iterations) {}

  double residual() const noexcept { return residual_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace vasplat
