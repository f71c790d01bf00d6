#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vlm {

enum class ErrorCode {
  kShape,
  kDegenerateMask,
  kEmptyLoss,
  kRank,
  kInput,
  kConfig,
  kCapacity,
  kDanglingRef,
  kPolicy,
  kTarget,
  kState,
  kExhaustion,
  kIntegrity,
  kDivergence,
  kIo,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-readable code so
/// the CLI can print a stable error line and tests can assert the category.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace vlm
