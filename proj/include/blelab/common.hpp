#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace blelab {

using Bytes = std::vector<std::uint8_t>;

// Virtual time in milliseconds.
using SimTime = std::int64_t;

using DeviceId = std::string;

enum class ErrorCode {
  kInvalidArgument,
  kTooShort,
  kLengthMismatch,
  kValueOutOfRange,
  kUnknownUuid,
  kPropertyViolation,
  kAttributeTooLong,
  kHandleOrder,
  kDuplicateAttribute,
  kDistanceTooSmall,
  kRoleViolation,
  kTimeout,
  kNotConnected,
  kUnknownDevice,
  kPasskeyOutOfRange,
  kModeViolation,
  kConfirmMismatch,
  kAuthFailure,
  kUnsupported,
  kTargetNotObserved,
  kVictimAlreadyConnected,
  kInvalidState,
  kUnknownOpId,
  kNotHeld,
  kInsufficientSamples,
  kConfigInvalid,
  kPortUnavailable,
  kIo,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Lowercase hex, no separators.
std::string to_hex(std::span<const std::uint8_t> bytes);

// Accepts upper or lower case; throws kInvalidArgument on odd length or bad digits.
Bytes from_hex(std::string_view text);

}  // namespace blelab
