#include "blelab/common.hpp"

namespace blelab {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kTooShort: return "TooShort";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kValueOutOfRange: return "ValueOutOfRange";
    case ErrorCode::kUnknownUuid: return "UnknownUuid";
    case ErrorCode::kPropertyViolation: return "PropertyViolation";
    case ErrorCode::kAttributeTooLong: return "AttributeTooLong";
    case ErrorCode::kHandleOrder: return "HandleOrder";
    case ErrorCode::kDuplicateAttribute: return "DuplicateAttribute";
    case ErrorCode::kDistanceTooSmall: return "DistanceTooSmall";
    case ErrorCode::kRoleViolation: return "RoleViolation";
    case ErrorCode::kTimeout: return "Timeout";
    case ErrorCode::kNotConnected: return "NotConnected";
    case ErrorCode::kUnknownDevice: return "UnknownDevice";
    case ErrorCode::kPasskeyOutOfRange: return "PasskeyOutOfRange";
    case ErrorCode::kModeViolation: return "ModeViolation";
    case ErrorCode::kConfirmMismatch: return "ConfirmMismatch";
    case ErrorCode::kAuthFailure: return "AuthFailure";
    case ErrorCode::kUnsupported: return "Unsupported";
    case ErrorCode::kTargetNotObserved: return "TargetNotObserved";
    case ErrorCode::kVictimAlreadyConnected: return "VictimAlreadyConnected";
    case ErrorCode::kInvalidState: return "InvalidState";
    case ErrorCode::kUnknownOpId: return "UnknownOpId";
    case ErrorCode::kNotHeld: return "NotHeld";
    case ErrorCode::kInsufficientSamples: return "InsufficientSamples";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kPortUnavailable: return "PortUnavailable";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0x0f]);
  }
  return out;
}

namespace {

int nibble(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

Bytes from_hex(std::string_view text) {
  if (text.size() % 2 != 0) {
    throw Error(ErrorCode::kInvalidArgument, "hex string has odd length");
  }
  Bytes out;
  out.reserve(text.size() / 2);
  for (std::size_t i = 0; i < text.size(); i += 2) {
    int hi = nibble(text[i]);
    int lo = nibble(text[i + 1]);
    if (hi < 0 || lo < 0) {
      throw Error(ErrorCode::kInvalidArgument, "invalid hex digit in '" + std::string(text) + "'");
    }
    out.push_back(static_cast<std::uint8_t>((hi << 4) | lo));
  }
  return out;
}

}  // namespace blelab
