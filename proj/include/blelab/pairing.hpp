#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "blelab/common.hpp"

namespace blelab::pairing {

// 128-bit key or block, most significant byte first.
using Key128 = std::array<std::uint8_t, 16>;

Key128 key_from_integer(std::uint64_t value);
Key128 key_from_hex(std::string_view hex);
std::string key_hex(const Key128& key);
Key128 random_key(std::mt19937_64& rng);

enum class IoCapability {
  kDisplayOnly,
  kDisplayYesNo,
  kKeyboardOnly,
  kNoInputNoOutput,
  kKeyboardDisplay,
};

inline constexpr IoCapability kAllIoCapabilities[] = {
    IoCapability::kDisplayOnly, IoCapability::kDisplayYesNo, IoCapability::kKeyboardOnly,
    IoCapability::kNoInputNoOutput, IoCapability::kKeyboardDisplay};

enum class Method { kJustWorks, kPasskey, kOob };

struct AssociationMethod {
  Method method = Method::kJustWorks;
  bool authenticated = false;

  friend bool operator==(const AssociationMethod&, const AssociationMethod&) = default;
};

enum class PairingMode { kLegacyLE, kSecureConnections };

std::string_view to_string(IoCapability io);
std::string_view to_string(Method method);
std::string_view to_string(PairingMode mode);
IoCapability parse_io_capability(std::string_view text);
Method parse_method(std::string_view text);
PairingMode parse_pairing_mode(std::string_view text);

// OOB wins when available; otherwise the legacy LE capability matrix
// (numeric comparison is not modeled, so DisplayYesNo pairs fall back to
// Just Works where the newer matrix would compare numbers).
AssociationMethod select_association(IoCapability initiator, IoCapability responder,
                                     bool oob_available);

// Just Works -> all zeros; Passkey -> the six-digit number as an integer;
// OOB -> 128 random bits. Throws kPasskeyOutOfRange.
Key128 derive_tk(AssociationMethod method, std::optional<std::uint32_t> passkey,
                 std::mt19937_64& rng);

// c1 analog: AES_tk(AES_tk(rand ^ kConfirmPad1) ^ kConfirmPad2).
Key128 confirm_value(const Key128& tk, const Key128& rand);

// s1 analog: AES_tk(low64(m_rand) || low64(s_rand)). Throws kModeViolation
// when called for Secure Connections.
Key128 derive_stk(PairingMode mode, const Key128& tk, const Key128& m_rand, const Key128& s_rand);

struct KeyMaterial {
  Key128 tk{};
  std::optional<Key128> stk;
  std::optional<Key128> ltk;

  // STK for legacy pairing, LTK for Secure Connections.
  const Key128& session_key() const;
};

// Everything a passive sniffer captures on air during pairing.
struct PairingTranscript {
  PairingMode mode = PairingMode::kLegacyLE;
  AssociationMethod method;
  Key128 m_rand{};
  Key128 s_rand{};
  Key128 m_confirm{};
  Key128 s_confirm{};
  // Opaque public-key values, Secure Connections only.
  std::optional<Bytes> public_values;
};

// {mRand, sRand, mConfirm, sConfirm, mode, method[, authenticated, publicValues]}
nlohmann::ordered_json to_json(const PairingTranscript& t);
PairingTranscript transcript_from_json(const nlohmann::json& j);

struct PairingOptions {
  // User entries on each side; when both are empty and the method is
  // Passkey a random passkey is displayed and typed correctly.
  std::optional<std::uint32_t> initiator_passkey;
  std::optional<std::uint32_t> responder_passkey;
};

struct PairingOutcome {
  KeyMaterial initiator;
  KeyMaterial responder;
  PairingTranscript transcript;
};

// Runs the confirm/random exchange for both sides. Throws kConfirmMismatch
// when the two TKs disagree.
PairingOutcome run_pairing(IoCapability initiator, IoCapability responder, PairingMode mode,
                           AssociationMethod method, std::mt19937_64& rng,
                           const PairingOptions& options = {});

// Passive key recovery. Legacy Just Works recomputes the STK with tk = 0,
// legacy Passkey searches all 10^6 passkeys against mConfirm. Secure
// Connections and OOB yield nullopt.
std::optional<Key128> eavesdrop_recover(const PairingTranscript& transcript);

struct PasskeySearch {
  std::optional<std::uint32_t> passkey;
  std::uint64_t candidates_checked = 0;
};

// OpenMP search over [0, 999999]; returns the smallest matching passkey.
PasskeySearch search_passkey(const PairingTranscript& transcript);
// Serial reference for the search above.
PasskeySearch search_passkey_serial(const PairingTranscript& transcript);

enum class LinkDirection : std::uint8_t { kCentralToPeripheral = 0, kPeripheralToCentral = 1 };

inline constexpr std::size_t kMicLength = 4;

// AES-128-CCM, 4-byte MIC, nonce built from (counter, direction).
Bytes encrypt_link(const Key128& session_key, std::uint64_t counter,
                   std::span<const std::uint8_t> plaintext,
                   LinkDirection direction = LinkDirection::kCentralToPeripheral);
// Throws kAuthFailure on a wrong key or tampered ciphertext.
Bytes decrypt_link(const Key128& session_key, std::uint64_t counter,
                   std::span<const std::uint8_t> ciphertext,
                   LinkDirection direction = LinkDirection::kCentralToPeripheral);

// Single AES-128 block encryption (the primitive under c1/s1).
Key128 aes128_encrypt(const Key128& key, const Key128& block);

}  // namespace blelab::pairing
