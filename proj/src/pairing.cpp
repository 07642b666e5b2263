#include "blelab/pairing.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <memory>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace blelab::pairing {

namespace {

struct CtxDeleter {
  void operator()(EVP_CIPHER_CTX* ctx) const { EVP_CIPHER_CTX_free(ctx); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CtxDeleter>;

CipherCtx new_ctx() {
  CipherCtx ctx(EVP_CIPHER_CTX_new());
  if (!ctx) throw Error(ErrorCode::kIo, "EVP_CIPHER_CTX_new failed");
  return ctx;
}

// Fixed stand-ins for the pairing request/response and address fields that
// the core c1 function mixes in.
constexpr Key128 kConfirmPad1 = {0x07, 0x07, 0x10, 0x00, 0x00, 0x01, 0x01, 0x00,
                                 0x07, 0x07, 0x10, 0x00, 0x00, 0x03, 0x00, 0x01};
constexpr Key128 kConfirmPad2 = {0x00, 0x00, 0x00, 0x00, 0xa1, 0xa2, 0xa3, 0xa4,
                                 0xa5, 0xa6, 0xb1, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6};

constexpr std::uint32_t kPasskeyCount = 1'000'000;
constexpr std::uint64_t kMaxCounter = (std::uint64_t{1} << 39) - 1;

Key128 xor_block(const Key128& a, const Key128& b) {
  Key128 out{};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::uint8_t>(a[i] ^ b[i]);
  return out;
}

std::array<std::uint8_t, 13> link_nonce(std::uint64_t counter, LinkDirection direction) {
  if (counter > kMaxCounter) throw Error(ErrorCode::kValueOutOfRange, "packet counter exhausted");
  std::array<std::uint8_t, 13> nonce{};
  for (int i = 0; i < 5; ++i) nonce[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(counter >> (8 * i));
  if (direction == LinkDirection::kCentralToPeripheral) nonce[4] |= 0x80;
  // Remaining 8 bytes: session IV, fixed at zero in this model.
  return nonce;
}

}  // namespace

Key128 key_from_integer(std::uint64_t value) {
  Key128 k{};
  for (int i = 0; i < 8; ++i) k[15 - static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(value >> (8 * i));
  return k;
}

Key128 key_from_hex(std::string_view hex) {
  Bytes b = from_hex(hex);
  if (b.size() != 16) throw Error(ErrorCode::kLengthMismatch, "expected 32 hex digits");
  Key128 k{};
  std::copy(b.begin(), b.end(), k.begin());
  return k;
}

std::string key_hex(const Key128& key) { return to_hex(key); }

Key128 random_key(std::mt19937_64& rng) {
  Key128 k{};
  for (int half = 0; half < 2; ++half) {
    const std::uint64_t v = rng();
    for (int i = 0; i < 8; ++i) k[static_cast<std::size_t>(half * 8 + i)] = static_cast<std::uint8_t>(v >> (56 - 8 * i));
  }
  return k;
}

Key128 aes128_encrypt(const Key128& key, const Key128& block) {
  thread_local CipherCtx ctx = new_ctx();
  Key128 out{};
  int len = 0;
  if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_128_ecb(), nullptr, key.data(), nullptr) != 1 ||
      EVP_CIPHER_CTX_set_padding(ctx.get(), 0) != 1 ||
      EVP_EncryptUpdate(ctx.get(), out.data(), &len, block.data(), 16) != 1 || len != 16) {
    throw Error(ErrorCode::kIo, "AES-128 block encryption failed");
  }
  return out;
}

std::string_view to_string(IoCapability io) {
  switch (io) {
    case IoCapability::kDisplayOnly: return "DisplayOnly";
    case IoCapability::kDisplayYesNo: return "DisplayYesNo";
    case IoCapability::kKeyboardOnly: return "KeyboardOnly";
    case IoCapability::kNoInputNoOutput: return "NoInputNoOutput";
    case IoCapability::kKeyboardDisplay: return "KeyboardDisplay";
  }
  return "?";
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::kJustWorks: return "JustWorks";
    case Method::kPasskey: return "Passkey";
    case Method::kOob: return "OOB";
  }
  return "?";
}

std::string_view to_string(PairingMode mode) {
  return mode == PairingMode::kLegacyLE ? "LegacyLE" : "SecureConnections";
}

IoCapability parse_io_capability(std::string_view text) {
  for (auto io : kAllIoCapabilities) {
    if (to_string(io) == text) return io;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown I/O capability '" + std::string(text) + "'");
}

Method parse_method(std::string_view text) {
  for (auto m : {Method::kJustWorks, Method::kPasskey, Method::kOob}) {
    if (to_string(m) == text) return m;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown association method '" + std::string(text) + "'");
}

PairingMode parse_pairing_mode(std::string_view text) {
  if (text == "LegacyLE") return PairingMode::kLegacyLE;
  if (text == "SecureConnections") return PairingMode::kSecureConnections;
  throw Error(ErrorCode::kInvalidArgument, "unknown pairing mode '" + std::string(text) + "'");
}

AssociationMethod select_association(IoCapability initiator, IoCapability responder,
                                     bool oob_available) {
  if (oob_available) return {Method::kOob, true};
  using enum IoCapability;
  constexpr AssociationMethod JW{Method::kJustWorks, false};
  constexpr AssociationMethod PK{Method::kPasskey, true};
  // Rows: responder; columns: initiator. Order follows IoCapability.
  //                 DispOnly DispYN KbdOnly NoIO KbdDisp
  constexpr AssociationMethod kMatrix[5][5] = {
      /* DisplayOnly     */ {JW, JW, PK, JW, PK},
      /* DisplayYesNo    */ {JW, JW, PK, JW, PK},
      /* KeyboardOnly    */ {PK, PK, PK, JW, PK},
      /* NoInputNoOutput */ {JW, JW, JW, JW, JW},
      /* KeyboardDisplay */ {PK, PK, PK, JW, PK},
  };
  return kMatrix[static_cast<int>(responder)][static_cast<int>(initiator)];
}

Key128 derive_tk(AssociationMethod method, std::optional<std::uint32_t> passkey,
                 std::mt19937_64& rng) {
  switch (method.method) {
    case Method::kJustWorks:
      return Key128{};
    case Method::kPasskey:
      if (!passkey) throw Error(ErrorCode::kInvalidArgument, "passkey entry required");
      if (*passkey >= kPasskeyCount) {
        throw Error(ErrorCode::kPasskeyOutOfRange, std::to_string(*passkey) + " is not six digits");
      }
      return key_from_integer(*passkey);
    case Method::kOob:
      return random_key(rng);
  }
  return Key128{};
}

Key128 confirm_value(const Key128& tk, const Key128& rand) {
  const Key128 inner = aes128_encrypt(tk, xor_block(rand, kConfirmPad1));
  return aes128_encrypt(tk, xor_block(inner, kConfirmPad2));
}

Key128 derive_stk(PairingMode mode, const Key128& tk, const Key128& m_rand, const Key128& s_rand) {
  if (mode != PairingMode::kLegacyLE) {
    throw Error(ErrorCode::kModeViolation, "STK exists only in legacy pairing");
  }
  Key128 r{};
  std::copy(m_rand.begin() + 8, m_rand.end(), r.begin());
  std::copy(s_rand.begin() + 8, s_rand.end(), r.begin() + 8);
  return aes128_encrypt(tk, r);
}

const Key128& KeyMaterial::session_key() const {
  if (ltk) return *ltk;
  if (stk) return *stk;
  throw Error(ErrorCode::kInvalidState, "no session key established");
}

nlohmann::ordered_json to_json(const PairingTranscript& t) {
  nlohmann::ordered_json j;
  j["mRand"] = key_hex(t.m_rand);
  j["sRand"] = key_hex(t.s_rand);
  j["mConfirm"] = key_hex(t.m_confirm);
  j["sConfirm"] = key_hex(t.s_confirm);
  j["mode"] = to_string(t.mode);
  j["method"] = to_string(t.method.method);
  j["authenticated"] = t.method.authenticated;
  if (t.public_values) j["publicValues"] = to_hex(*t.public_values);
  return j;
}

PairingTranscript transcript_from_json(const nlohmann::json& j) {
  try {
    PairingTranscript t;
    t.m_rand = key_from_hex(j.at("mRand").get<std::string>());
    t.s_rand = key_from_hex(j.at("sRand").get<std::string>());
    t.m_confirm = key_from_hex(j.at("mConfirm").get<std::string>());
    t.s_confirm = key_from_hex(j.at("sConfirm").get<std::string>());
    t.mode = parse_pairing_mode(j.at("mode").get<std::string>());
    t.method.method = parse_method(j.at("method").get<std::string>());
    t.method.authenticated = j.value("authenticated", t.method.method != Method::kJustWorks);
    if (j.contains("publicValues")) t.public_values = from_hex(j.at("publicValues").get<std::string>());
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("bad transcript: ") + e.what());
  }
}

PairingOutcome run_pairing(IoCapability /*initiator*/, IoCapability /*responder*/, PairingMode mode,
                           AssociationMethod method, std::mt19937_64& rng,
                           const PairingOptions& options) {
  PairingOutcome out;
  out.transcript.mode = mode;
  out.transcript.method = method;

  Key128 tk_m{};
  Key128 tk_s{};
  switch (method.method) {
    case Method::kJustWorks:
      break;
    case Method::kPasskey: {
      std::optional<std::uint32_t> m = options.initiator_passkey;
      std::optional<std::uint32_t> s = options.responder_passkey;
      if (!m && !s) {
        std::uniform_int_distribution<std::uint32_t> digits(0, kPasskeyCount - 1);
        m = s = digits(rng);
      } else if (!m) {
        m = s;
      } else if (!s) {
        s = m;
      }
      tk_m = derive_tk(method, m, rng);
      tk_s = derive_tk(method, s, rng);
      break;
    }
    case Method::kOob:
      // Delivered over the side channel; never appears in the transcript.
      tk_m = tk_s = derive_tk(method, std::nullopt, rng);
      break;
  }

  if (mode == PairingMode::kSecureConnections) {
    Bytes pub;
    for (int i = 0; i < 8; ++i) {
      const auto k = random_key(rng);
      pub.insert(pub.end(), k.begin(), k.end());
    }
    out.transcript.public_values = std::move(pub);
  }

  out.transcript.m_rand = random_key(rng);
  out.transcript.s_rand = random_key(rng);
  out.transcript.m_confirm = confirm_value(tk_m, out.transcript.m_rand);
  out.transcript.s_confirm = confirm_value(tk_s, out.transcript.s_rand);

  // Responder checks the initiator's commitment, then the reverse.
  if (confirm_value(tk_s, out.transcript.m_rand) != out.transcript.m_confirm ||
      confirm_value(tk_m, out.transcript.s_rand) != out.transcript.s_confirm) {
    throw Error(ErrorCode::kConfirmMismatch, "confirm values disagree; wrong passkey entry");
  }

  out.initiator.tk = tk_m;
  out.responder.tk = tk_s;
  if (mode == PairingMode::kLegacyLE) {
    out.initiator.stk = derive_stk(mode, tk_m, out.transcript.m_rand, out.transcript.s_rand);
    out.responder.stk = derive_stk(mode, tk_s, out.transcript.m_rand, out.transcript.s_rand);
  } else {
    // Key agreement is abstract: both sides receive the same LTK from the
    // simulation, independent of anything in the transcript.
    const Key128 ltk = random_key(rng);
    out.initiator.ltk = ltk;
    out.responder.ltk = ltk;
  }
  return out;
}

PasskeySearch search_passkey_serial(const PairingTranscript& t) {
  PasskeySearch result;
  for (std::uint32_t candidate = 0; candidate < kPasskeyCount; ++candidate) {
    ++result.candidates_checked;
    if (confirm_value(key_from_integer(candidate), t.m_rand) == t.m_confirm) {
      result.passkey = candidate;
      break;
    }
  }
  return result;
}

PasskeySearch search_passkey(const PairingTranscript& t) {
  constexpr std::uint32_t kNone = kPasskeyCount;
  std::atomic<std::uint32_t> best{kNone};
  std::uint64_t checked = 0;

#pragma omp parallel for schedule(static, 4096) reduction(+ : checked)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(kPasskeyCount); ++i) {
    const auto candidate = static_cast<std::uint32_t>(i);
    if (candidate > best.load(std::memory_order_relaxed)) continue;
    ++checked;
    if (confirm_value(key_from_integer(candidate), t.m_rand) == t.m_confirm) {
      std::uint32_t current = best.load();
      while (candidate < current && !best.compare_exchange_weak(current, candidate)) {
      }
    }
  }

  PasskeySearch result;
  result.candidates_checked = checked;
  if (best.load() != kNone) result.passkey = best.load();
  return result;
}

std::optional<Key128> eavesdrop_recover(const PairingTranscript& t) {
  if (t.mode != PairingMode::kLegacyLE) return std::nullopt;
  switch (t.method.method) {
    case Method::kJustWorks: {
      const Key128 tk{};
      if (confirm_value(tk, t.m_rand) != t.m_confirm) return std::nullopt;
      return derive_stk(t.mode, tk, t.m_rand, t.s_rand);
    }
    case Method::kPasskey: {
      const auto found = search_passkey(t);
      if (!found.passkey) return std::nullopt;
      return derive_stk(t.mode, key_from_integer(*found.passkey), t.m_rand, t.s_rand);
    }
    case Method::kOob:
      // 2^128 candidate TKs.
      return std::nullopt;
  }
  return std::nullopt;
}

Bytes encrypt_link(const Key128& session_key, std::uint64_t counter,
                   std::span<const std::uint8_t> plaintext, LinkDirection direction) {
  const auto nonce = link_nonce(counter, direction);
  auto ctx = new_ctx();
  Bytes out(plaintext.size() + kMicLength);
  int len = 0;
  const std::uint8_t dummy = 0;
  const std::uint8_t* in = plaintext.empty() ? &dummy : plaintext.data();
  if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_128_ccm(), nullptr, nullptr, nullptr) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_SET_IVLEN, 13, nullptr) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_SET_TAG, kMicLength, nullptr) != 1 ||
      EVP_EncryptInit_ex(ctx.get(), nullptr, nullptr, session_key.data(), nonce.data()) != 1 ||
      EVP_EncryptUpdate(ctx.get(), nullptr, &len, nullptr, static_cast<int>(plaintext.size())) != 1 ||
      EVP_EncryptUpdate(ctx.get(), out.data(), &len, in, static_cast<int>(plaintext.size())) != 1 ||
      EVP_EncryptFinal_ex(ctx.get(), out.data() + len, &len) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_GET_TAG, kMicLength,
                          out.data() + plaintext.size()) != 1) {
    throw Error(ErrorCode::kIo, "AES-CCM encryption failed");
  }
  return out;
}

Bytes decrypt_link(const Key128& session_key, std::uint64_t counter,
                   std::span<const std::uint8_t> ciphertext, LinkDirection direction) {
  if (ciphertext.size() < kMicLength) throw Error(ErrorCode::kAuthFailure, "ciphertext shorter than MIC");
  const auto nonce = link_nonce(counter, direction);
  const std::size_t body = ciphertext.size() - kMicLength;
  Bytes tag(ciphertext.end() - kMicLength, ciphertext.end());
  auto ctx = new_ctx();
  Bytes out(body == 0 ? 1 : body);
  int len = 0;
  const std::uint8_t dummy = 0;
  const std::uint8_t* in = body == 0 ? &dummy : ciphertext.data();
  if (EVP_DecryptInit_ex(ctx.get(), EVP_aes_128_ccm(), nullptr, nullptr, nullptr) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_SET_IVLEN, 13, nullptr) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_SET_TAG, kMicLength, tag.data()) != 1 ||
      EVP_DecryptInit_ex(ctx.get(), nullptr, nullptr, session_key.data(), nonce.data()) != 1 ||
      EVP_DecryptUpdate(ctx.get(), nullptr, &len, nullptr, static_cast<int>(body)) != 1) {
    throw Error(ErrorCode::kIo, "AES-CCM setup failed");
  }
  if (EVP_DecryptUpdate(ctx.get(), out.data(), &len, in, static_cast<int>(body)) <= 0) {
    throw Error(ErrorCode::kAuthFailure, "MIC check failed");
  }
  out.resize(body);
  return out;
}

}  // namespace blelab::pairing
