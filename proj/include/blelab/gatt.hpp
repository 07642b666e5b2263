#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blelab/common.hpp"

namespace blelab::gatt {

// 128-bit UUID held in big-endian byte order. 16-bit SIG identifiers are
// expanded against the base UUID 00000000-0000-1000-8000-00805f9b34fb, so a
// short and a full UUID compare equal exactly when the expansion matches.
class Uuid {
 public:
  constexpr Uuid() = default;

  static constexpr Uuid from_short(std::uint16_t value) {
    Uuid u;
    u.bytes_ = kBase;
    u.bytes_[2] = static_cast<std::uint8_t>(value >> 8);
    u.bytes_[3] = static_cast<std::uint8_t>(value & 0xff);
    return u;
  }
  static Uuid from_bytes(const std::array<std::uint8_t, 16>& bytes);

  // Accepts "0x2a37", "2A37" or the canonical 8-4-4-4-12 form.
  static Uuid parse(std::string_view text);

  // Set when the UUID lies in the SIG base range.
  std::optional<std::uint16_t> short_value() const;

  const std::array<std::uint8_t, 16>& bytes() const { return bytes_; }

  // "0x2a37" for SIG short UUIDs, lowercase canonical form otherwise.
  std::string str() const;

  friend constexpr auto operator<=>(const Uuid&, const Uuid&) = default;

 private:
  static constexpr std::array<std::uint8_t, 16> kBase = {
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x10, 0x00,
      0x80, 0x00, 0x00, 0x80, 0x5f, 0x9b, 0x34, 0xfb};

  std::array<std::uint8_t, 16> bytes_{};
};

inline constexpr Uuid kHeartRateServiceUuid = Uuid::from_short(0x180D);
inline constexpr Uuid kHeartRateMeasurementUuid = Uuid::from_short(0x2A37);

// ATT characteristic property bits.
enum class Property : std::uint8_t {
  kRead = 0x02,
  kWrite = 0x08,
  kNotify = 0x10,
  kIndicate = 0x20,
};

constexpr std::uint8_t operator|(Property a, Property b) {
  return static_cast<std::uint8_t>(static_cast<std::uint8_t>(a) | static_cast<std::uint8_t>(b));
}
constexpr std::uint8_t operator|(std::uint8_t a, Property b) {
  return static_cast<std::uint8_t>(a | static_cast<std::uint8_t>(b));
}

inline constexpr std::size_t kMaxAttributeValue = 512;

struct Characteristic {
  Uuid uuid;
  std::uint16_t handle = 0;
  std::uint8_t properties = 0;
  Bytes value;
  bool notifications_enabled = false;

  bool has(Property p) const { return (properties & static_cast<std::uint8_t>(p)) != 0; }

  friend bool operator==(const Characteristic&, const Characteristic&) = default;
};

struct Service {
  Uuid uuid;
  std::uint16_t handle = 0;
  std::vector<Characteristic> characteristics;

  friend bool operator==(const Service&, const Service&) = default;
};

// Ordered list of services. Handles are handed out from 1 upward in
// insertion order, so characteristics can only be appended to the most
// recently added service.
class AttributeDatabase {
 public:
  Service& add_service(const Uuid& uuid);
  Characteristic& add_characteristic(const Uuid& service, const Uuid& uuid,
                                     std::uint8_t properties, Bytes initial = {});

  const std::vector<Service>& services() const { return services_; }

  Characteristic* find(const Uuid& characteristic);
  const Characteristic* find(const Uuid& characteristic) const;

  // Throws kUnknownUuid.
  const Characteristic& at(const Uuid& characteristic) const;

  // Throws kHandleOrder / kDuplicateAttribute / kAttributeTooLong.
  void validate() const;

  // Same services, characteristics, handles and properties; values ignored.
  bool same_structure(const AttributeDatabase& other) const;

  friend bool operator==(const AttributeDatabase&, const AttributeDatabase&) = default;
  friend AttributeDatabase decode_structure(std::span<const std::uint8_t> bytes);

 private:
  std::vector<Service> services_;
  std::uint16_t next_handle_ = 1;
};

// Heart-rate service 0x180D with measurement characteristic 0x2A37 {read, notify}.
AttributeDatabase build_heart_rate_profile();

enum class HrFormat : std::uint8_t { kUint8, kUint16 };

struct HeartRateMeasurement {
  HrFormat format = HrFormat::kUint8;
  unsigned bpm = 0;
  std::optional<bool> sensor_contact;

  friend bool operator==(const HeartRateMeasurement&, const HeartRateMeasurement&) = default;
};

// Layout: flags byte, then bpm little-endian. Flags bit0 selects uint16,
// bits 1-2 carry sensor contact (0b00 absent, 0b10 supported/not detected,
// 0b11 supported/detected).
Bytes encode_hr_measurement(const HeartRateMeasurement& m);
HeartRateMeasurement decode_hr_measurement(std::span<const std::uint8_t> bytes);

enum class OpKind : std::uint8_t {
  kRead = 1,
  kReadResponse = 2,
  kWrite = 3,
  kNotify = 4,
  kSubscribe = 5,
  kDiscover = 6,
  kDiscoverResponse = 7,
};

std::string_view to_string(OpKind kind);

struct GattOp {
  OpKind kind = OpKind::kRead;
  Uuid target;
  Bytes payload;
  std::uint64_t op_id = 0;

  friend bool operator==(const GattOp&, const GattOp&) = default;
};

// Read -> ReadResponse carrying the current value. Write replaces the value.
// Notify updates the stored value on the owner side. Subscribe with payload
// {0x00,0x00} disables notifications, anything else enables them. Discover
// returns the encoded database structure. Errors: kUnknownUuid,
// kPropertyViolation, kAttributeTooLong, kInvalidArgument.
std::optional<GattOp> apply_gatt_op(AttributeDatabase& db, const GattOp& op);

// Wire form: kind, op_id (u32 LE), uuid length (2 or 16), uuid bytes, payload.
Bytes encode_op(const GattOp& op);
GattOp decode_op(std::span<const std::uint8_t> bytes);

// Structure-only serialization used by discovery; values are not carried.
Bytes encode_structure(const AttributeDatabase& db);
AttributeDatabase decode_structure(std::span<const std::uint8_t> bytes);

}  // namespace blelab::gatt
