#include "blelab/gatt.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <utility>

namespace blelab::gatt {

Uuid Uuid::from_bytes(const std::array<std::uint8_t, 16>& bytes) {
  Uuid u;
  u.bytes_ = bytes;
  return u;
}

Uuid Uuid::parse(std::string_view text) {
  std::string digits;
  std::string_view body = text;
  if (body.size() > 2 && body[0] == '0' && (body[1] == 'x' || body[1] == 'X')) {
    body.remove_prefix(2);
  }
  for (char c : body) {
    if (c == '-') continue;
    digits.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (digits.size() == 4) {
    Bytes b = from_hex(digits);
    return from_short(static_cast<std::uint16_t>((b[0] << 8) | b[1]));
  }
  if (digits.size() == 32) {
    Bytes b = from_hex(digits);
    std::array<std::uint8_t, 16> arr{};
    std::copy(b.begin(), b.end(), arr.begin());
    return from_bytes(arr);
  }
  throw Error(ErrorCode::kInvalidArgument, "malformed UUID '" + std::string(text) + "'");
}

std::optional<std::uint16_t> Uuid::short_value() const {
  for (std::size_t i = 0; i < bytes_.size(); ++i) {
    if (i == 2 || i == 3) continue;
    if (bytes_[i] != kBase[i]) return std::nullopt;
  }
  if (bytes_[0] != 0 || bytes_[1] != 0) return std::nullopt;
  return static_cast<std::uint16_t>((bytes_[2] << 8) | bytes_[3]);
}

std::string Uuid::str() const {
  if (auto s = short_value()) {
    const std::uint8_t be[2] = {static_cast<std::uint8_t>(*s >> 8),
                                static_cast<std::uint8_t>(*s & 0xff)};
    return "0x" + to_hex(be);
  }
  std::string hex = to_hex(bytes_);
  return hex.substr(0, 8) + "-" + hex.substr(8, 4) + "-" + hex.substr(12, 4) + "-" +
         hex.substr(16, 4) + "-" + hex.substr(20, 12);
}

Service& AttributeDatabase::add_service(const Uuid& uuid) {
  for (const auto& s : services_) {
    if (s.uuid == uuid) {
      throw Error(ErrorCode::kDuplicateAttribute, "service " + uuid.str() + " already present");
    }
  }
  Service s;
  s.uuid = uuid;
  s.handle = next_handle_++;
  services_.push_back(std::move(s));
  return services_.back();
}

Characteristic& AttributeDatabase::add_characteristic(const Uuid& service, const Uuid& uuid,
                                                      std::uint8_t properties, Bytes initial) {
  if (services_.empty() || services_.back().uuid != service) {
    throw Error(ErrorCode::kHandleOrder,
                "characteristics may only be appended to the last service");
  }
  if (initial.size() > kMaxAttributeValue) {
    throw Error(ErrorCode::kAttributeTooLong, "initial value exceeds 512 bytes");
  }
  auto& svc = services_.back();
  for (const auto& c : svc.characteristics) {
    if (c.uuid == uuid) {
      throw Error(ErrorCode::kDuplicateAttribute,
                  "characteristic " + uuid.str() + " already in service " + service.str());
    }
  }
  Characteristic c;
  c.uuid = uuid;
  c.handle = next_handle_++;
  c.properties = properties;
  c.value = std::move(initial);
  svc.characteristics.push_back(std::move(c));
  return svc.characteristics.back();
}

Characteristic* AttributeDatabase::find(const Uuid& characteristic) {
  for (auto& s : services_) {
    for (auto& c : s.characteristics) {
      if (c.uuid == characteristic) return &c;
    }
  }
  return nullptr;
}

const Characteristic* AttributeDatabase::find(const Uuid& characteristic) const {
  return const_cast<AttributeDatabase*>(this)->find(characteristic);
}

const Characteristic& AttributeDatabase::at(const Uuid& characteristic) const {
  const auto* c = find(characteristic);
  if (c == nullptr) {
    throw Error(ErrorCode::kUnknownUuid, characteristic.str());
  }
  return *c;
}

void AttributeDatabase::validate() const {
  int last = 0;
  std::set<std::pair<Uuid, Uuid>> seen;
  for (const auto& s : services_) {
    if (s.handle <= last) throw Error(ErrorCode::kHandleOrder, "service " + s.uuid.str());
    last = s.handle;
    for (const auto& c : s.characteristics) {
      if (c.handle <= last) throw Error(ErrorCode::kHandleOrder, "characteristic " + c.uuid.str());
      last = c.handle;
      if (!seen.emplace(s.uuid, c.uuid).second) {
        throw Error(ErrorCode::kDuplicateAttribute, c.uuid.str());
      }
      if (c.value.size() > kMaxAttributeValue) {
        throw Error(ErrorCode::kAttributeTooLong, c.uuid.str());
      }
    }
  }
}

bool AttributeDatabase::same_structure(const AttributeDatabase& other) const {
  if (services_.size() != other.services_.size()) return false;
  for (std::size_t i = 0; i < services_.size(); ++i) {
    const auto& a = services_[i];
    const auto& b = other.services_[i];
    if (a.uuid != b.uuid || a.handle != b.handle) return false;
    if (a.characteristics.size() != b.characteristics.size()) return false;
    for (std::size_t j = 0; j < a.characteristics.size(); ++j) {
      const auto& x = a.characteristics[j];
      const auto& y = b.characteristics[j];
      if (x.uuid != y.uuid || x.handle != y.handle || x.properties != y.properties) return false;
    }
  }
  return true;
}

AttributeDatabase build_heart_rate_profile() {
  AttributeDatabase db;
  db.add_service(kHeartRateServiceUuid);
  db.add_characteristic(kHeartRateServiceUuid, kHeartRateMeasurementUuid,
                        Property::kRead | Property::kNotify);
  return db;
}

Bytes encode_hr_measurement(const HeartRateMeasurement& m) {
  const bool wide = m.format == HrFormat::kUint16;
  const unsigned limit = wide ? 0xffffu : 0xffu;
  if (m.bpm > limit) {
    throw Error(ErrorCode::kValueOutOfRange,
                "bpm " + std::to_string(m.bpm) + " does not fit the selected format");
  }
  std::uint8_t flags = wide ? 0x01 : 0x00;
  if (m.sensor_contact.has_value()) {
    flags |= 0x04;
    if (*m.sensor_contact) flags |= 0x02;
  }
  Bytes out{flags, static_cast<std::uint8_t>(m.bpm & 0xff)};
  if (wide) out.push_back(static_cast<std::uint8_t>(m.bpm >> 8));
  return out;
}

HeartRateMeasurement decode_hr_measurement(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2) {
    throw Error(ErrorCode::kTooShort, "heart-rate measurement needs at least 2 bytes");
  }
  const std::uint8_t flags = bytes[0];
  const bool wide = (flags & 0x01) != 0;
  const std::size_t needed = wide ? 3 : 2;
  // Energy-expended (bit3) and RR-interval (bit4) fields may trail the value.
  const bool optional_fields = (flags & 0x18) != 0;
  if (bytes.size() < needed || (!optional_fields && bytes.size() != needed)) {
    throw Error(ErrorCode::kLengthMismatch,
                "length " + std::to_string(bytes.size()) + " inconsistent with flags");
  }
  HeartRateMeasurement m;
  m.format = wide ? HrFormat::kUint16 : HrFormat::kUint8;
  m.bpm = wide ? static_cast<unsigned>(bytes[1] | (bytes[2] << 8)) : bytes[1];
  switch ((flags >> 1) & 0x03) {
    case 0x02: m.sensor_contact = false; break;
    case 0x03: m.sensor_contact = true; break;
    default: break;
  }
  return m;
}

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::kRead: return "Read";
    case OpKind::kReadResponse: return "ReadResponse";
    case OpKind::kWrite: return "Write";
    case OpKind::kNotify: return "Notify";
    case OpKind::kSubscribe: return "Subscribe";
    case OpKind::kDiscover: return "Discover";
    case OpKind::kDiscoverResponse: return "DiscoverResponse";
  }
  return "?";
}

std::optional<GattOp> apply_gatt_op(AttributeDatabase& db, const GattOp& op) {
  if (op.kind == OpKind::kDiscover) {
    return GattOp{OpKind::kDiscoverResponse, op.target, encode_structure(db), op.op_id};
  }
  auto* c = db.find(op.target);
  if (c == nullptr) {
    throw Error(ErrorCode::kUnknownUuid, op.target.str());
  }
  switch (op.kind) {
    case OpKind::kRead:
      if (!c->has(Property::kRead)) {
        throw Error(ErrorCode::kPropertyViolation, "read not permitted on " + op.target.str());
      }
      return GattOp{OpKind::kReadResponse, op.target, c->value, op.op_id};
    case OpKind::kWrite:
      if (!c->has(Property::kWrite)) {
        throw Error(ErrorCode::kPropertyViolation, "write not permitted on " + op.target.str());
      }
      if (op.payload.size() > kMaxAttributeValue) {
        throw Error(ErrorCode::kAttributeTooLong, "write exceeds 512 bytes");
      }
      c->value = op.payload;
      return std::nullopt;
    case OpKind::kNotify:
      if (!c->has(Property::kNotify)) {
        throw Error(ErrorCode::kPropertyViolation, "notify not permitted on " + op.target.str());
      }
      if (op.payload.size() > kMaxAttributeValue) {
        throw Error(ErrorCode::kAttributeTooLong, "notification exceeds 512 bytes");
      }
      c->value = op.payload;
      return std::nullopt;
    case OpKind::kSubscribe: {
      if (!c->has(Property::kNotify)) {
        throw Error(ErrorCode::kPropertyViolation, op.target.str() + " does not notify");
      }
      const bool disable = op.payload.size() == 2 && op.payload[0] == 0 && op.payload[1] == 0;
      c->notifications_enabled = !disable;
      return std::nullopt;
    }
    case OpKind::kReadResponse:
    case OpKind::kDiscoverResponse:
    case OpKind::kDiscover:
      break;
  }
  throw Error(ErrorCode::kInvalidArgument,
              std::string(to_string(op.kind)) + " cannot be applied to a database");
}

namespace {

void put_uuid(Bytes& out, const Uuid& uuid, bool allow_short) {
  if (auto s = uuid.short_value(); s && allow_short) {
    out.push_back(2);
    out.push_back(static_cast<std::uint8_t>(*s & 0xff));
    out.push_back(static_cast<std::uint8_t>(*s >> 8));
    return;
  }
  out.push_back(16);
  const auto& b = uuid.bytes();
  out.insert(out.end(), b.rbegin(), b.rend());
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t lo = u16();
    std::uint32_t hi = u16();
    return lo | (hi << 16);
  }
  Uuid uuid() {
    const auto len = u8();
    if (len == 2) {
      auto lo = u8();
      auto hi = u8();
      return Uuid::from_short(static_cast<std::uint16_t>(lo | (hi << 8)));
    }
    if (len != 16) throw Error(ErrorCode::kLengthMismatch, "uuid length must be 2 or 16");
    need(16);
    std::array<std::uint8_t, 16> arr{};
    for (int i = 15; i >= 0; --i) arr[static_cast<std::size_t>(i)] = bytes_[pos_++];
    return Uuid::from_bytes(arr);
  }
  Bytes rest() {
    Bytes out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.end());
    pos_ = bytes_.size();
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error(ErrorCode::kTooShort, "truncated GATT PDU");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Bytes encode_op(const GattOp& op) {
  Bytes out;
  out.reserve(8 + op.payload.size());
  out.push_back(static_cast<std::uint8_t>(op.kind));
  const auto id = static_cast<std::uint32_t>(op.op_id);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(id >> (8 * i)));
  put_uuid(out, op.target, true);
  out.insert(out.end(), op.payload.begin(), op.payload.end());
  return out;
}

GattOp decode_op(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  GattOp op;
  const auto kind = r.u8();
  if (kind < 1 || kind > 7) {
    throw Error(ErrorCode::kInvalidArgument, "unknown GATT op kind " + std::to_string(kind));
  }
  op.kind = static_cast<OpKind>(kind);
  op.op_id = r.u32();
  op.target = r.uuid();
  op.payload = r.rest();
  return op;
}

Bytes encode_structure(const AttributeDatabase& db) {
  Bytes out;
  out.push_back(static_cast<std::uint8_t>(db.services().size()));
  for (const auto& s : db.services()) {
    out.push_back(static_cast<std::uint8_t>(s.handle & 0xff));
    out.push_back(static_cast<std::uint8_t>(s.handle >> 8));
    put_uuid(out, s.uuid, true);
    out.push_back(static_cast<std::uint8_t>(s.characteristics.size()));
    for (const auto& c : s.characteristics) {
      out.push_back(static_cast<std::uint8_t>(c.handle & 0xff));
      out.push_back(static_cast<std::uint8_t>(c.handle >> 8));
      out.push_back(c.properties);
      put_uuid(out, c.uuid, true);
    }
  }
  return out;
}

AttributeDatabase decode_structure(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  AttributeDatabase db;
  const auto n_services = r.u8();
  for (int i = 0; i < n_services; ++i) {
    Service s;
    s.handle = r.u16();
    s.uuid = r.uuid();
    const auto n_chars = r.u8();
    for (int j = 0; j < n_chars; ++j) {
      Characteristic c;
      c.handle = r.u16();
      c.properties = r.u8();
      c.uuid = r.uuid();
      s.characteristics.push_back(std::move(c));
    }
    db.services_.push_back(std::move(s));
  }
  if (!r.done()) throw Error(ErrorCode::kLengthMismatch, "trailing bytes after structure");
  db.validate();
  std::uint16_t max_handle = 0;
  for (const auto& s : db.services_) {
    max_handle = std::max(max_handle, s.handle);
    for (const auto& c : s.characteristics) max_handle = std::max(max_handle, c.handle);
  }
  db.next_handle_ = static_cast<std::uint16_t>(max_handle + 1);
  return db;
}

}  // namespace blelab::gatt
