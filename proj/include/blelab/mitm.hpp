#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blelab/actors.hpp"
#include "blelab/common.hpp"
#include "blelab/gatt.hpp"

namespace blelab::mitm {

enum class Direction { kToCentral, kToPeripheral, kBoth };
std::string_view to_string(Direction d);
Direction parse_direction(std::string_view text);

struct Transform {
  enum class Kind { kPassthrough, kConstantOverride, kHrOverride, kHrOffset };
  Kind kind = Kind::kPassthrough;
  Bytes bytes;        // kConstantOverride
  unsigned bpm = 0;   // kHrOverride
  int delta = 0;      // kHrOffset

  static Transform passthrough() { return {}; }
  static Transform constant(Bytes b) { return {Kind::kConstantOverride, std::move(b), 0, 0}; }
  static Transform hr_override(unsigned bpm) { return {Kind::kHrOverride, {}, bpm, 0}; }
  static Transform hr_offset(int delta) { return {Kind::kHrOffset, {}, 0, delta}; }
};

struct ModificationRule {
  gatt::Uuid match_uuid = gatt::kHeartRateMeasurementUuid;
  Direction direction = Direction::kBoth;
  Transform transform;

  // HR transforms only make sense on 0x2A37.
  void validate() const;
  bool matches(const gatt::Uuid& uuid, Direction dir) const;
};

// {match_uuid, direction, transform: {kind, bytes_hex | bpm | delta}}
nlohmann::ordered_json to_json(const ModificationRule& rule);
ModificationRule rule_from_json(const nlohmann::json& j);

// HR transforms decode, adjust and re-encode (widening to uint16 past 255,
// clamping to [0, 65535]); undecodable payloads pass through unchanged.
Bytes apply_transform(const Transform& t, std::span<const std::uint8_t> payload);

enum class Decision { kAuto, kManualForward, kManualModify, kManualDrop, kTimeoutForward };
std::string_view to_string(Decision d);

struct OpLogEntry {
  std::uint64_t op_id = 0;
  SimTime time_ms = 0;
  Direction direction = Direction::kToCentral;
  gatt::OpKind kind = gatt::OpKind::kNotify;
  gatt::Uuid uuid;
  Bytes before;
  // Proposed bytes while held; what was sent once decided; empty after a drop.
  Bytes after;
  std::optional<Decision> decision;  // empty while held
  std::optional<std::uint64_t> replay_of;

  bool held() const { return !decision.has_value(); }
};

// {op_id, time_ms, direction, uuid, before_hex, after_hex, decision[, kind, replay_of]}
std::string to_json_line(const OpLogEntry& entry);

enum class SessionState { kCloning, kReady, kActive, kStopped };
std::string_view to_string(SessionState s);

struct FakeDevice {
  std::string address;
  Bytes adv_data;
  gatt::AttributeDatabase db;
};

struct OperatorDecision {
  enum class Action { kForward, kModify, kDrop };
  Action action = Action::kForward;
  Bytes bytes;  // kModify

  static OperatorDecision forward() { return {}; }
  static OperatorDecision modify(Bytes b) { return {Action::kModify, std::move(b)}; }
  static OperatorDecision drop() { return {Action::kDrop, {}}; }
};

// An op leaving the proxy: what to send and which way.
struct Release {
  std::uint64_t op_id = 0;
  Direction direction = Direction::kToCentral;
  gatt::GattOp op;
};

struct ForwardResult {
  std::uint64_t op_id = 0;
  std::optional<gatt::GattOp> out;
  bool held = false;
};

inline constexpr SimTime kDefaultHoldTimeoutMs = 30'000;

// Interception bookkeeping: rules, manual holds, the journal and replays.
// Knows nothing about radios; the attacker actor moves the bytes.
class MitmSession {
 public:
  MitmSession(DeviceId target, std::string fake_address, SimTime hold_timeout_ms = kDefaultHoldTimeoutMs);

  // Throws kTargetNotObserved without an advert. Cloning -> Ready.
  FakeDevice clone_target(const std::optional<Bytes>& observed_adv, const gatt::AttributeDatabase& db);
  // Throws kVictimAlreadyConnected. Ready -> Active.
  void start(bool victim_connected_to_target);
  void stop();

  SessionState state() const { return state_; }
  const DeviceId& target() const { return target_; }
  const std::string& fake_address() const { return fake_address_; }
  SimTime hold_timeout_ms() const { return hold_timeout_ms_; }

  void set_rules(std::vector<ModificationRule> rules);
  const std::vector<ModificationRule>& rules() const { return rules_; }
  // In manual mode every op matched by a rule is held; with no rules at all,
  // every op is.
  void set_manual(bool on) { manual_ = on; }
  bool manual() const { return manual_; }

  // First matching rule wins. Requires Active.
  ForwardResult forward(const gatt::GattOp& op, Direction direction, SimTime now);
  // Throws kNotHeld.
  std::optional<Release> decide(std::uint64_t op_id, const OperatorDecision& decision, SimTime now);
  // Releases every hold older than the timeout, oldest first.
  std::vector<Release> expire(SimTime now);
  // Throws kUnknownOpId, or kInvalidState for a held or dropped entry.
  Release replay(std::uint64_t op_id, SimTime now);

  const std::vector<OpLogEntry>& journal() const { return journal_; }
  const OpLogEntry& entry(std::uint64_t op_id) const;
  std::vector<std::uint64_t> held_ids() const;

 private:
  OpLogEntry& mutable_entry(std::uint64_t op_id);
  Release release(OpLogEntry& e, Decision d, std::optional<Bytes> bytes);

  DeviceId target_;
  std::string fake_address_;
  SimTime hold_timeout_ms_;
  SessionState state_ = SessionState::kCloning;
  std::vector<ModificationRule> rules_;
  bool manual_ = false;
  std::vector<OpLogEntry> journal_;
  std::map<std::uint64_t, gatt::GattOp> held_;
  std::uint64_t next_id_ = 1;
};

// Derives a locally administered address that differs from every address
// in `taken`.
std::string make_fake_address(const std::string& target_address, const std::vector<std::string>& taken);

struct AttackerConfig {
  DeviceId core_id = "eve-core";
  DeviceId proxy_id = "eve-proxy";
  std::string core_address = "00:1a:7d:da:71:13";
  SimTime proxy_adv_interval_ms = 20;
  SimTime proxy_processing_ms = 2;
  SimTime hold_timeout_ms = kDefaultHoldTimeoutMs;
  pairing::PairingMode mode = pairing::PairingMode::kLegacyLE;
  bool oob_available = false;
  std::vector<ModificationRule> rules;
  bool manual = false;
};

class MitmAttacker;

// Fake central toward the real peripheral.
class InterceptionCore : public actors::GattClient {
 public:
  InterceptionCore(radio::Radio& radio, actors::PairingBroker& broker, Options options, MitmAttacker& owner);

 protected:
  void on_ready() override;
  void on_gatt_op(const gatt::GattOp& op) override;
  void on_echo_response(bool rejected) override;
  void on_link_down() override;

 private:
  MitmAttacker& owner_;
};

// Fake peripheral toward the real central, built from the clone.
class ProxyFace : public actors::GattServer {
 public:
  ProxyFace(radio::Radio& radio, actors::PairingBroker& broker, Options options, MitmAttacker& owner);

  void load_clone(const FakeDevice& fake);

 protected:
  bool intercept(const gatt::GattOp& op) override;
  void on_echo_request() override;

 private:
  MitmAttacker& owner_;
};

// Both halves plus the session. Devices are registered up front; the core
// observes adverts from the start so the target is known when launched.
class MitmAttacker {
 public:
  MitmAttacker(radio::Radio& radio, actors::PairingBroker& broker, AttackerConfig config);

  MitmAttacker(const MitmAttacker&) = delete;
  MitmAttacker& operator=(const MitmAttacker&) = delete;

  // Registers both halves; the proxy gets a fake address derived from the
  // target's, distinct from every address registered so far.
  void register_devices(const DeviceId& target);
  void start_observing();

  // Connects the core to the target, pairs, discovers, clones, then starts
  // the session once `victim` is not connected to the target.
  void launch(const DeviceId& victim);
  void stop();

  // Control surface (applied inside the simulation loop).
  void set_rules(std::vector<ModificationRule> rules);
  void set_manual(bool on);
  void decide(std::uint64_t op_id, const OperatorDecision& decision);
  void replay(std::uint64_t op_id);

  const std::optional<MitmSession>& session() const { return session_; }
  const InterceptionCore& core() const { return core_; }
  const ProxyFace& proxy() const { return proxy_; }
  const AttackerConfig& config() const { return config_; }

  // Every journal append or update (held, decided, expired, replayed).
  std::function<void(const OpLogEntry&)> journal_hook;
  std::function<void(SessionState)> state_hook;

 private:
  friend class InterceptionCore;
  friend class ProxyFace;

  void core_ready();
  void from_peripheral(const gatt::GattOp& op);
  void from_central(const gatt::GattOp& op);
  void echo_from_central();
  void echo_from_peripheral(bool rejected);
  void core_lost();
  void dispatch(const Release& r);
  void after_forward(const ForwardResult& r);
  void publish(std::uint64_t op_id);
  void emit_state();

  radio::Radio& radio_;
  AttackerConfig config_;
  InterceptionCore core_;
  ProxyFace proxy_;
  std::optional<MitmSession> session_;
  DeviceId target_;
  std::string fake_address_;
  DeviceId victim_;
  // Core-side Read op id -> victim-side Read op id.
  std::map<std::uint64_t, std::uint64_t> pending_reads_;
  int pending_echoes_ = 0;
};

}  // namespace blelab::mitm
