#include "blelab/mitm.hpp"

#include <algorithm>
#include <cstdio>

namespace blelab::mitm {

using gatt::GattOp;
using gatt::OpKind;
using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::kToCentral: return "toCentral";
    case Direction::kToPeripheral: return "toPeripheral";
    case Direction::kBoth: return "both";
  }
  return "?";
}

Direction parse_direction(std::string_view text) {
  if (text == "toCentral") return Direction::kToCentral;
  if (text == "toPeripheral") return Direction::kToPeripheral;
  if (text == "both") return Direction::kBoth;
  throw Error(ErrorCode::kInvalidArgument, "unknown direction '" + std::string(text) + "'");
}

void ModificationRule::validate() const {
  const bool hr = transform.kind == Transform::Kind::kHrOverride || transform.kind == Transform::Kind::kHrOffset;
  if (hr && match_uuid != gatt::kHeartRateMeasurementUuid) {
    throw Error(ErrorCode::kConfigInvalid, "HR transforms only apply to 0x2a37, got " + match_uuid.str());
  }
  if (transform.kind == Transform::Kind::kHrOverride && transform.bpm > 0xFFFF) {
    throw Error(ErrorCode::kConfigInvalid, "HrOverride bpm out of range");
  }
  if (transform.kind == Transform::Kind::kConstantOverride && transform.bytes.size() > gatt::kMaxAttributeValue) {
    throw Error(ErrorCode::kConfigInvalid, "ConstantOverride longer than 512 bytes");
  }
}

bool ModificationRule::matches(const gatt::Uuid& uuid, Direction dir) const {
  return uuid == match_uuid && (direction == Direction::kBoth || direction == dir);
}

ordered_json to_json(const ModificationRule& rule) {
  ordered_json t;
  switch (rule.transform.kind) {
    case Transform::Kind::kPassthrough:
      t["kind"] = "Passthrough";
      break;
    case Transform::Kind::kConstantOverride:
      t["kind"] = "ConstantOverride";
      t["bytes_hex"] = to_hex(rule.transform.bytes);
      break;
    case Transform::Kind::kHrOverride:
      t["kind"] = "HrOverride";
      t["bpm"] = rule.transform.bpm;
      break;
    case Transform::Kind::kHrOffset:
      t["kind"] = "HrOffset";
      t["delta"] = rule.transform.delta;
      break;
  }
  ordered_json j;
  j["match_uuid"] = rule.match_uuid.str();
  j["direction"] = to_string(rule.direction);
  j["transform"] = t;
  return j;
}

ModificationRule rule_from_json(const json& j) {
  ModificationRule r;
  try {
    for (const auto& [key, _] : j.items()) {
      if (key != "match_uuid" && key != "direction" && key != "transform") {
        throw Error(ErrorCode::kConfigInvalid, "unknown rule field '" + key + "'");
      }
    }
    if (j.contains("match_uuid")) r.match_uuid = gatt::Uuid::parse(j.at("match_uuid").get<std::string>());
    if (j.contains("direction")) r.direction = parse_direction(j.at("direction").get<std::string>());
    const json& t = j.at("transform");
    const auto kind = t.at("kind").get<std::string>();
    if (kind == "Passthrough") {
      r.transform = Transform::passthrough();
    } else if (kind == "ConstantOverride") {
      r.transform = Transform::constant(from_hex(t.at("bytes_hex").get<std::string>()));
    } else if (kind == "HrOverride") {
      r.transform = Transform::hr_override(t.at("bpm").get<unsigned>());
    } else if (kind == "HrOffset") {
      r.transform = Transform::hr_offset(t.at("delta").get<int>());
    } else {
      throw Error(ErrorCode::kConfigInvalid, "unknown transform kind '" + kind + "'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, std::string("bad rule: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfigInvalid) throw;
    throw Error(ErrorCode::kConfigInvalid, std::string("bad rule: ") + e.what());
  }
  r.validate();
  return r;
}

Bytes apply_transform(const Transform& t, std::span<const std::uint8_t> payload) {
  switch (t.kind) {
    case Transform::Kind::kPassthrough:
      return Bytes(payload.begin(), payload.end());
    case Transform::Kind::kConstantOverride:
      return t.bytes;
    case Transform::Kind::kHrOverride:
    case Transform::Kind::kHrOffset:
      break;
  }
  gatt::HeartRateMeasurement m;
  try {
    m = gatt::decode_hr_measurement(payload);
  } catch (const Error&) {
    return Bytes(payload.begin(), payload.end());
  }
  long bpm = t.kind == Transform::Kind::kHrOverride ? static_cast<long>(t.bpm) : static_cast<long>(m.bpm) + t.delta;
  bpm = std::clamp<long>(bpm, 0, 0xFFFF);
  m.bpm = static_cast<unsigned>(bpm);
  if (m.bpm > 255) m.format = gatt::HrFormat::kUint16;
  return gatt::encode_hr_measurement(m);
}

std::string_view to_string(Decision d) {
  switch (d) {
    case Decision::kAuto: return "auto";
    case Decision::kManualForward: return "manual-forward";
    case Decision::kManualModify: return "manual-modify";
    case Decision::kManualDrop: return "manual-drop";
    case Decision::kTimeoutForward: return "timeout-forward";
  }
  return "?";
}

std::string to_json_line(const OpLogEntry& e) {
  ordered_json j;
  j["op_id"] = e.op_id;
  j["time_ms"] = e.time_ms;
  j["direction"] = to_string(e.direction);
  j["uuid"] = e.uuid.str();
  j["before_hex"] = to_hex(e.before);
  j["after_hex"] = to_hex(e.after);
  j["decision"] = e.decision ? std::string(to_string(*e.decision)) : std::string("held");
  j["kind"] = gatt::to_string(e.kind);
  if (e.replay_of) j["replay_of"] = *e.replay_of;
  return j.dump();
}

std::string_view to_string(SessionState s) {
  switch (s) {
    case SessionState::kCloning: return "Cloning";
    case SessionState::kReady: return "Ready";
    case SessionState::kActive: return "Active";
    case SessionState::kStopped: return "Stopped";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// MitmSession

MitmSession::MitmSession(DeviceId target, std::string fake_address, SimTime hold_timeout_ms)
    : target_(std::move(target)), fake_address_(std::move(fake_address)), hold_timeout_ms_(hold_timeout_ms) {
  if (hold_timeout_ms_ <= 0) throw Error(ErrorCode::kInvalidArgument, "hold timeout must be > 0");
}

FakeDevice MitmSession::clone_target(const std::optional<Bytes>& observed_adv, const gatt::AttributeDatabase& db) {
  if (state_ != SessionState::kCloning) throw Error(ErrorCode::kInvalidState, "session already cloned");
  if (!observed_adv) throw Error(ErrorCode::kTargetNotObserved, target_ + " has not been seen advertising");
  FakeDevice fake{fake_address_, *observed_adv, db};
  fake.db.validate();
  state_ = SessionState::kReady;
  return fake;
}

void MitmSession::start(bool victim_connected_to_target) {
  if (state_ != SessionState::kReady) {
    throw Error(ErrorCode::kInvalidState, "cannot start from " + std::string(to_string(state_)));
  }
  if (victim_connected_to_target) {
    throw Error(ErrorCode::kVictimAlreadyConnected, "victim is still connected to " + target_);
  }
  state_ = SessionState::kActive;
}

void MitmSession::stop() { state_ = SessionState::kStopped; }

void MitmSession::set_rules(std::vector<ModificationRule> rules) {
  for (const auto& r : rules) r.validate();
  rules_ = std::move(rules);
}

ForwardResult MitmSession::forward(const GattOp& op, Direction direction, SimTime now) {
  if (state_ != SessionState::kActive) throw Error(ErrorCode::kInvalidState, "session is not active");
  if (direction == Direction::kBoth) throw Error(ErrorCode::kInvalidArgument, "an op travels one way");

  const ModificationRule* rule = nullptr;
  for (const auto& r : rules_) {
    if (r.matches(op.target, direction)) {
      rule = &r;
      break;
    }
  }

  OpLogEntry e;
  e.op_id = next_id_++;
  e.time_ms = now;
  e.direction = direction;
  e.kind = op.kind;
  e.uuid = op.target;
  e.before = op.payload;
  e.after = rule ? apply_transform(rule->transform, op.payload) : op.payload;

  ForwardResult result{e.op_id, std::nullopt, false};
  if (manual_ && (rule != nullptr || rules_.empty())) {
    held_[e.op_id] = op;
    result.held = true;
  } else {
    e.decision = Decision::kAuto;
    GattOp out = op;
    out.payload = e.after;
    result.out = std::move(out);
  }
  journal_.push_back(std::move(e));
  return result;
}

OpLogEntry& MitmSession::mutable_entry(std::uint64_t op_id) {
  auto it = std::lower_bound(journal_.begin(), journal_.end(), op_id,
                             [](const OpLogEntry& e, std::uint64_t id) { return e.op_id < id; });
  if (it == journal_.end() || it->op_id != op_id) {
    throw Error(ErrorCode::kUnknownOpId, "no journal entry " + std::to_string(op_id));
  }
  return *it;
}

const OpLogEntry& MitmSession::entry(std::uint64_t op_id) const {
  return const_cast<MitmSession*>(this)->mutable_entry(op_id);
}

std::vector<std::uint64_t> MitmSession::held_ids() const {
  std::vector<std::uint64_t> ids;
  for (const auto& [id, _] : held_) ids.push_back(id);
  return ids;
}

Release MitmSession::release(OpLogEntry& e, Decision d, std::optional<Bytes> bytes) {
  auto it = held_.find(e.op_id);
  GattOp op = it->second;
  held_.erase(it);
  e.decision = d;
  if (bytes) e.after = std::move(*bytes);
  op.payload = e.after;
  return {e.op_id, e.direction, std::move(op)};
}

std::optional<Release> MitmSession::decide(std::uint64_t op_id, const OperatorDecision& decision, SimTime /*now*/) {
  if (held_.count(op_id) == 0) throw Error(ErrorCode::kNotHeld, "op " + std::to_string(op_id) + " is not held");
  OpLogEntry& e = mutable_entry(op_id);
  switch (decision.action) {
    case OperatorDecision::Action::kForward:
      return release(e, Decision::kManualForward, std::nullopt);
    case OperatorDecision::Action::kModify:
      if (decision.bytes.size() > gatt::kMaxAttributeValue) {
        throw Error(ErrorCode::kAttributeTooLong, "modified value longer than 512 bytes");
      }
      return release(e, Decision::kManualModify, decision.bytes);
    case OperatorDecision::Action::kDrop:
      release(e, Decision::kManualDrop, Bytes{});
      return std::nullopt;
  }
  return std::nullopt;
}

std::vector<Release> MitmSession::expire(SimTime now) {
  std::vector<Release> out;
  for (const auto id : held_ids()) {
    OpLogEntry& e = mutable_entry(id);
    if (now - e.time_ms < hold_timeout_ms_) continue;
    out.push_back(release(e, Decision::kTimeoutForward, e.before));
  }
  return out;
}

Release MitmSession::replay(std::uint64_t op_id, SimTime now) {
  if (state_ != SessionState::kActive) throw Error(ErrorCode::kInvalidState, "session is not active");
  const OpLogEntry& orig = mutable_entry(op_id);
  if (orig.held()) throw Error(ErrorCode::kInvalidState, "op " + std::to_string(op_id) + " is still held");
  if (orig.decision == Decision::kManualDrop) {
    throw Error(ErrorCode::kInvalidState, "op " + std::to_string(op_id) + " was dropped");
  }
  OpLogEntry e;
  e.op_id = next_id_++;
  e.time_ms = now;
  e.direction = orig.direction;
  e.kind = orig.kind;
  e.uuid = orig.uuid;
  e.before = orig.after;
  e.after = orig.after;
  e.decision = Decision::kAuto;
  e.replay_of = op_id;
  Release r{e.op_id, e.direction, GattOp{e.kind, e.uuid, e.after, 0}};
  journal_.push_back(std::move(e));
  return r;
}

std::string make_fake_address(const std::string& target_address, const std::vector<std::string>& taken) {
  unsigned b[6];
  if (std::sscanf(target_address.c_str(), "%2x:%2x:%2x:%2x:%2x:%2x", &b[0], &b[1], &b[2], &b[3], &b[4], &b[5]) != 6) {
    throw Error(ErrorCode::kInvalidArgument, "bad device address '" + target_address + "'");
  }
  b[0] = (b[0] | 0x02) & 0xFE;  // locally administered, unicast
  b[5] ^= 0x5A;
  for (int attempt = 0; attempt < 256; ++attempt) {
    char buf[18];
    std::snprintf(buf, sizeof buf, "%02x:%02x:%02x:%02x:%02x:%02x", b[0], b[1], b[2], b[3], b[4], b[5]);
    std::string addr(buf);
    auto same = [&](const std::string& t) {
      std::string lower = t;
      std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
      return lower == addr;
    };
    if (std::none_of(taken.begin(), taken.end(), same)) return addr;
    b[5] = (b[5] + 1) & 0xFF;
  }
  throw Error(ErrorCode::kInvalidState, "no free fake address");
}

// ---------------------------------------------------------------------------
// Attacker halves

InterceptionCore::InterceptionCore(radio::Radio& radio, actors::PairingBroker& broker, Options options,
                                   MitmAttacker& owner)
    : GattClient(radio, broker, std::move(options)), owner_(owner) {}

void InterceptionCore::on_ready() { owner_.core_ready(); }
void InterceptionCore::on_gatt_op(const GattOp& op) { owner_.from_peripheral(op); }
void InterceptionCore::on_echo_response(bool rejected) { owner_.echo_from_peripheral(rejected); }
void InterceptionCore::on_link_down() { owner_.core_lost(); }

ProxyFace::ProxyFace(radio::Radio& radio, actors::PairingBroker& broker, Options options, MitmAttacker& owner)
    : GattServer(radio, broker, std::move(options), {}, {}), owner_(owner) {}

void ProxyFace::load_clone(const FakeDevice& fake) { load_profile(fake.db, fake.adv_data); }

bool ProxyFace::intercept(const GattOp& op) {
  // Discovery and subscriptions are answered from the clone.
  if (op.kind != OpKind::kRead && op.kind != OpKind::kWrite) return false;
  owner_.from_central(op);
  return true;
}

void ProxyFace::on_echo_request() { owner_.echo_from_central(); }

MitmAttacker::MitmAttacker(radio::Radio& radio, actors::PairingBroker& broker, AttackerConfig config)
    : radio_(radio),
      config_(std::move(config)),
      core_(radio, broker,
            {config_.core_id, config_.core_address, pairing::IoCapability::kNoInputNoOutput, config_.mode,
             config_.oob_available},
            *this),
      proxy_(radio, broker,
             {config_.proxy_id, "", pairing::IoCapability::kNoInputNoOutput, config_.proxy_adv_interval_ms},
             *this) {
  for (const auto& r : config_.rules) r.validate();
}

void MitmAttacker::register_devices(const DeviceId& target) {
  target_ = target;
  std::vector<std::string> taken;
  for (const auto& d : radio_.devices()) taken.push_back(d.address);
  taken.push_back(config_.core_address);
  fake_address_ = make_fake_address(radio_.device(target).address, taken);
  core_.register_device();
  radio_.add_device({config_.proxy_id, fake_address_, radio::GapRole::kPeripheral}, &proxy_);
}

void MitmAttacker::start_observing() { core_.observe(); }

void MitmAttacker::launch(const DeviceId& victim) {
  if (session_) throw Error(ErrorCode::kInvalidState, "attack already launched");
  if (target_.empty()) throw Error(ErrorCode::kInvalidState, "devices not registered");
  victim_ = victim;
  session_.emplace(target_, fake_address_, config_.hold_timeout_ms);
  session_->set_rules(config_.rules);
  session_->set_manual(config_.manual);
  emit_state();
  core_.connect_to_device(target_);
}

void MitmAttacker::emit_state() {
  if (state_hook && session_) state_hook(session_->state());
}

void MitmAttacker::core_ready() {
  if (!session_ || session_->state() != SessionState::kCloning) return;
  const auto& seen = core_.observed();
  auto it = seen.find(target_);
  const auto fake = session_->clone_target(it == seen.end() ? std::nullopt : std::optional<Bytes>(it->second),
                                           core_.remote_db());
  emit_state();
  proxy_.load_clone(fake);
  bool victim_on_target = false;
  if (auto conn = radio_.connection_of(victim_)) victim_on_target = radio_.peer_of(*conn, victim_) == target_;
  session_->start(victim_on_target);
  emit_state();
  proxy_.start_advertising();
}

void MitmAttacker::stop() {
  if (!session_ || session_->state() == SessionState::kStopped) return;
  session_->stop();
  emit_state();
  proxy_.stop_advertising();
  proxy_.disconnect();
  core_.disconnect();
}

void MitmAttacker::core_lost() { stop(); }

void MitmAttacker::set_rules(std::vector<ModificationRule> rules) {
  for (const auto& r : rules) r.validate();
  config_.rules = rules;
  if (session_) session_->set_rules(std::move(rules));
}

void MitmAttacker::set_manual(bool on) {
  config_.manual = on;
  if (session_) session_->set_manual(on);
}

void MitmAttacker::publish(std::uint64_t op_id) {
  if (journal_hook) journal_hook(session_->entry(op_id));
}

void MitmAttacker::after_forward(const ForwardResult& r) {
  publish(r.op_id);
  if (r.out) {
    dispatch({r.op_id, session_->entry(r.op_id).direction, *r.out});
    return;
  }
  if (r.held) {
    radio_.queue().schedule_in(session_->hold_timeout_ms(), [this] {
      if (!session_ || session_->state() != SessionState::kActive) return;
      for (const auto& rel : session_->expire(radio_.queue().now())) {
        publish(rel.op_id);
        dispatch(rel);
      }
    });
  }
}

void MitmAttacker::from_peripheral(const GattOp& op) {
  if (!session_ || session_->state() != SessionState::kActive) return;
  // Notifications only cross when the victim asked for them.
  if (op.kind == OpKind::kNotify && !proxy_.subscribed(op.target)) return;
  if (op.kind != OpKind::kNotify && op.kind != OpKind::kReadResponse) return;
  after_forward(session_->forward(op, Direction::kToCentral, radio_.queue().now()));
}

void MitmAttacker::from_central(const GattOp& op) {
  if (!session_ || session_->state() != SessionState::kActive) return;
  after_forward(session_->forward(op, Direction::kToPeripheral, radio_.queue().now()));
}

void MitmAttacker::dispatch(const Release& r) {
  const SimTime extra = config_.proxy_processing_ms;
  GattOp op = r.op;
  try {
    if (r.direction == Direction::kToCentral) {
      if (op.kind == OpKind::kNotify) {
        proxy_.notify(op.target, op.payload, extra);
      } else if (op.kind == OpKind::kReadResponse) {
        if (auto it = pending_reads_.find(op.op_id); it != pending_reads_.end()) {
          op.op_id = it->second;
          pending_reads_.erase(it);
        } else {
          op.op_id = proxy_.next_op_id();
        }
        proxy_.send_op(op, extra);
      }
    } else {
      const auto victim_op = op.op_id;
      op.op_id = core_.next_op_id();
      if (op.kind == OpKind::kRead && victim_op != 0) pending_reads_[op.op_id] = victim_op;
      core_.send_op(op, extra);
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNotConnected) throw;
    // The far side went away while the op was in flight or held.
  }
}

void MitmAttacker::decide(std::uint64_t op_id, const OperatorDecision& decision) {
  if (!session_) throw Error(ErrorCode::kNotHeld, "no session");
  auto rel = session_->decide(op_id, decision, radio_.queue().now());
  publish(op_id);
  if (rel) dispatch(*rel);
}

void MitmAttacker::replay(std::uint64_t op_id) {
  if (!session_) throw Error(ErrorCode::kUnknownOpId, "no session");
  auto rel = session_->replay(op_id, radio_.queue().now());
  publish(rel.op_id);
  dispatch(rel);
}

void MitmAttacker::echo_from_central() {
  if (!core_.connection()) {
    proxy_.send_echo_reply(true);
    return;
  }
  ++pending_echoes_;
  core_.send_echo(config_.proxy_processing_ms);
}

void MitmAttacker::echo_from_peripheral(bool rejected) {
  if (pending_echoes_ == 0) return;
  --pending_echoes_;
  proxy_.send_echo_reply(rejected);
}

}  // namespace blelab::mitm
