#include "blelab/actors.hpp"

#include <algorithm>

namespace blelab::actors {

using gatt::GattOp;
using gatt::OpKind;
using pairing::LinkDirection;
using radio::ConnectionId;
using radio::Frame;
using radio::FrameKind;

Bytes make_adv_data(const std::string& name) {
  if (name.size() > 26) throw Error(ErrorCode::kInvalidArgument, "device name too long for an advert");
  Bytes adv{0x02, 0x01, 0x06};
  adv.push_back(static_cast<std::uint8_t>(name.size() + 1));
  adv.push_back(0x09);
  adv.insert(adv.end(), name.begin(), name.end());
  const auto svc = *gatt::kHeartRateServiceUuid.short_value();
  adv.insert(adv.end(), {0x03, 0x03, static_cast<std::uint8_t>(svc), static_cast<std::uint8_t>(svc >> 8)});
  return adv;
}

std::optional<std::string> adv_name(std::span<const std::uint8_t> adv) {
  std::size_t i = 0;
  while (i < adv.size()) {
    const std::size_t len = adv[i];
    if (len == 0 || i + 1 + len > adv.size()) break;
    if (adv[i + 1] == 0x09) return std::string(adv.begin() + static_cast<std::ptrdiff_t>(i + 2),
                                               adv.begin() + static_cast<std::ptrdiff_t>(i + 1 + len));
    i += 1 + len;
  }
  return std::nullopt;
}

namespace link {

Bytes seal_att(const pairing::Key128& key, std::uint32_t counter, LinkDirection dir, const GattOp& op) {
  Bytes out{kCidAtt, static_cast<std::uint8_t>(counter >> 24), static_cast<std::uint8_t>(counter >> 16),
            static_cast<std::uint8_t>(counter >> 8), static_cast<std::uint8_t>(counter)};
  const Bytes ct = pairing::encrypt_link(key, counter, gatt::encode_op(op), dir);
  out.insert(out.end(), ct.begin(), ct.end());
  return out;
}

std::uint32_t att_counter(std::span<const std::uint8_t> frame) {
  if (frame.size() < 5 || frame[0] != kCidAtt) throw Error(ErrorCode::kTooShort, "not an ATT frame");
  return (std::uint32_t{frame[1]} << 24) | (std::uint32_t{frame[2]} << 16) |
         (std::uint32_t{frame[3]} << 8) | frame[4];
}

GattOp open_att(const pairing::Key128& key, LinkDirection dir, std::span<const std::uint8_t> frame) {
  const auto counter = att_counter(frame);
  return gatt::decode_op(pairing::decrypt_link(key, counter, frame.subspan(5), dir));
}

}  // namespace link

void PairingBroker::deposit(ConnectionId conn, pairing::PairingOutcome outcome) {
  outcomes_[conn] = std::move(outcome);
}

const pairing::PairingOutcome& PairingBroker::get(ConnectionId conn) const {
  auto it = outcomes_.find(conn);
  if (it == outcomes_.end()) throw Error(ErrorCode::kInvalidState, "no pairing on this connection");
  return it->second;
}

HeartRateSource HeartRateSource::constant(unsigned bpm) {
  HeartRateSource s;
  s.value_ = bpm;
  return s;
}

HeartRateSource HeartRateSource::seeded_walk(std::uint64_t seed, unsigned min, unsigned max,
                                             unsigned step_max) {
  if (min > max) throw Error(ErrorCode::kInvalidArgument, "walk min > max");
  HeartRateSource s;
  s.walk_ = true;
  s.min_ = min;
  s.max_ = max;
  s.step_ = step_max;
  s.value_ = min + (max - min) / 2;
  s.rng_.seed(seed);
  return s;
}

unsigned HeartRateSource::next() {
  if (walk_) {
    std::uniform_int_distribution<int> step(-static_cast<int>(step_), static_cast<int>(step_));
    const long v = static_cast<long>(value_) + step(rng_);
    value_ = static_cast<unsigned>(std::clamp<long>(v, min_, max_));
  }
  return value_;
}

namespace {

Bytes smp(std::uint8_t code, std::span<const std::uint8_t> body = {}) {
  Bytes out{link::kCidSmp, code};
  for (auto b : body) out.push_back(b);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// GattClient

GattClient::GattClient(radio::Radio& radio, PairingBroker& broker, Options options)
    : radio_(radio), broker_(broker), options_(std::move(options)) {}

void GattClient::register_device() {
  radio_.add_device({options_.id, options_.address, radio::GapRole::kCentral}, this);
}

void GattClient::observe() { radio_.start_scanning(options_.id); }

void GattClient::connect_to_device(const DeviceId& target) {
  target_id_ = target;
  target_name_.reset();
  connect_pending_ = false;
  phase_ = Phase::kScanning;
  radio_.start_scanning(options_.id);
}

void GattClient::connect_to_name(const std::string& name) {
  target_id_.reset();
  target_name_ = name;
  connect_pending_ = false;
  phase_ = Phase::kScanning;
  radio_.start_scanning(options_.id);
}

void GattClient::disconnect() {
  if (conn_) radio_.disconnect(*conn_);
}

bool GattClient::matches(const DeviceId& sender, std::span<const std::uint8_t> adv) const {
  if (target_id_) return sender == *target_id_;
  if (target_name_) return adv_name(adv) == *target_name_;
  return false;
}

void GattClient::on_advertisement(const Frame& frame, double /*rssi_dbm*/) {
  observed_[frame.sender] = frame.payload;
  if (phase_ != Phase::kScanning || connect_pending_ || conn_) return;
  if (!matches(frame.sender, frame.payload)) return;
  connect_pending_ = true;
  phase_ = Phase::kConnecting;
  radio_.connect(options_.id, frame.sender, frame.channel);
}

void GattClient::on_connect_failed(const DeviceId& /*target*/) {
  connect_pending_ = false;
  if (phase_ == Phase::kConnecting) phase_ = Phase::kScanning;
}

void GattClient::on_connected(ConnectionId conn, const DeviceId& peer) {
  conn_ = conn;
  peer_ = peer;
  connect_pending_ = false;
  phase_ = Phase::kPairing;
  keys_.reset();
  encrypted_ = false;
  tx_counter_ = 0;
  rx_counter_.reset();
  remote_db_ = {};
  on_link_up();
  const std::uint8_t req[] = {static_cast<std::uint8_t>(options_.io),
                              static_cast<std::uint8_t>(options_.oob_available ? 1 : 0),
                              static_cast<std::uint8_t>(options_.mode)};
  radio_.send(conn, options_.id, FrameKind::kData, smp(link::kSmpPairingRequest, req));
}

void GattClient::on_disconnected(ConnectionId conn, const DeviceId& /*peer*/) {
  if (!conn_ || *conn_ != conn) return;
  conn_.reset();
  encrypted_ = false;
  phase_ = Phase::kIdle;
  on_link_down();
}

void GattClient::on_frame(ConnectionId conn, const Frame& frame, double rssi_dbm) {
  if (!conn_ || *conn_ != conn) return;
  on_link_frame(frame, rssi_dbm);
  switch (frame.kind) {
    case FrameKind::kEchoRsp:
      on_echo_response(false);
      return;
    case FrameKind::kData:
      break;
    default:
      return;
  }
  if (frame.payload.empty()) return;
  switch (frame.payload[0]) {
    case link::kCidSmp:
      handle_smp(frame);
      break;
    case link::kCidAtt:
      handle_att(frame);
      break;
    case link::kCidSignaling:
      if (frame.payload.size() >= 2 && frame.payload[1] == link::kSignalCommandReject) {
        on_echo_response(true);
      }
      break;
    default:
      break;
  }
}

void GattClient::handle_smp(const Frame& frame) {
  const auto& p = frame.payload;
  if (p.size() < 2) return;
  const ConnectionId conn = *conn_;
  switch (p[1]) {
    case link::kSmpPairingResponse: {
      if (p.size() < 5 || phase_ != Phase::kPairing) return;
      const auto responder_io = static_cast<pairing::IoCapability>(p[2]);
      const bool oob = options_.oob_available && p[3] != 0;
      const auto method = pairing::select_association(options_.io, responder_io, oob);
      auto outcome = pairing::run_pairing(options_.io, responder_io, options_.mode, method, radio_.rng());
      keys_ = outcome.initiator;
      broker_.deposit(conn, std::move(outcome));
      const auto& t = broker_.get(conn).transcript;
      if (t.public_values) {
        const std::span<const std::uint8_t> pub(*t.public_values);
        radio_.send(conn, options_.id, FrameKind::kData, smp(link::kSmpPublicKey, pub.first(64)));
      } else {
        radio_.send(conn, options_.id, FrameKind::kData, smp(link::kSmpConfirm, t.m_confirm));
      }
      break;
    }
    case link::kSmpPublicKey:
      radio_.send(conn, options_.id, FrameKind::kData,
                  smp(link::kSmpConfirm, broker_.get(conn).transcript.m_confirm));
      break;
    case link::kSmpConfirm:
      radio_.send(conn, options_.id, FrameKind::kData,
                  smp(link::kSmpRandom, broker_.get(conn).transcript.m_rand));
      break;
    case link::kSmpRandom:
      encrypted_ = true;
      phase_ = Phase::kDiscovering;
      send_op({OpKind::kDiscover, gatt::Uuid{}, {}, next_op_id()});
      break;
    default:
      break;
  }
}

void GattClient::handle_att(const Frame& frame) {
  if (!encrypted_ || !keys_) return;
  GattOp op;
  try {
    const auto counter = link::att_counter(frame.payload);
    if (rx_counter_ && counter <= *rx_counter_) return;
    op = link::open_att(keys_->session_key(), LinkDirection::kPeripheralToCentral, frame.payload);
    rx_counter_ = counter;
  } catch (const Error&) {
    return;
  }
  if (op.kind == OpKind::kDiscoverResponse && phase_ == Phase::kDiscovering) {
    remote_db_ = gatt::decode_structure(op.payload);
    if (const auto* c = remote_db_.find(options_.subscribe_to); c && c->has(gatt::Property::kNotify)) {
      send_op({OpKind::kSubscribe, options_.subscribe_to, {0x01, 0x00}, next_op_id()});
    }
    phase_ = Phase::kReady;
    on_ready();
    return;
  }
  on_gatt_op(op);
}

void GattClient::send_op(const GattOp& op, SimTime extra_delay_ms) {
  if (!conn_ || !encrypted_ || !keys_) throw Error(ErrorCode::kNotConnected, options_.id + " has no secured link");
  radio_.send(*conn_, options_.id, FrameKind::kData,
              link::seal_att(keys_->session_key(), tx_counter_++, LinkDirection::kCentralToPeripheral, op),
              extra_delay_ms);
}

void GattClient::send_echo(SimTime extra_delay_ms) {
  if (!conn_) throw Error(ErrorCode::kNotConnected, options_.id + " is not connected");
  radio_.send(*conn_, options_.id, FrameKind::kEchoReq, {}, extra_delay_ms);
}

void wait_until_ready(radio::Radio& radio, const GattClient& client, SimTime timeout_ms) {
  auto& q = radio.queue();
  const SimTime deadline = q.now() + timeout_ms;
  while (client.phase() != GattClient::Phase::kReady) {
    const auto next = q.next_time();
    if (!next || *next > deadline) {
      q.run_until(deadline);
      throw Error(ErrorCode::kTimeout, client.id() + " not ready within " + std::to_string(timeout_ms) + " ms");
    }
    q.step();
  }
}

// ---------------------------------------------------------------------------
// GattServer

GattServer::GattServer(radio::Radio& radio, PairingBroker& broker, Options options,
                       gatt::AttributeDatabase db, Bytes adv_data)
    : radio_(radio), broker_(broker), options_(std::move(options)), db_(std::move(db)),
      adv_data_(std::move(adv_data)) {}

void GattServer::register_device() {
  radio_.add_device({options_.id, options_.address, radio::GapRole::kPeripheral}, this);
}

void GattServer::start_advertising() {
  advertising_wanted_ = true;
  if (!conn_) radio_.advertise(options_.id, options_.adv_interval_ms, adv_data_, true);
}

void GattServer::stop_advertising() {
  advertising_wanted_ = false;
  radio_.stop_advertising(options_.id);
}

void GattServer::load_profile(gatt::AttributeDatabase db, Bytes adv_data) {
  if (conn_) throw Error(ErrorCode::kInvalidState, options_.id + " is connected");
  db_ = std::move(db);
  adv_data_ = std::move(adv_data);
}

void GattServer::disconnect() {
  if (conn_) radio_.disconnect(*conn_);
}

bool GattServer::subscribed(const gatt::Uuid& uuid) const {
  const auto* c = db_.find(uuid);
  return c != nullptr && c->notifications_enabled;
}

void GattServer::on_connected(ConnectionId conn, const DeviceId& peer) {
  conn_ = conn;
  peer_ = peer;
  encrypted_ = false;
  key_.reset();
  tx_counter_ = 0;
  rx_counter_.reset();
  // Subscriptions do not outlive an unbonded connection.
  for (const auto& svc : db_.services()) {
    for (const auto& c : svc.characteristics) db_.find(c.uuid)->notifications_enabled = false;
  }
  on_peer_connected();
}

void GattServer::on_disconnected(ConnectionId conn, const DeviceId& /*peer*/) {
  if (!conn_ || *conn_ != conn) return;
  conn_.reset();
  encrypted_ = false;
  on_peer_disconnected();
  if (advertising_wanted_) radio_.advertise(options_.id, options_.adv_interval_ms, adv_data_, true);
}

void GattServer::on_frame(ConnectionId conn, const Frame& frame, double /*rssi_dbm*/) {
  if (!conn_ || *conn_ != conn) return;
  if (frame.kind == FrameKind::kEchoReq) {
    on_echo_request();
    return;
  }
  if (frame.kind != FrameKind::kData || frame.payload.empty()) return;
  if (frame.payload[0] == link::kCidSmp) {
    handle_smp(frame);
  } else if (frame.payload[0] == link::kCidAtt) {
    handle_att(frame);
  }
}

void GattServer::on_echo_request() {
  if (options_.supports_echo) {
    send_echo_reply(false, options_.echo_processing_ms);
  } else {
    send_echo_reply(true);
  }
}

void GattServer::send_echo_reply(bool reject, SimTime extra_delay_ms) {
  if (!conn_) return;
  if (reject) {
    radio_.send(*conn_, options_.id, FrameKind::kData, {link::kCidSignaling, link::kSignalCommandReject},
                extra_delay_ms);
  } else {
    radio_.send(*conn_, options_.id, FrameKind::kEchoRsp, {}, extra_delay_ms);
  }
}

void GattServer::handle_smp(const Frame& frame) {
  const auto& p = frame.payload;
  if (p.size() < 2) return;
  const ConnectionId conn = *conn_;
  switch (p[1]) {
    case link::kSmpPairingRequest: {
      if (p.size() < 5) return;
      const std::uint8_t rsp[] = {static_cast<std::uint8_t>(options_.io), p[3], p[4]};
      radio_.send(conn, options_.id, FrameKind::kData, smp(link::kSmpPairingResponse, rsp));
      break;
    }
    case link::kSmpPublicKey: {
      const auto& t = broker_.get(conn).transcript;
      if (!t.public_values) return;
      const std::span<const std::uint8_t> pub(*t.public_values);
      radio_.send(conn, options_.id, FrameKind::kData, smp(link::kSmpPublicKey, pub.subspan(64)));
      break;
    }
    case link::kSmpConfirm:
      radio_.send(conn, options_.id, FrameKind::kData,
                  smp(link::kSmpConfirm, broker_.get(conn).transcript.s_confirm));
      break;
    case link::kSmpRandom: {
      const auto& outcome = broker_.get(conn);
      key_ = outcome.responder.session_key();
      encrypted_ = true;
      radio_.send(conn, options_.id, FrameKind::kData, smp(link::kSmpRandom, outcome.transcript.s_rand));
      break;
    }
    default:
      break;
  }
}

void GattServer::handle_att(const Frame& frame) {
  if (!encrypted_ || !key_) return;
  GattOp op;
  try {
    const auto counter = link::att_counter(frame.payload);
    if (rx_counter_ && counter <= *rx_counter_) return;
    op = link::open_att(*key_, LinkDirection::kCentralToPeripheral, frame.payload);
    rx_counter_ = counter;
  } catch (const Error&) {
    return;
  }
  if (intercept(op)) return;
  try {
    if (auto rsp = gatt::apply_gatt_op(db_, op)) send_op(*rsp);
  } catch (const Error&) {
    // No ATT error responses in this model; the request is dropped.
  }
}

bool GattServer::notify(const gatt::Uuid& uuid, Bytes value, SimTime extra_delay_ms) {
  gatt::apply_gatt_op(db_, {OpKind::kNotify, uuid, value, 0});
  if (!conn_ || !encrypted_ || !subscribed(uuid)) return false;
  send_op({OpKind::kNotify, uuid, std::move(value), next_op_id()}, extra_delay_ms);
  return true;
}

void GattServer::send_op(const GattOp& op, SimTime extra_delay_ms) {
  if (!conn_ || !encrypted_ || !key_) throw Error(ErrorCode::kNotConnected, options_.id + " has no secured link");
  radio_.send(*conn_, options_.id, FrameKind::kData,
              link::seal_att(*key_, tx_counter_++, LinkDirection::kPeripheralToCentral, op), extra_delay_ms);
}

// ---------------------------------------------------------------------------
// HeartRateSensor

HeartRateSensor::HeartRateSensor(radio::Radio& radio, PairingBroker& broker, SensorConfig config,
                                 HeartRateSource source)
    : GattServer(radio, broker,
                 {config.id, config.address, config.io, config.adv_interval_ms,
                  config.supports_echo, config.echo_processing_ms},
                 gatt::build_heart_rate_profile(), make_adv_data(config.name)),
      config_(std::move(config)),
      source_(std::move(source)) {
  if (config_.notify_interval_ms <= 0) throw Error(ErrorCode::kInvalidArgument, "notify interval must be > 0");
}

void HeartRateSensor::start() {
  start_advertising();
  auto& q = radio_.queue();
  const SimTime first = (q.now() / config_.notify_interval_ms + 1) * config_.notify_interval_ms;
  q.schedule_at(first, [this] { tick(); });
}

void HeartRateSensor::tick() {
  const unsigned bpm = source_.next();
  const gatt::HeartRateMeasurement m{bpm > 255 ? gatt::HrFormat::kUint16 : gatt::HrFormat::kUint8, bpm, {}};
  if (notify(gatt::kHeartRateMeasurementUuid, gatt::encode_hr_measurement(m))) {
    emitted_.push_back({radio_.queue().now(), bpm, config_.id});
  }
  radio_.queue().schedule_in(config_.notify_interval_ms, [this] { tick(); });
}

// ---------------------------------------------------------------------------
// MobileApp

MobileApp::MobileApp(radio::Radio& radio, PairingBroker& broker, MobileAppConfig config)
    : GattClient(radio, broker, {config.id, config.address, config.io, config.mode, config.oob_available}),
      config_(std::move(config)),
      detector_(config_.detector) {
  if (config_.rtt_probe_interval_ms && *config_.rtt_probe_interval_ms <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "RTT probe interval must be > 0");
  }
}

void MobileApp::start() { connect_to_name(config_.target_name); }

void MobileApp::on_link_up() {
  ++link_generation_;
  detector_.reset_window();
  probe_sent_.reset();
}

void MobileApp::on_link_down() {
  ++link_generation_;
  probe_sent_.reset();
  radio_.queue().schedule_in(config_.reconnect_delay_ms, [this] {
    if (phase() == Phase::kIdle) connect_to_name(config_.target_name);
  });
}

void MobileApp::raise(const detection::Alert& alert) {
  alerts_.push_back(alert);
  if (alert_hook) alert_hook(alert);
}

void MobileApp::on_link_frame(const Frame& /*frame*/, double rssi_dbm) {
  if (!config_.rssi_monitor) return;
  const RssiSample s{radio_.queue().now(), rssi_dbm, peer()};
  rssi_.push_back(s);
  if (rssi_hook) rssi_hook(s);
  if (auto alert = detector_.update(rssi_dbm, s.time_ms)) raise(*alert);
}

void MobileApp::on_gatt_op(const GattOp& op) {
  if (op.kind != OpKind::kNotify || op.target != gatt::kHeartRateMeasurementUuid) return;
  try {
    const auto m = gatt::decode_hr_measurement(op.payload);
    const HrReading r{radio_.queue().now(), m.bpm, peer()};
    readings_.push_back(r);
    if (reading_hook) reading_hook(r);
  } catch (const Error&) {
  }
}

void MobileApp::on_ready() {
  if (!config_.rtt_probe_interval_ms || rtt_unsupported_) return;
  const auto gen = link_generation_;
  radio_.queue().schedule_in(*config_.rtt_probe_interval_ms, [this, gen] { probe(gen); });
}

void MobileApp::probe(std::uint64_t generation) {
  if (generation != link_generation_ || phase() != Phase::kReady || rtt_unsupported_) return;
  if (!probe_sent_) {
    probe_sent_ = radio_.queue().now();
    send_echo();
  }
  radio_.queue().schedule_in(*config_.rtt_probe_interval_ms, [this, generation] { probe(generation); });
}

const std::vector<RttSample>& MobileApp::rtt_probe_results() const {
  if (rtt_unsupported_) throw Error(ErrorCode::kUnsupported, peer() + " rejected the echo request");
  return rtt_;
}

void MobileApp::on_echo_response(bool rejected) {
  if (!probe_sent_) return;
  const SimTime now = radio_.queue().now();
  const SimTime rtt = now - *probe_sent_;
  probe_sent_.reset();
  if (rejected) {
    rtt_unsupported_ = true;
    return;
  }
  rtt_.push_back({now, rtt, peer()});
  if (!rtt_baseline_) {
    rtt_baseline_ = static_cast<double>(rtt);
    return;
  }
  if (auto alert = detection::rtt_update(static_cast<double>(rtt), *rtt_baseline_, config_.detector.rho, now)) {
    raise(*alert);
  }
}

}  // namespace blelab::actors
