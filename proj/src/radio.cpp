#include "blelab/radio.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

namespace blelab::radio {

namespace {

constexpr RssiRow kMeasuredRssi[] = {
    {0.0, -26.4, 1.2},
    {0.5, -52.8, 3.3},
    {1.0, -60.8, 2.6},
    {3.0, -66.0, 3.0},
};

const RssiRow* table_row(double distance_m) {
  for (const auto& row : kMeasuredRssi) {
    if (std::abs(row.distance_m - distance_m) < 1e-9) return &row;
  }
  return nullptr;
}

std::pair<DeviceId, DeviceId> link_key(const DeviceId& a, const DeviceId& b) {
  return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
}

}  // namespace

void PathLossParams::validate() const {
  if (!(exponent > 0.0)) throw Error(ErrorCode::kInvalidArgument, "path-loss exponent must be > 0");
  if (!(sigma_db >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "sigma must be >= 0");
}

double expected_rssi(double distance_m, const PathLossParams& params) {
  if (!(distance_m >= kMinDistanceM)) {
    throw Error(ErrorCode::kDistanceTooSmall,
                "distance " + std::to_string(distance_m) + " m is below 0.1 m");
  }
  return -10.0 * params.exponent * std::log10(distance_m) + params.ref_power_dbm;
}

std::span<const RssiRow> measured_rssi_table() { return kMeasuredRssi; }

double SignalModel::mean_at(double distance_m) const {
  if (mode == SignalMode::kEmpirical) {
    validate_distance(distance_m);
    return table_row(distance_m)->mean_dbm;
  }
  return expected_rssi(distance_m, params);
}

double SignalModel::sigma_at(double distance_m) const {
  if (mode == SignalMode::kEmpirical) {
    validate_distance(distance_m);
    return table_row(distance_m)->std_db;
  }
  return params.sigma_db;
}

void SignalModel::validate_distance(double distance_m) const {
  if (mode == SignalMode::kEmpirical) {
    if (table_row(distance_m) == nullptr) {
      throw Error(ErrorCode::kInvalidArgument,
                  "empirical mode has no measurement at " + std::to_string(distance_m) + " m");
    }
    return;
  }
  params.validate();
  if (!(distance_m >= kMinDistanceM)) {
    throw Error(ErrorCode::kDistanceTooSmall,
                "distance " + std::to_string(distance_m) + " m is below 0.1 m");
  }
}

void RadioLink::validate() const {
  if (a == b) throw Error(ErrorCode::kInvalidArgument, "link endpoints must differ");
  signal.validate_distance(distance_m);
  if (one_way_latency_ms <= 0) throw Error(ErrorCode::kInvalidArgument, "latency must be > 0");
}

double sample_rssi(const RadioLink& link, std::mt19937_64& rng) {
  const double mean = link.signal.mean_at(link.distance_m);
  const double sigma = link.signal.sigma_at(link.distance_m);
  if (sigma == 0.0) return mean;
  std::normal_distribution<double> noise(0.0, sigma);
  return mean + noise(rng);
}

std::string_view to_string(FrameKind kind) {
  switch (kind) {
    case FrameKind::kAdvInd: return "AdvInd";
    case FrameKind::kConnectReq: return "ConnectReq";
    case FrameKind::kData: return "Data";
    case FrameKind::kEchoReq: return "EchoReq";
    case FrameKind::kEchoRsp: return "EchoRsp";
  }
  return "?";
}

std::string_view to_string(GapRole role) {
  switch (role) {
    case GapRole::kBroadcaster: return "Broadcaster";
    case GapRole::kObserver: return "Observer";
    case GapRole::kPeripheral: return "Peripheral";
    case GapRole::kCentral: return "Central";
  }
  return "?";
}

bool EventQueue::later(const Entry& a, const Entry& b) {
  if (a.time != b.time) return a.time > b.time;
  return a.seq > b.seq;
}

void EventQueue::schedule_at(SimTime at, Action action) {
  if (at < now_) {
    throw Error(ErrorCode::kInvalidArgument, "cannot schedule an event in the past");
  }
  heap_.push_back(Entry{at, next_seq_++, std::move(action)});
  std::push_heap(heap_.begin(), heap_.end(), later);
}

bool EventQueue::step() {
  if (heap_.empty()) return false;
  std::pop_heap(heap_.begin(), heap_.end(), later);
  Entry e = std::move(heap_.back());
  heap_.pop_back();
  now_ = e.time;
  ++processed_;
  e.action();
  return true;
}

void EventQueue::run_until(SimTime limit) {
  while (!heap_.empty() && heap_.front().time <= limit) step();
  if (limit > now_) now_ = limit;
}

std::optional<SimTime> EventQueue::next_time() const {
  if (heap_.empty()) return std::nullopt;
  return heap_.front().time;
}

std::string to_json_line(const EventRecord& r) {
  nlohmann::ordered_json j;
  j["time_ms"] = r.time_ms;
  j["kind"] = to_string(r.kind);
  j["channel"] = r.channel;
  j["sender"] = r.sender;
  j["receiver"] = r.receiver;
  if (r.rssi_dbm) {
    j["rssi_dbm"] = std::round(*r.rssi_dbm * 100.0) / 100.0;
  } else {
    j["rssi_dbm"] = nullptr;
  }
  j["payload_hex"] = to_hex(r.payload);
  return j.dump();
}

Radio::Radio(EventQueue& queue, std::uint64_t seed) : queue_(queue), rng_(seed) {}

Radio::DeviceState& Radio::state(const DeviceId& id) {
  auto it = devices_.find(id);
  if (it == devices_.end()) throw Error(ErrorCode::kUnknownDevice, id);
  return it->second;
}

const Radio::DeviceState& Radio::state(const DeviceId& id) const {
  auto it = devices_.find(id);
  if (it == devices_.end()) throw Error(ErrorCode::kUnknownDevice, id);
  return it->second;
}

void Radio::add_device(const DeviceInfo& info, RadioListener* listener) {
  if (devices_.count(info.id) != 0) {
    throw Error(ErrorCode::kInvalidArgument, "device " + info.id + " already registered");
  }
  DeviceState s;
  s.info = info;
  s.listener = listener;
  devices_.emplace(info.id, std::move(s));
}

void Radio::set_listener(const DeviceId& id, RadioListener* listener) { state(id).listener = listener; }

const DeviceInfo& Radio::device(const DeviceId& id) const { return state(id).info; }

std::vector<DeviceInfo> Radio::devices() const {
  std::vector<DeviceInfo> out;
  for (const auto& [id, s] : devices_) out.push_back(s.info);
  return out;
}

void Radio::add_link(RadioLink link) {
  link.validate();
  state(link.a);
  state(link.b);
  links_[link_key(link.a, link.b)] = std::move(link);
}

const RadioLink* Radio::find_link(const DeviceId& a, const DeviceId& b) const {
  auto it = links_.find(link_key(a, b));
  return it == links_.end() ? nullptr : &it->second;
}

void Radio::advertise(const DeviceId& id, SimTime interval_ms, Bytes adv_data, bool connectable) {
  auto& s = state(id);
  if (s.info.role != GapRole::kPeripheral && s.info.role != GapRole::kBroadcaster) {
    throw Error(ErrorCode::kRoleViolation,
                id + " is a " + std::string(to_string(s.info.role)) + " and cannot advertise");
  }
  if (interval_ms <= 0) throw Error(ErrorCode::kInvalidArgument, "advertising interval must be > 0");
  s.advertising = true;
  s.connectable = connectable && s.info.role == GapRole::kPeripheral;
  s.adv_data = std::move(adv_data);
  s.adv_interval = interval_ms;
  const auto generation = ++s.adv_generation;
  queue_.schedule_in(0, [this, id, generation] { advertising_event(id, generation); });
}

void Radio::stop_advertising(const DeviceId& id) {
  auto& s = state(id);
  s.advertising = false;
  ++s.adv_generation;
}

bool Radio::is_advertising(const DeviceId& id) const { return state(id).advertising; }

void Radio::advertising_event(const DeviceId& id, std::uint64_t generation) {
  auto& s = state(id);
  if (!s.advertising || s.adv_generation != generation) return;
  const SimTime now = queue_.now();
  for (int channel : kAdvertisingChannels) {
    Frame frame{FrameKind::kAdvInd, channel, s.adv_data, id, {}, now};
    bool heard = false;
    for (auto& [other_id, other] : devices_) {
      if (other_id == id || !other.scanning) continue;
      const RadioLink* link = find_link(id, other_id);
      if (link == nullptr) continue;
      heard = true;
      queue_.schedule_in(link->one_way_latency_ms, [this, frame, other_id = other_id] {
        auto& rx = state(other_id);
        if (!rx.scanning) return;
        const RadioLink* l = find_link(frame.sender, other_id);
        const double rssi = sample_rssi(*l, rng_);
        Frame delivered = frame;
        delivered.receiver = other_id;
        if (logging_) {
          log_.push_back({queue_.now(), FrameKind::kAdvInd, frame.channel, frame.sender, other_id,
                          rssi, frame.payload});
        }
        if (rx.initiate_target && *rx.initiate_target == frame.sender && !rx.connect_pending) {
          const auto& tx = state(frame.sender);
          if (tx.advertising && tx.connectable) {
            rx.connect_pending = true;
            connect(other_id, frame.sender, frame.channel);
          }
        }
        if (rx.listener != nullptr) rx.listener->on_advertisement(delivered, rssi);
      });
    }
    if (!heard && logging_) {
      log_.push_back({now, FrameKind::kAdvInd, channel, id, {}, std::nullopt, s.adv_data});
    }
  }
  queue_.schedule_in(s.adv_interval, [this, id, generation] { advertising_event(id, generation); });
}

void Radio::start_scanning(const DeviceId& id) {
  auto& s = state(id);
  if (s.info.role != GapRole::kCentral && s.info.role != GapRole::kObserver) {
    throw Error(ErrorCode::kRoleViolation,
                id + " is a " + std::string(to_string(s.info.role)) + " and cannot scan");
  }
  s.scanning = true;
}

void Radio::stop_scanning(const DeviceId& id) {
  auto& s = state(id);
  s.scanning = false;
  s.initiate_target.reset();
  s.connect_pending = false;
}

bool Radio::is_scanning(const DeviceId& id) const { return state(id).scanning; }

void Radio::initiate(const DeviceId& central, const DeviceId& peripheral) {
  auto& s = state(central);
  if (s.info.role != GapRole::kCentral) {
    throw Error(ErrorCode::kRoleViolation, central + " cannot initiate connections");
  }
  state(peripheral);
  start_scanning(central);
  s.initiate_target = peripheral;
  s.connect_pending = false;
}

void Radio::connect(const DeviceId& central, const DeviceId& peripheral, int channel) {
  auto& c = state(central);
  if (c.info.role != GapRole::kCentral) {
    throw Error(ErrorCode::kRoleViolation, central + " cannot initiate connections");
  }
  const RadioLink* link = find_link(central, peripheral);
  if (link == nullptr) throw Error(ErrorCode::kUnknownDevice, "no link " + central + " <-> " + peripheral);
  const SimTime sent = queue_.now();
  queue_.schedule_in(link->one_way_latency_ms, [this, central, peripheral, channel, sent] {
    deliver_connect_req(central, peripheral, channel, sent);
  });
}

void Radio::deliver_connect_req(const DeviceId& central, const DeviceId& peripheral, int channel,
                                SimTime /*sent*/) {
  auto& p = state(peripheral);
  auto& c = state(central);
  const RadioLink* link = find_link(central, peripheral);
  const double rssi = sample_rssi(*link, rng_);
  if (logging_) {
    log_.push_back({queue_.now(), FrameKind::kConnectReq, channel, central, peripheral, rssi, {}});
  }
  const bool accept = p.advertising && p.connectable && !connection_of(peripheral) &&
                      !connection_of(central);
  if (!accept) {
    c.connect_pending = false;
    if (c.listener != nullptr) c.listener->on_connect_failed(peripheral);
    return;
  }
  const ConnectionId id = next_connection_++;
  connections_[id] = Connection{central, peripheral};
  stop_advertising(peripheral);
  c.scanning = false;
  c.initiate_target.reset();
  c.connect_pending = false;
  if (p.listener != nullptr) p.listener->on_connected(id, central);
  if (c.listener != nullptr) c.listener->on_connected(id, peripheral);
}

void Radio::disconnect(ConnectionId conn) {
  auto it = connections_.find(conn);
  if (it == connections_.end()) return;
  const Connection c = it->second;
  connections_.erase(it);
  if (auto* l = state(c.peripheral).listener) l->on_disconnected(conn, c.central);
  if (auto* l = state(c.central).listener) l->on_disconnected(conn, c.peripheral);
}

void Radio::send(ConnectionId conn, const DeviceId& from, FrameKind kind, Bytes payload,
                 SimTime extra_delay_ms) {
  auto it = connections_.find(conn);
  if (it == connections_.end()) {
    throw Error(ErrorCode::kNotConnected, "connection " + std::to_string(conn) + " is not open");
  }
  if (kind == FrameKind::kAdvInd || kind == FrameKind::kConnectReq) {
    throw Error(ErrorCode::kInvalidArgument, "advertising PDUs cannot travel on a connection");
  }
  const DeviceId to = peer_of(conn, from);
  const RadioLink* link = find_link(from, to);
  Frame frame{kind, kDataChannel, std::move(payload), from, to, queue_.now()};
  queue_.schedule_in(extra_delay_ms + link->one_way_latency_ms, [this, conn, frame] {
    if (!connected(conn)) return;
    const RadioLink* l = find_link(frame.sender, frame.receiver);
    const double rssi = sample_rssi(*l, rng_);
    if (logging_) {
      log_.push_back({queue_.now(), frame.kind, frame.channel, frame.sender, frame.receiver, rssi,
                      frame.payload});
    }
    if (frame.kind == FrameKind::kEchoRsp) {
      echo_responses_[{conn, frame.receiver}] = queue_.now();
    }
    if (auto* listener = state(frame.receiver).listener) listener->on_frame(conn, frame, rssi);
  });
}

std::optional<ConnectionId> Radio::connection_of(const DeviceId& id) const {
  for (const auto& [cid, c] : connections_) {
    if (c.central == id || c.peripheral == id) return cid;
  }
  return std::nullopt;
}

DeviceId Radio::peer_of(ConnectionId conn, const DeviceId& self) const {
  auto it = connections_.find(conn);
  if (it == connections_.end()) {
    throw Error(ErrorCode::kNotConnected, "connection " + std::to_string(conn) + " is not open");
  }
  if (it->second.central == self) return it->second.peripheral;
  if (it->second.peripheral == self) return it->second.central;
  throw Error(ErrorCode::kInvalidArgument, self + " is not an endpoint of this connection");
}

std::optional<SimTime> Radio::last_echo_response(ConnectionId conn, const DeviceId& requester) const {
  auto it = echo_responses_.find({conn, requester});
  if (it == echo_responses_.end()) return std::nullopt;
  return it->second;
}

ConnectionId establish_connection(Radio& radio, const DeviceId& central, const DeviceId& peripheral,
                                  SimTime timeout_ms) {
  radio.initiate(central, peripheral);
  auto& queue = radio.queue();
  const SimTime deadline = queue.now() + timeout_ms;
  while (true) {
    if (auto conn = radio.connection_of(central)) {
      if (radio.peer_of(*conn, central) == peripheral) return *conn;
    }
    auto next = queue.next_time();
    if (!next || *next > deadline) break;
    queue.step();
  }
  radio.stop_scanning(central);
  throw Error(ErrorCode::kTimeout, central + " saw no connectable advertising from " + peripheral);
}

SimTime echo(Radio& radio, ConnectionId conn, const DeviceId& requester, SimTime timeout_ms) {
  if (!radio.connected(conn)) {
    throw Error(ErrorCode::kNotConnected, "echo requires an open connection");
  }
  auto& queue = radio.queue();
  const SimTime start = queue.now();
  radio.send(conn, requester, FrameKind::kEchoReq, {});
  const SimTime deadline = start + timeout_ms;
  while (true) {
    if (auto t = radio.last_echo_response(conn, requester); t && *t >= start) return *t - start;
    auto next = queue.next_time();
    if (!next || *next > deadline) break;
    queue.step();
  }
  throw Error(ErrorCode::kTimeout, "no echo response within " + std::to_string(timeout_ms) + " ms");
}

}  // namespace blelab::radio
