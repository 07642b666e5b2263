#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "blelab/common.hpp"

namespace blelab::radio {

// Log-distance model diverges at d -> 0; shorter distances are rejected.
inline constexpr double kMinDistanceM = 0.1;

// RSSI = -10 * N * log10(d) + a, with optional Gaussian shadowing.
struct PathLossParams {
  double exponent = 1.0;         // N
  double ref_power_dbm = -60.8;  // a, RSSI observed at 1 m
  double sigma_db = 0.0;

  void validate() const;
};

// Throws kDistanceTooSmall below kMinDistanceM.
double expected_rssi(double distance_m, const PathLossParams& params);

// Bench measurements: mean/std of RSSI at 0, 0.5, 1 and 3 m.
struct RssiRow {
  double distance_m;
  double mean_dbm;
  double std_db;
};
std::span<const RssiRow> measured_rssi_table();

enum class SignalMode { kModel, kEmpirical };

// kModel evaluates the path-loss formula; kEmpirical looks the distance up in
// the measurement table (exact row match required, 0 m allowed).
struct SignalModel {
  SignalMode mode = SignalMode::kModel;
  PathLossParams params;

  double mean_at(double distance_m) const;
  double sigma_at(double distance_m) const;
  void validate_distance(double distance_m) const;
};

struct RadioLink {
  DeviceId a;
  DeviceId b;
  double distance_m = 1.0;
  SignalModel signal;
  SimTime one_way_latency_ms = 5;

  void validate() const;
};

double sample_rssi(const RadioLink& link, std::mt19937_64& rng);

enum class FrameKind { kAdvInd, kConnectReq, kData, kEchoReq, kEchoRsp };
std::string_view to_string(FrameKind kind);

enum class GapRole { kBroadcaster, kObserver, kPeripheral, kCentral };
std::string_view to_string(GapRole role);

inline constexpr int kAdvertisingChannels[] = {37, 38, 39};
// Hopping is abstracted away; every data PDU travels on this logical channel.
inline constexpr int kDataChannel = 0;

struct Frame {
  FrameKind kind = FrameKind::kData;
  int channel = kDataChannel;
  Bytes payload;
  DeviceId sender;
  DeviceId receiver;
  SimTime send_time = 0;
};

// Min-ordered by (time, insertion sequence).
class EventQueue {
 public:
  using Action = std::function<void()>;

  void schedule_at(SimTime at, Action action);
  void schedule_in(SimTime delay, Action action) { schedule_at(now_ + delay, std::move(action)); }

  // Pops and runs the earliest event; false when nothing is pending.
  bool step();
  // Runs every event with time <= limit, then advances the clock to limit.
  void run_until(SimTime limit);

  SimTime now() const { return now_; }
  bool empty() const { return heap_.empty(); }
  std::optional<SimTime> next_time() const;
  std::uint64_t processed() const { return processed_; }

 private:
  struct Entry {
    SimTime time;
    std::uint64_t seq;
    Action action;
  };
  static bool later(const Entry& a, const Entry& b);

  std::vector<Entry> heap_;
  SimTime now_ = 0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t processed_ = 0;
};

using ConnectionId = std::uint32_t;

// One record per delivered frame; rssi is empty for frames nobody received.
struct EventRecord {
  SimTime time_ms = 0;
  FrameKind kind = FrameKind::kData;
  int channel = kDataChannel;
  DeviceId sender;
  DeviceId receiver;
  std::optional<double> rssi_dbm;
  Bytes payload;
};

// {time_ms, kind, channel, sender, receiver, rssi_dbm, payload_hex}
std::string to_json_line(const EventRecord& record);

class RadioListener {
 public:
  virtual ~RadioListener() = default;

  virtual void on_advertisement(const Frame& /*frame*/, double /*rssi_dbm*/) {}
  virtual void on_frame(ConnectionId /*conn*/, const Frame& /*frame*/, double /*rssi_dbm*/) {}
  virtual void on_connected(ConnectionId /*conn*/, const DeviceId& /*peer*/) {}
  virtual void on_disconnected(ConnectionId /*conn*/, const DeviceId& /*peer*/) {}
  virtual void on_connect_failed(const DeviceId& /*target*/) {}
};

struct DeviceInfo {
  DeviceId id;
  std::string address;
  GapRole role = GapRole::kPeripheral;
};

// Shared virtual medium. Owns device registrations, links, advertising
// schedules and connections; every delivery is appended to the event log.
class Radio {
 public:
  Radio(EventQueue& queue, std::uint64_t seed);

  Radio(const Radio&) = delete;
  Radio& operator=(const Radio&) = delete;

  void add_device(const DeviceInfo& info, RadioListener* listener);
  void set_listener(const DeviceId& id, RadioListener* listener);
  const DeviceInfo& device(const DeviceId& id) const;
  std::vector<DeviceInfo> devices() const;
  bool has_device(const DeviceId& id) const { return devices_.count(id) != 0; }

  void add_link(RadioLink link);
  const RadioLink* find_link(const DeviceId& a, const DeviceId& b) const;

  // Schedules AdvInd on 37, 38, 39 at now, now + interval, ...
  // Throws kRoleViolation unless the device is a Peripheral or Broadcaster.
  // Broadcaster advertising is never connectable.
  void advertise(const DeviceId& id, SimTime interval_ms, Bytes adv_data, bool connectable = true);
  void stop_advertising(const DeviceId& id);
  bool is_advertising(const DeviceId& id) const;

  // Throws kRoleViolation unless Central or Observer.
  void start_scanning(const DeviceId& id);
  void stop_scanning(const DeviceId& id);
  bool is_scanning(const DeviceId& id) const;

  // Scan and send ConnectReq on the first connectable AdvInd from `peripheral`;
  // a lost race leaves the central scanning for the next one.
  void initiate(const DeviceId& central, const DeviceId& peripheral);

  // Sends ConnectReq; the peripheral accepts it if still advertising
  // connectably when it arrives, otherwise the central gets on_connect_failed.
  void connect(const DeviceId& central, const DeviceId& peripheral, int channel = 37);
  void disconnect(ConnectionId conn);

  // Data / echo PDUs over an established connection. Throws kNotConnected.
  void send(ConnectionId conn, const DeviceId& from, FrameKind kind, Bytes payload,
            SimTime extra_delay_ms = 0);

  bool connected(ConnectionId conn) const { return connections_.count(conn) != 0; }
  std::optional<ConnectionId> connection_of(const DeviceId& id) const;
  DeviceId peer_of(ConnectionId conn, const DeviceId& self) const;

  // Time at which the last EchoRsp on conn reached `requester`.
  std::optional<SimTime> last_echo_response(ConnectionId conn, const DeviceId& requester) const;

  const std::vector<EventRecord>& log() const { return log_; }
  // Monte Carlo sweeps switch the log off; delivery and RNG order are unaffected.
  void set_logging(bool on) { logging_ = on; }
  EventQueue& queue() { return queue_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  struct DeviceState {
    DeviceInfo info;
    RadioListener* listener = nullptr;
    bool scanning = false;
    std::optional<DeviceId> initiate_target;
    bool connect_pending = false;
    bool advertising = false;
    bool connectable = false;
    std::uint64_t adv_generation = 0;
    Bytes adv_data;
    SimTime adv_interval = 0;
  };
  struct Connection {
    DeviceId central;
    DeviceId peripheral;
  };

  DeviceState& state(const DeviceId& id);
  const DeviceState& state(const DeviceId& id) const;
  void advertising_event(const DeviceId& id, std::uint64_t generation);
  void deliver_connect_req(const DeviceId& central, const DeviceId& peripheral, int channel,
                           SimTime sent);

  EventQueue& queue_;
  std::mt19937_64 rng_;
  std::map<DeviceId, DeviceState> devices_;
  std::map<std::pair<DeviceId, DeviceId>, RadioLink> links_;
  std::map<ConnectionId, Connection> connections_;
  std::map<std::pair<ConnectionId, DeviceId>, SimTime> echo_responses_;
  ConnectionId next_connection_ = 1;
  std::vector<EventRecord> log_;
  bool logging_ = true;
};

// Blocks on the queue until `central` holds a connection to `peripheral`.
// Throws kTimeout if none forms within timeout_ms of virtual time.
ConnectionId establish_connection(Radio& radio, const DeviceId& central,
                                  const DeviceId& peripheral, SimTime timeout_ms = 10'000);

// Sends one EchoReq from `requester` and runs the queue until the matching
// EchoRsp returns. The responder's listener is expected to answer.
// Throws kNotConnected, or kTimeout when nothing answers.
SimTime echo(Radio& radio, ConnectionId conn, const DeviceId& requester,
             SimTime timeout_ms = 1'000);

}  // namespace blelab::radio
