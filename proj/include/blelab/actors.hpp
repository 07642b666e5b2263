#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "blelab/common.hpp"
#include "blelab/detection.hpp"
#include "blelab/gatt.hpp"
#include "blelab/pairing.hpp"
#include "blelab/radio.hpp"

namespace blelab::actors {

inline constexpr char kSensorName[] = "PolarSim H7";

// Flags, complete local name, and the heart-rate service in the 16-bit list.
Bytes make_adv_data(const std::string& name);
// Complete local name (AD type 0x09), if present.
std::optional<std::string> adv_name(std::span<const std::uint8_t> adv_data);

// Link payload framing: byte 0 is the channel id.
namespace link {
inline constexpr std::uint8_t kCidAtt = 0x04;
inline constexpr std::uint8_t kCidSignaling = 0x05;
inline constexpr std::uint8_t kCidSmp = 0x06;

inline constexpr std::uint8_t kSmpPairingRequest = 0x01;
inline constexpr std::uint8_t kSmpPairingResponse = 0x02;
inline constexpr std::uint8_t kSmpConfirm = 0x03;
inline constexpr std::uint8_t kSmpRandom = 0x04;
inline constexpr std::uint8_t kSmpPublicKey = 0x0C;

inline constexpr std::uint8_t kSignalCommandReject = 0x01;

// ATT frame: [0x04][counter u32 BE][AES-CCM(encode_op(op))].
Bytes seal_att(const pairing::Key128& key, std::uint32_t counter, pairing::LinkDirection dir,
               const gatt::GattOp& op);
std::uint32_t att_counter(std::span<const std::uint8_t> frame);
gatt::GattOp open_att(const pairing::Key128& key, pairing::LinkDirection dir,
                      std::span<const std::uint8_t> frame);
}  // namespace link

// Hands each pairing outcome from the initiator (which runs the exchange) to
// the responder, keyed by connection.
class PairingBroker {
 public:
  void deposit(radio::ConnectionId conn, pairing::PairingOutcome outcome);
  const pairing::PairingOutcome& get(radio::ConnectionId conn) const;
  bool has(radio::ConnectionId conn) const { return outcomes_.count(conn) != 0; }

 private:
  std::map<radio::ConnectionId, pairing::PairingOutcome> outcomes_;
};

class HeartRateSource {
 public:
  static HeartRateSource constant(unsigned bpm);
  // Starts at the midpoint and moves by a uniform step in [-step_max, step_max],
  // clamped to [min, max].
  static HeartRateSource seeded_walk(std::uint64_t seed, unsigned min, unsigned max,
                                     unsigned step_max);

  unsigned next();

 private:
  bool walk_ = false;
  unsigned value_ = 0;
  unsigned min_ = 0;
  unsigned max_ = 0;
  unsigned step_ = 0;
  std::mt19937_64 rng_;
};

struct HrReading {
  SimTime time_ms = 0;
  unsigned bpm = 0;
  DeviceId source;
};

// Central half of a link: scan, connect, pair, discover, subscribe.
class GattClient : public radio::RadioListener {
 public:
  enum class Phase { kIdle, kScanning, kConnecting, kPairing, kDiscovering, kReady };

  struct Options {
    DeviceId id;
    std::string address;
    pairing::IoCapability io = pairing::IoCapability::kKeyboardDisplay;
    pairing::PairingMode mode = pairing::PairingMode::kLegacyLE;
    bool oob_available = false;
    gatt::Uuid subscribe_to = gatt::kHeartRateMeasurementUuid;
  };

  GattClient(radio::Radio& radio, PairingBroker& broker, Options options);

  void register_device();
  // Scans and records adverts without connecting.
  void observe();
  void connect_to_device(const DeviceId& target);
  void connect_to_name(const std::string& name);
  void disconnect();

  const DeviceId& id() const { return options_.id; }
  Phase phase() const { return phase_; }
  std::optional<radio::ConnectionId> connection() const { return conn_; }
  const DeviceId& peer() const { return peer_; }
  const std::map<DeviceId, Bytes>& observed() const { return observed_; }
  const gatt::AttributeDatabase& remote_db() const { return remote_db_; }
  const std::optional<pairing::KeyMaterial>& keys() const { return keys_; }

  std::uint64_t next_op_id() { return ++op_counter_; }
  void send_op(const gatt::GattOp& op, SimTime extra_delay_ms = 0);
  void send_echo(SimTime extra_delay_ms = 0);

  void on_advertisement(const radio::Frame& frame, double rssi_dbm) override;
  void on_frame(radio::ConnectionId conn, const radio::Frame& frame, double rssi_dbm) override;
  void on_connected(radio::ConnectionId conn, const DeviceId& peer) override;
  void on_disconnected(radio::ConnectionId conn, const DeviceId& peer) override;
  void on_connect_failed(const DeviceId& target) override;

 protected:
  virtual void on_link_frame(const radio::Frame& /*frame*/, double /*rssi_dbm*/) {}
  virtual void on_ready() {}
  virtual void on_gatt_op(const gatt::GattOp& /*op*/) {}
  virtual void on_echo_response(bool /*rejected*/) {}
  virtual void on_link_up() {}
  virtual void on_link_down() {}

  radio::Radio& radio_;

 private:
  void handle_smp(const radio::Frame& frame);
  void handle_att(const radio::Frame& frame);
  bool matches(const DeviceId& sender, std::span<const std::uint8_t> adv) const;

  PairingBroker& broker_;
  Options options_;
  Phase phase_ = Phase::kIdle;
  std::optional<DeviceId> target_id_;
  std::optional<std::string> target_name_;
  bool connect_pending_ = false;
  std::optional<radio::ConnectionId> conn_;
  DeviceId peer_;
  std::map<DeviceId, Bytes> observed_;
  std::optional<pairing::KeyMaterial> keys_;
  bool encrypted_ = false;
  std::uint32_t tx_counter_ = 0;
  std::optional<std::uint32_t> rx_counter_;
  std::uint64_t op_counter_ = 0;
  gatt::AttributeDatabase remote_db_;
};

// Runs the queue until `client` is Ready (paired, discovered, subscribed).
// Throws kTimeout if that takes longer than timeout_ms of virtual time.
void wait_until_ready(radio::Radio& radio, const GattClient& client, SimTime timeout_ms = 10'000);

// Peripheral half: advertising, pairing responder, GATT server, echo.
class GattServer : public radio::RadioListener {
 public:
  struct Options {
    DeviceId id;
    std::string address;
    pairing::IoCapability io = pairing::IoCapability::kNoInputNoOutput;
    SimTime adv_interval_ms = 100;
    bool supports_echo = false;
    SimTime echo_processing_ms = 0;
  };

  GattServer(radio::Radio& radio, PairingBroker& broker, Options options, gatt::AttributeDatabase db,
             Bytes adv_data);

  void register_device();
  void start_advertising();
  void stop_advertising();
  void disconnect();

  const DeviceId& id() const { return options_.id; }
  const Options& options() const { return options_; }
  const Bytes& adv_data() const { return adv_data_; }
  const gatt::AttributeDatabase& db() const { return db_; }
  std::optional<radio::ConnectionId> connection() const { return conn_; }
  const DeviceId& peer() const { return peer_; }
  bool secured() const { return encrypted_; }
  bool subscribed(const gatt::Uuid& uuid) const;

  std::uint64_t next_op_id() { return ++op_counter_; }
  // Stores the value and sends a Notify when the peer is subscribed.
  // Returns whether a frame went out.
  bool notify(const gatt::Uuid& uuid, Bytes value, SimTime extra_delay_ms = 0);
  void send_op(const gatt::GattOp& op, SimTime extra_delay_ms = 0);
  void send_echo_reply(bool reject, SimTime extra_delay_ms = 0);

  void on_frame(radio::ConnectionId conn, const radio::Frame& frame, double rssi_dbm) override;
  void on_connected(radio::ConnectionId conn, const DeviceId& peer) override;
  void on_disconnected(radio::ConnectionId conn, const DeviceId& peer) override;

 protected:
  // Return true to take over the request instead of applying it locally.
  virtual bool intercept(const gatt::GattOp& /*op*/) { return false; }
  virtual void on_echo_request();
  virtual void on_peer_connected() {}
  virtual void on_peer_disconnected() {}
  // Swaps the served database and advert. Only while unconnected.
  void load_profile(gatt::AttributeDatabase db, Bytes adv_data);

  radio::Radio& radio_;

 private:
  void handle_smp(const radio::Frame& frame);
  void handle_att(const radio::Frame& frame);

  PairingBroker& broker_;
  Options options_;
  gatt::AttributeDatabase db_;
  Bytes adv_data_;
  std::optional<radio::ConnectionId> conn_;
  DeviceId peer_;
  bool encrypted_ = false;
  std::optional<pairing::Key128> key_;
  std::uint32_t tx_counter_ = 0;
  std::optional<std::uint32_t> rx_counter_;
  std::uint64_t op_counter_ = 0;
  bool advertising_wanted_ = false;
};

struct SensorConfig {
  DeviceId id = "sensor";
  std::string address = "c4:7c:8d:6a:22:01";
  std::string name = kSensorName;
  pairing::IoCapability io = pairing::IoCapability::kNoInputNoOutput;
  SimTime adv_interval_ms = 100;
  SimTime notify_interval_ms = 1000;
  bool supports_echo = false;
  SimTime echo_processing_ms = 0;
};

// Polar-H7-like heart-rate peripheral. Ticks at every multiple of the notify
// interval; the source advances on each tick whether or not anyone listens.
class HeartRateSensor : public GattServer {
 public:
  HeartRateSensor(radio::Radio& radio, PairingBroker& broker, SensorConfig config,
                  HeartRateSource source);

  void start();
  // Notifications that actually left the sensor.
  const std::vector<HrReading>& emitted() const { return emitted_; }

 private:
  void tick();

  SensorConfig config_;
  HeartRateSource source_;
  std::vector<HrReading> emitted_;
};

struct RssiSample {
  SimTime time_ms = 0;
  double dbm = 0;
  DeviceId peer;
};

struct RttSample {
  SimTime time_ms = 0;
  SimTime rtt_ms = 0;
  DeviceId peer;
};

struct MobileAppConfig {
  DeviceId id = "phone";
  std::string address = "5c:f3:70:11:aa:02";
  pairing::IoCapability io = pairing::IoCapability::kKeyboardDisplay;
  pairing::PairingMode mode = pairing::PairingMode::kLegacyLE;
  bool oob_available = false;
  std::string target_name = kSensorName;
  bool rssi_monitor = true;
  detection::DetectorConfig detector;
  std::optional<SimTime> rtt_probe_interval_ms;
  SimTime reconnect_delay_ms = 500;
};

// The fitness app: connects by device name, decodes heart rate, and runs
// the RSSI and RTT detectors. The RSSI baseline survives reconnects; the
// sliding window does not.
class MobileApp : public GattClient {
 public:
  MobileApp(radio::Radio& radio, PairingBroker& broker, MobileAppConfig config);

  void start();

  const std::vector<HrReading>& readings() const { return readings_; }
  const std::vector<RssiSample>& rssi_trace() const { return rssi_; }
  const std::vector<RttSample>& rtt_trace() const { return rtt_; }
  const std::vector<detection::Alert>& alerts() const { return alerts_; }
  bool rtt_unsupported() const { return rtt_unsupported_; }
  // Same as rtt_trace(), but throws kUnsupported once the peer rejected echo.
  const std::vector<RttSample>& rtt_probe_results() const;
  const detection::RssiDetector& detector() const { return detector_; }
  const MobileAppConfig& config() const { return config_; }

  std::function<void(const HrReading&)> reading_hook;
  std::function<void(const RssiSample&)> rssi_hook;
  std::function<void(const detection::Alert&)> alert_hook;

 protected:
  void on_link_frame(const radio::Frame& frame, double rssi_dbm) override;
  void on_gatt_op(const gatt::GattOp& op) override;
  void on_echo_response(bool rejected) override;
  void on_ready() override;
  void on_link_up() override;
  void on_link_down() override;

 private:
  void probe(std::uint64_t generation);
  void raise(const detection::Alert& alert);

  MobileAppConfig config_;
  detection::RssiDetector detector_;
  std::optional<double> rtt_baseline_;
  std::vector<HrReading> readings_;
  std::vector<RssiSample> rssi_;
  std::vector<RttSample> rtt_;
  std::vector<detection::Alert> alerts_;
  bool rtt_unsupported_ = false;
  std::optional<SimTime> probe_sent_;
  std::uint64_t link_generation_ = 0;
};

}  // namespace blelab::actors
