#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "blelab/actors.hpp"
#include "blelab/detection.hpp"
#include "blelab/mitm.hpp"
#include "blelab/radio.hpp"
#include "blelab/risk.hpp"

namespace blelab::harness {

struct HeartRateConfig {
  enum class Kind { kConstant, kWalk };
  Kind kind = Kind::kConstant;
  unsigned bpm = 70;
  // Walk parameters; the walk seed defaults to the scenario seed.
  std::optional<std::uint64_t> seed;
  unsigned min = 60;
  unsigned max = 100;
  unsigned step_max = 3;
};

struct MitmConfig {
  bool enabled = false;
  SimTime start_ms = 30'000;
  std::vector<mitm::ModificationRule> rules;
  bool manual_mode = false;
  SimTime advertising_interval_ms = 20;
  SimTime hold_timeout_ms = mitm::kDefaultHoldTimeoutMs;
  SimTime victim_reconnect_delay_ms = 500;
};

struct AssessmentConfig {
  bool always_discoverable = true;
  bool user_auth = false;
  bool end_to_end_security = false;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  SimTime duration_ms = 60'000;
  pairing::PairingMode pairing_mode = pairing::PairingMode::kLegacyLE;
  pairing::IoCapability initiator_io = pairing::IoCapability::kKeyboardDisplay;
  pairing::IoCapability responder_io = pairing::IoCapability::kNoInputNoOutput;
  bool oob_available = false;

  double sensor_to_phone_m = 1.0;
  double attacker_to_phone_m = 0.5;
  double attacker_to_sensor_m = 1.0;
  // Empty means the measured table (empirical mode).
  std::optional<radio::PathLossParams> path_loss;

  SimTime one_way_latency_ms = 5;
  SimTime proxy_processing_ms = 2;
  SimTime echo_processing_ms = 0;

  SimTime advertising_interval_ms = 100;
  SimTime notify_interval_ms = 1000;
  HeartRateConfig heart_rate;
  bool supports_echo = false;
  std::optional<SimTime> rtt_probe_interval_ms;

  MitmConfig mitm;
  detection::DetectorConfig detector;
  AssessmentConfig assessment;

  // Throws kConfigInvalid naming the offending field.
  void validate() const;
};

// Unknown keys and ill-typed values are kConfigInvalid with the field path.
ScenarioConfig config_from_json(const nlohmann::json& j);
ScenarioConfig load_config(const std::filesystem::path& path);
// Canonical form: every field, fixed key order.
nlohmann::ordered_json to_json(const ScenarioConfig& c);

std::uint64_t fnv1a64(std::string_view text);
// FNV-1a 64 of the canonical config without the seed, as 16 hex digits.
std::string config_hash(const ScenarioConfig& c);

risk::ScenarioFacts scenario_facts(const ScenarioConfig& c);

inline constexpr char kSensorId[] = "sensor";
inline constexpr char kPhoneId[] = "phone";

struct SimulationOptions {
  bool logging = true;
  // Build the attacker even when mitm.enabled is false (interactive use).
  bool with_attacker = false;
  // Clean control run: restart the victim session at mitm.start_ms without
  // launching the attack.
  bool clean_restart = false;
};

// One seeded scenario. Owns the queue, the medium and every actor.
class Simulation {
 public:
  explicit Simulation(const ScenarioConfig& config, SimulationOptions options = {});
  ~Simulation();

  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  // Starts every actor and schedules the attack (or clean restart).
  void start();
  void run_until(SimTime t);
  void run() { run_until(config_.duration_ms); }

  // Victim session restart followed by the takeover, at the current time.
  void launch_attack();
  // Victim session restart only.
  void restart_victim();

  const ScenarioConfig& config() const { return config_; }
  radio::EventQueue& queue() { return queue_; }
  const radio::EventQueue& queue() const { return queue_; }
  radio::Radio& radio() { return *radio_; }
  actors::HeartRateSensor& sensor() { return *sensor_; }
  actors::MobileApp& phone() { return *phone_; }
  // Null without an attacker.
  mitm::MitmAttacker* attacker() { return attacker_.get(); }
  const std::vector<detection::Alert>& alerts() const { return phone_->alerts(); }
  std::optional<SimTime> attack_started() const { return attack_started_; }

 private:
  ScenarioConfig config_;
  SimulationOptions options_;
  radio::EventQueue queue_;
  std::unique_ptr<radio::Radio> radio_;
  actors::PairingBroker broker_;
  std::unique_ptr<actors::HeartRateSensor> sensor_;
  std::unique_ptr<actors::MobileApp> phone_;
  std::unique_ptr<mitm::MitmAttacker> attacker_;
  std::optional<SimTime> attack_started_;
};

// What a passive listener learns from one link's pairing frames in the
// event log.
struct SniffResult {
  DeviceId central;
  DeviceId peripheral;
  std::optional<pairing::PairingTranscript> transcript;
  std::optional<pairing::Key128> key;
  std::uint64_t att_frames = 0;
  std::uint64_t decrypted = 0;
  std::vector<unsigned> heart_rates;
};

// Reconstructs the last pairing between the two devices from the log and
// tries to recover the session key and read the ATT traffic after it.
SniffResult sniff_link(const std::vector<radio::EventRecord>& log, const DeviceId& central,
                       const DeviceId& peripheral);

struct RunResult {
  std::filesystem::path out_dir;
  std::filesystem::path events_path;
  std::filesystem::path journal_path;
  std::filesystem::path summary_path;
  std::vector<detection::Alert> alerts;
  std::vector<actors::HrReading> readings;
  std::vector<unsigned> emitted_bpm;
  std::optional<SimTime> attack_started;
  std::vector<SniffResult> sniffed;
};

RunResult run(const ScenarioConfig& config, const std::filesystem::path& out_root);

// Attack run and clean control run for one seed, without logging.
detection::RunOutcome run_pair(const ScenarioConfig& config, std::uint64_t seed);

struct MonteCarloResult {
  detection::DetectionMetrics metrics;
  std::filesystem::path csv_path;
};

// Full-scenario sweep over seeds seed_base .. seed_base + runs - 1 (OpenMP).
detection::DetectionMetrics montecarlo_metrics(const ScenarioConfig& config, int runs, std::uint64_t seed_base);
// Serial reference.
detection::DetectionMetrics montecarlo_metrics_serial(const ScenarioConfig& config, int runs,
                                                      std::uint64_t seed_base);
MonteCarloResult montecarlo(const ScenarioConfig& config, int runs, std::uint64_t seed_base,
                            const std::filesystem::path& out_root);

struct AssessResult {
  std::vector<risk::VulnerabilityFinding> findings;
  std::filesystem::path json_path;
  std::filesystem::path text_path;
};

AssessResult assess(const ScenarioConfig& config, const std::filesystem::path& out_root);

}  // namespace blelab::harness
