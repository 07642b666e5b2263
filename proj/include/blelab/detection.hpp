#pragma once

#include <cstdint>
#include <deque>
#include <exception>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blelab/common.hpp"

namespace blelab::detection {

struct DetectorConfig {
  int k = 20;        // baseline samples
  int w = 5;         // window size
  double z = 3.0;    // threshold in standard errors of the window mean
  double rho = 1.5;  // RTT inflation factor
  // Thresholding uses max(sigma, kSigmaFloor) unless disabled.
  bool clamp_sigma = true;

  void validate() const;
};

inline constexpr double kSigmaFloorDb = 0.5;

struct RssiBaseline {
  double mu = 0;
  double sigma = 0;
  int sample_count = 0;
};

// Mean and sample standard deviation (divisor k-1) of the first k samples.
// Throws kInsufficientSamples when fewer than k are given.
RssiBaseline fit_baseline(std::span<const double> samples, int k);

enum class AlertKind { kRssiIncrease, kRttInflation };
std::string_view to_string(AlertKind kind);

struct Alert {
  SimTime time_ms = 0;
  AlertKind kind = AlertKind::kRssiIncrease;
  double score = 0;
};

// Collects k samples, freezes the baseline, then alerts when the mean of the
// last w samples exceeds mu + z * sigma / sqrt(w). Increase-only.
class RssiDetector {
 public:
  explicit RssiDetector(DetectorConfig config = {});

  // Skips the learning phase with a known baseline.
  void set_baseline(const RssiBaseline& baseline);

  std::optional<Alert> update(double dbm, SimTime time_ms = 0);
  // New connection: the baseline stays, the window starts over.
  void reset_window();

  bool frozen() const { return baseline_.has_value(); }
  const std::optional<RssiBaseline>& baseline() const { return baseline_; }
  // Only meaningful once frozen.
  double threshold() const;
  double effective_sigma() const;

  std::uint64_t windows_evaluated() const { return windows_; }
  std::uint64_t window_alerts() const { return window_alerts_; }
  const DetectorConfig& config() const { return config_; }

 private:
  DetectorConfig config_;
  std::vector<double> learning_;
  std::optional<RssiBaseline> baseline_;
  std::deque<double> window_;
  std::uint64_t windows_ = 0;
  std::uint64_t window_alerts_ = 0;
};

// Alert iff sample > rho * baseline. Score is sample / baseline.
std::optional<Alert> rtt_update(double rtt_ms, double baseline_ms, double rho, SimTime time_ms = 0);

// Per-seed result of one attack run and one clean run.
struct RunOutcome {
  bool attack_ran = false;
  bool attack_detected = false;
  std::optional<SimTime> time_to_detect_ms;
  bool clean_ran = false;
  bool clean_alerted = false;
  std::uint64_t clean_windows = 0;
  std::uint64_t clean_window_alerts = 0;

  friend bool operator==(const RunOutcome&, const RunOutcome&) = default;
};

struct DetectionMetrics {
  std::uint64_t runs = 0;
  std::optional<double> tpr;
  std::optional<double> fpr;
  std::optional<double> mean_ttd_ms;
  std::uint64_t clean_windows = 0;
  std::uint64_t clean_window_alerts = 0;

  std::optional<double> per_window_false_alert_rate() const;

  friend bool operator==(const DetectionMetrics&, const DetectionMetrics&) = default;
};

DetectionMetrics summarize(std::span<const RunOutcome> outcomes);

// Header row: runs,tpr,fpr,mean_ttd_ms,z,w,k
std::string metrics_csv(const DetectionMetrics& m, const DetectorConfig& config);

// Synthetic RSSI streams with Gaussian clean and attack segments, sampled
// once per sample_interval_ms.
struct GaussianStreamModel {
  double clean_mean = -60.8;
  double clean_sd = 2.6;
  double attack_mean = -52.8;
  double attack_sd = 3.3;
  int clean_windows = 200;
  int pre_attack_samples = 10;
  int attack_samples = 60;
  SimTime sample_interval_ms = 1000;
  // Known baseline instead of one fitted from the first k samples.
  bool calibrated = false;
};

RunOutcome simulate_stream(const GaussianStreamModel& model, const DetectorConfig& config,
                           std::uint64_t seed);

// OpenMP over seeds seed_base .. seed_base + runs - 1.
DetectionMetrics evaluate(const GaussianStreamModel& model, const DetectorConfig& config, int runs,
                          std::uint64_t seed_base);
// Serial reference.
DetectionMetrics evaluate_serial(const GaussianStreamModel& model, const DetectorConfig& config,
                                 int runs, std::uint64_t seed_base);

// Generic driver used by the scenario Monte Carlo: run_one(seed) -> RunOutcome.
template <class F>
DetectionMetrics evaluate_runs(int runs, std::uint64_t seed_base, F&& run_one) {
  if (runs < 1) throw Error(ErrorCode::kInvalidArgument, "runs must be >= 1");
  std::vector<RunOutcome> outcomes(static_cast<std::size_t>(runs));
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 1)
  for (int i = 0; i < runs; ++i) {
    try {
      outcomes[static_cast<std::size_t>(i)] = run_one(seed_base + static_cast<std::uint64_t>(i));
    } catch (...) {
#pragma omp critical(blelab_evaluate_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return summarize(outcomes);
}

template <class F>
DetectionMetrics evaluate_runs_serial(int runs, std::uint64_t seed_base, F&& run_one) {
  if (runs < 1) throw Error(ErrorCode::kInvalidArgument, "runs must be >= 1");
  std::vector<RunOutcome> outcomes;
  outcomes.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) outcomes.push_back(run_one(seed_base + static_cast<std::uint64_t>(i)));
  return summarize(outcomes);
}

}  // namespace blelab::detection
