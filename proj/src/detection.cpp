#include "blelab/detection.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace blelab::detection {

void DetectorConfig::validate() const {
  if (k < 2) throw Error(ErrorCode::kConfigInvalid, "detector.k must be >= 2");
  if (w < 1) throw Error(ErrorCode::kConfigInvalid, "detector.w must be >= 1");
  if (!(z > 0)) throw Error(ErrorCode::kConfigInvalid, "detector.z must be > 0");
  if (!(rho > 1)) throw Error(ErrorCode::kConfigInvalid, "detector.rho must be > 1");
}

RssiBaseline fit_baseline(std::span<const double> samples, int k) {
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "baseline needs k >= 2");
  if (samples.size() < static_cast<std::size_t>(k)) {
    throw Error(ErrorCode::kInsufficientSamples,
                "baseline needs " + std::to_string(k) + " samples, got " + std::to_string(samples.size()));
  }
  // Shifted by the first sample so constant input gives sigma == 0 exactly.
  const double x0 = samples[0];
  double sum = 0;
  for (int i = 0; i < k; ++i) sum += samples[static_cast<std::size_t>(i)] - x0;
  const double shift = sum / k;
  double ss = 0;
  for (int i = 0; i < k; ++i) {
    const double d = samples[static_cast<std::size_t>(i)] - x0 - shift;
    ss += d * d;
  }
  return {x0 + shift, std::sqrt(ss / (k - 1)), k};
}

std::string_view to_string(AlertKind kind) {
  return kind == AlertKind::kRssiIncrease ? "RssiIncrease" : "RttInflation";
}

RssiDetector::RssiDetector(DetectorConfig config) : config_(config) {
  config_.validate();
  learning_.reserve(static_cast<std::size_t>(config_.k));
}

void RssiDetector::set_baseline(const RssiBaseline& baseline) {
  if (baseline.sigma < 0) throw Error(ErrorCode::kInvalidArgument, "baseline sigma must be >= 0");
  baseline_ = baseline;
  learning_.clear();
}

void RssiDetector::reset_window() {
  window_.clear();
}

double RssiDetector::effective_sigma() const {
  const double s = baseline_ ? baseline_->sigma : 0.0;
  return config_.clamp_sigma ? std::max(s, kSigmaFloorDb) : s;
}

double RssiDetector::threshold() const {
  if (!baseline_) throw Error(ErrorCode::kInvalidState, "baseline not frozen");
  return baseline_->mu + config_.z * effective_sigma() / std::sqrt(static_cast<double>(config_.w));
}

std::optional<Alert> RssiDetector::update(double dbm, SimTime time_ms) {
  if (!baseline_) {
    learning_.push_back(dbm);
    if (learning_.size() == static_cast<std::size_t>(config_.k)) {
      baseline_ = fit_baseline(learning_, config_.k);
      learning_.clear();
    }
    return std::nullopt;
  }
  window_.push_back(dbm);
  if (window_.size() > static_cast<std::size_t>(config_.w)) window_.pop_front();
  if (window_.size() < static_cast<std::size_t>(config_.w)) return std::nullopt;

  double sum = 0;
  for (double v : window_) sum += v;
  const double mean = sum / config_.w;
  ++windows_;
  const double thr = threshold();
  if (!(mean > thr)) return std::nullopt;
  ++window_alerts_;
  const double se = effective_sigma() / std::sqrt(static_cast<double>(config_.w));
  const double score = se > 0 ? (mean - thr) / se : mean - thr;
  return Alert{time_ms, AlertKind::kRssiIncrease, score};
}

std::optional<Alert> rtt_update(double rtt_ms, double baseline_ms, double rho, SimTime time_ms) {
  if (!(baseline_ms > 0)) throw Error(ErrorCode::kInvalidArgument, "RTT baseline must be > 0");
  if (rtt_ms > rho * baseline_ms) return Alert{time_ms, AlertKind::kRttInflation, rtt_ms / baseline_ms};
  return std::nullopt;
}

std::optional<double> DetectionMetrics::per_window_false_alert_rate() const {
  if (clean_windows == 0) return std::nullopt;
  return static_cast<double>(clean_window_alerts) / static_cast<double>(clean_windows);
}

DetectionMetrics summarize(std::span<const RunOutcome> outcomes) {
  DetectionMetrics m;
  m.runs = outcomes.size();
  std::uint64_t attacks = 0, detected = 0, cleans = 0, alerted = 0;
  double ttd_sum = 0;
  std::uint64_t ttd_n = 0;
  for (const auto& o : outcomes) {
    if (o.attack_ran) {
      ++attacks;
      if (o.attack_detected) {
        ++detected;
        if (o.time_to_detect_ms) {
          ttd_sum += static_cast<double>(*o.time_to_detect_ms);
          ++ttd_n;
        }
      }
    }
    if (o.clean_ran) {
      ++cleans;
      if (o.clean_alerted) ++alerted;
      m.clean_windows += o.clean_windows;
      m.clean_window_alerts += o.clean_window_alerts;
    }
  }
  if (attacks > 0) m.tpr = static_cast<double>(detected) / static_cast<double>(attacks);
  if (cleans > 0) m.fpr = static_cast<double>(alerted) / static_cast<double>(cleans);
  if (ttd_n > 0) m.mean_ttd_ms = ttd_sum / static_cast<double>(ttd_n);
  return m;
}

namespace {

std::uint32_t lo32(std::uint64_t v) { return static_cast<std::uint32_t>(v); }
std::uint32_t hi32(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

// N(mean, sd) that also accepts sd == 0.
class Gaussian {
 public:
  Gaussian(double mean, double sd) : mean_(mean), sd_(sd), unit_(0.0, 1.0) {
    if (sd < 0) throw Error(ErrorCode::kInvalidArgument, "negative standard deviation");
  }
  double operator()(std::mt19937_64& rng) { return mean_ + sd_ * unit_(rng); }
  void reset() { unit_.reset(); }

 private:
  double mean_;
  double sd_;
  std::normal_distribution<double> unit_;
};

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  return buf;
}

}  // namespace

std::string metrics_csv(const DetectionMetrics& m, const DetectorConfig& c) {
  std::ostringstream out;
  out << "runs,tpr,fpr,mean_ttd_ms,z,w,k\n";
  out << m.runs << ',' << fmt(m.tpr) << ',' << fmt(m.fpr) << ',' << fmt(m.mean_ttd_ms) << ','
      << fmt(c.z) << ',' << c.w << ',' << c.k << '\n';
  return out.str();
}

RunOutcome simulate_stream(const GaussianStreamModel& model, const DetectorConfig& config,
                           std::uint64_t seed) {
  RunOutcome out;
  Gaussian clean(model.clean_mean, model.clean_sd);
  Gaussian attack(model.attack_mean, model.attack_sd);

  auto prime = [&](RssiDetector& d, std::mt19937_64& rng) {
    if (model.calibrated) {
      d.set_baseline({model.clean_mean, model.clean_sd, config.k});
    } else {
      for (int i = 0; i < config.k; ++i) d.update(clean(rng));
    }
  };

  {
    std::seed_seq seq{lo32(seed), hi32(seed), 1u};
    std::mt19937_64 rng(seq);
    clean.reset();
    RssiDetector d(config);
    prime(d, rng);
    const int n = config.w - 1 + model.clean_windows;
    for (int i = 0; i < n; ++i) d.update(clean(rng));
    out.clean_ran = true;
    out.clean_windows = d.windows_evaluated();
    out.clean_window_alerts = d.window_alerts();
    out.clean_alerted = d.window_alerts() > 0;
  }

  if (model.attack_samples > 0) {
    std::seed_seq seq{lo32(seed), hi32(seed), 2u};
    std::mt19937_64 rng(seq);
    clean.reset();
    attack.reset();
    RssiDetector d(config);
    prime(d, rng);
    for (int i = 0; i < model.pre_attack_samples; ++i) d.update(clean(rng));
    out.attack_ran = true;
    for (int i = 0; i < model.attack_samples; ++i) {
      if (d.update(attack(rng)) && !out.attack_detected) {
        out.attack_detected = true;
        out.time_to_detect_ms = static_cast<SimTime>(i + 1) * model.sample_interval_ms;
      }
    }
  }
  return out;
}

DetectionMetrics evaluate(const GaussianStreamModel& model, const DetectorConfig& config, int runs,
                          std::uint64_t seed_base) {
  return evaluate_runs(runs, seed_base,
                       [&](std::uint64_t seed) { return simulate_stream(model, config, seed); });
}

DetectionMetrics evaluate_serial(const GaussianStreamModel& model, const DetectorConfig& config,
                                 int runs, std::uint64_t seed_base) {
  return evaluate_runs_serial(runs, seed_base,
                              [&](std::uint64_t seed) { return simulate_stream(model, config, seed); });
}

}  // namespace blelab::detection
