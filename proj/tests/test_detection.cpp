#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "blelab/detection.hpp"

using namespace blelab;
using namespace blelab::detection;

namespace {

double upper_normal_tail(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

// P(T_nu > x) by Simpson integration of the Student-t density over [x, x + 60].
double upper_t_tail(double x, int nu) {
  const double n = nu;
  const double c = std::exp(std::lgamma((n + 1) / 2) - std::lgamma(n / 2)) / std::sqrt(n * M_PI);
  auto f = [&](double t) { return c * std::pow(1 + t * t / n, -(n + 1) / 2); };
  const int steps = 200000;
  const double a = x, b = x + 60, h = (b - a) / steps;
  double s = f(a) + f(b);
  for (int i = 1; i < steps; ++i) s += f(a + i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

RssiDetector frozen_detector(double mu, double sigma, DetectorConfig cfg = {}) {
  RssiDetector d(cfg);
  d.set_baseline({mu, sigma, cfg.k});
  return d;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(DetectorConfig{}.validate());
  auto bad = [](DetectorConfig c) {
    try {
      c.validate();
    } catch (const Error& e) {
      return e.code() == ErrorCode::kConfigInvalid;
    }
    return false;
  };
  CHECK(bad({1, 5, 3, 1.5, true}));
  CHECK(bad({20, 0, 3, 1.5, true}));
  CHECK(bad({20, 5, 0, 1.5, true}));
  CHECK(bad({20, 5, 3, 1.0, true}));
}

TEST_CASE("fit_baseline") {
  SUBCASE("constant samples") {
    std::vector<double> xs(20, -60.8);
    const auto b = fit_baseline(xs, 20);
    CHECK(b.mu == doctest::Approx(-60.8));
    CHECK(b.sigma == 0.0);
    CHECK(b.sample_count == 20);
  }
  SUBCASE("1e4 draws from the 1 m row") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g(-60.8, 2.6);
    std::vector<double> xs(10000);
    for (auto& x : xs) x = g(rng);
    const auto b = fit_baseline(xs, 10000);
    CHECK(std::abs(b.mu + 60.8) <= 0.1);
    CHECK(std::abs(b.sigma - 2.6) <= 0.1);
  }
  SUBCASE("divisor k-1, first k only") {
    const std::vector<double> xs{1, 2, 3, 100};
    const auto b = fit_baseline(xs, 3);
    CHECK(b.mu == doctest::Approx(2.0));
    CHECK(b.sigma == doctest::Approx(1.0));
  }
  SUBCASE("too few samples") {
    const std::vector<double> xs{-60.0};
    try {
      fit_baseline(xs, 20);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kInsufficientSamples);
    }
  }
}

TEST_CASE("threshold and window") {
  auto d = frozen_detector(-60.8, 2.6);
  CHECK(d.threshold() == doctest::Approx(-60.8 + 3 * 2.6 / std::sqrt(5.0)));
  CHECK(d.threshold() == doctest::Approx(-57.31).epsilon(1e-4));

  SUBCASE("clean window mean -60.5") {
    for (double x : {-60.0, -61.0, -60.5, -60.2, -60.8}) CHECK_FALSE(d.update(x));
    CHECK(d.windows_evaluated() == 1);
  }
  SUBCASE("attack window all -52.8") {
    std::optional<Alert> a;
    for (int i = 0; i < 5; ++i) a = d.update(-52.8, 1000 * (i + 1));
    REQUIRE(a);
    CHECK(a->kind == AlertKind::kRssiIncrease);
    CHECK(a->time_ms == 5000);
    const double thr = -60.8 + 3 * 2.6 / std::sqrt(5.0);
    CHECK(a->score == doctest::Approx((-52.8 - thr) / (2.6 / std::sqrt(5.0))));
    CHECK(a->score > 0);
  }
  SUBCASE("window must fill first") {
    for (int i = 0; i < 4; ++i) CHECK_FALSE(d.update(0.0));
    CHECK(d.windows_evaluated() == 0);
    CHECK(d.update(0.0));
  }
  SUBCASE("decreases never alert") {
    for (int i = 0; i < 50; ++i) CHECK_FALSE(d.update(-90.0));
  }
  SUBCASE("reset_window keeps the baseline") {
    for (int i = 0; i < 5; ++i) d.update(-60.8);
    d.reset_window();
    CHECK(d.frozen());
    for (int i = 0; i < 4; ++i) CHECK_FALSE(d.update(0.0));
    CHECK(d.update(0.0));
  }
}

TEST_CASE("degenerate sigma") {
  DetectorConfig raw;
  raw.clamp_sigma = false;
  auto d = frozen_detector(-60.8, 0.0, raw);
  std::optional<Alert> a;
  for (int i = 0; i < 5; ++i) a = d.update(-60.79);
  REQUIRE(a);
  CHECK(a->score == doctest::Approx(0.01));

  // The clamp lifts the threshold to mu + z * 0.5 / sqrt(w).
  auto c = frozen_detector(-60.8, 0.0);
  CHECK(c.effective_sigma() == kSigmaFloorDb);
  for (int i = 0; i < 5; ++i) CHECK_FALSE(c.update(-60.79));
}

TEST_CASE("learning phase") {
  RssiDetector d;
  CHECK_FALSE(d.frozen());
  CHECK_THROWS_AS(d.threshold(), Error);
  for (int i = 0; i < 19; ++i) CHECK_FALSE(d.update(i % 2 ? 0.0 : 40.0));
  CHECK_FALSE(d.frozen());
  CHECK_FALSE(d.update(0.0));
  REQUIRE(d.frozen());
  CHECK(d.baseline()->sample_count == 20);
  CHECK(d.windows_evaluated() == 0);
}

TEST_CASE("no alert before freeze on any stream") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-100, 0);
  for (int trial = 0; trial < 200; ++trial) {
    DetectorConfig cfg;
    cfg.k = 2 + trial % 30;
    RssiDetector d(cfg);
    for (int i = 0; i < cfg.k; ++i) {
      CHECK_FALSE(d.update(u(rng)));
    }
  }
}

TEST_CASE("translation covariance") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(-60.8, 2.6);
  std::bernoulli_distribution jump(0.1);
  RssiDetector a, b;
  int alerts = 0;
  for (int i = 0; i < 5000; ++i) {
    const double x = g(rng) + (jump(rng) ? 8.0 : 0.0);
    const bool ra = a.update(x).has_value();
    const bool rb = b.update(x + 17.25).has_value();
    CHECK(ra == rb);
    alerts += ra;
  }
  CHECK(alerts > 0);
}

TEST_CASE("rtt_update") {
  CHECK(rtt_update(22, 10, 1.5));
  CHECK(rtt_update(22, 10, 1.5)->score == doctest::Approx(2.2));
  CHECK(rtt_update(22, 10, 1.5)->kind == AlertKind::kRttInflation);
  CHECK_FALSE(rtt_update(10, 10, 1.5));
  CHECK_FALSE(rtt_update(15, 10, 1.5));
  CHECK(rtt_update(15.01, 10, 1.5));
  CHECK_THROWS_AS(rtt_update(10, 0, 1.5), Error);
}

TEST_CASE("summarize and csv") {
  std::vector<RunOutcome> v(4);
  v[0] = {true, true, 3000, true, false, 200, 0};
  v[1] = {true, true, 5000, true, true, 200, 2};
  v[2] = {true, false, std::nullopt, true, false, 200, 0};
  v[3] = {true, true, 1000, true, false, 200, 0};
  const auto m = summarize(v);
  CHECK(m.runs == 4);
  CHECK(*m.tpr == doctest::Approx(0.75));
  CHECK(*m.fpr == doctest::Approx(0.25));
  CHECK(*m.mean_ttd_ms == doctest::Approx(3000));
  CHECK(*m.per_window_false_alert_rate() == doctest::Approx(2.0 / 800));
  CHECK(metrics_csv(m, {}) == "runs,tpr,fpr,mean_ttd_ms,z,w,k\n4,0.75,0.25,3000,3,5,20\n");

  const auto empty = summarize(std::vector<RunOutcome>{});
  CHECK_FALSE(empty.tpr);
  CHECK(metrics_csv(empty, {}) == "runs,tpr,fpr,mean_ttd_ms,z,w,k\n0,,,,3,5,20\n");
}

TEST_CASE("zero-attack zero-noise") {
  GaussianStreamModel m;
  m.clean_sd = 0;
  m.attack_samples = 0;
  const auto r = evaluate(m, {}, 50, 1);
  CHECK_FALSE(r.tpr);
  CHECK_FALSE(r.mean_ttd_ms);
  REQUIRE(r.fpr);
  CHECK(*r.fpr == 0.0);
  CHECK(r.clean_windows == 50u * 200u);
}

TEST_CASE("runs must be positive") {
  CHECK_THROWS_AS(evaluate({}, {}, 0, 1), Error);
  CHECK_THROWS_AS(evaluate_serial({}, {}, 0, 1), Error);
}

TEST_CASE("parallel evaluate matches the serial reference") {
  GaussianStreamModel m;
  for (int runs : {1, 7, 300}) {
    CHECK(evaluate(m, {}, runs, 1000) == evaluate_serial(m, {}, runs, 1000));
  }
  CHECK(simulate_stream(m, {}, 42) == simulate_stream(m, {}, 42));
  CHECK_FALSE(evaluate_serial(m, {}, 100, 1) == evaluate_serial(m, {}, 100, 2));
}

TEST_CASE("table shift is detected") {
  // Per-window detection probability with a known baseline.
  const double se = 3.3 / std::sqrt(5.0);
  const double thr = -60.8 + 3 * 2.6 / std::sqrt(5.0);
  const double p_window = upper_normal_tail((thr + 52.8) / se);
  CHECK(p_window > 0.99);

  const auto r = evaluate({}, {}, 1000, 1);
  REQUIRE(r.tpr);
  CHECK(*r.tpr >= 0.99);
  REQUIRE(r.mean_ttd_ms);
  CHECK(*r.mean_ttd_ms >= 1000);
  CHECK(*r.mean_ttd_ms <= 5000);
}

TEST_CASE("per-window false alarms, known baseline") {
  GaussianStreamModel m;
  m.calibrated = true;
  m.attack_samples = 0;
  const auto r = evaluate(m, {}, 2000, 1);
  const double oracle = upper_normal_tail(3.0);
  CHECK(oracle == doctest::Approx(0.00135).epsilon(0.01));
  const double rate = *r.per_window_false_alert_rate();
  MESSAGE("calibrated per-window rate " << rate << " vs " << oracle);
  CHECK(std::abs(rate - oracle) <= 0.3 * oracle);
}

TEST_CASE("per-window false alarms, fitted baseline") {
  // With mu and sigma estimated from k samples, (window mean - mu_hat) / s
  // scaled by sqrt(1/w + 1/k) is Student-t with k-1 degrees of freedom.
  const DetectorConfig cfg;
  const double x = cfg.z / std::sqrt(1.0 + static_cast<double>(cfg.w) / cfg.k);
  const double oracle = upper_t_tail(x, cfg.k - 1);
  CHECK(oracle == doctest::Approx(upper_normal_tail(3.0)).epsilon(10));  // sanity: same order
  GaussianStreamModel m;
  m.attack_samples = 0;
  const auto r = evaluate(m, cfg, 4000, 1);
  const double rate = *r.per_window_false_alert_rate();
  MESSAGE("fitted per-window rate " << rate << " vs t oracle " << oracle);
  CHECK(std::abs(rate - oracle) <= 0.25 * oracle);
}

TEST_CASE("raising z never raises TPR or FPR on fixed seeds") {
  GaussianStreamModel m;
  std::optional<DetectionMetrics> prev;
  for (double z : {1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0}) {
    DetectorConfig cfg;
    cfg.z = z;
    const auto r = evaluate(m, cfg, 300, 9);
    if (prev) {
      CHECK(*r.tpr <= *prev->tpr);
      CHECK(*r.fpr <= *prev->fpr);
      CHECK(r.clean_window_alerts <= prev->clean_window_alerts);
    }
    prev = r;
  }
}

TEST_CASE("distance-neutral attacker is invisible") {
  GaussianStreamModel m;
  m.attack_mean = m.clean_mean;
  m.attack_sd = m.clean_sd;
  m.pre_attack_samples = 4;
  m.attack_samples = 200;  // same window count as a clean run
  const auto r = evaluate(m, {}, 2000, 5);
  MESSAGE("tpr " << *r.tpr << " fpr " << *r.fpr);
  CHECK(std::abs(*r.tpr - *r.fpr) <= 0.05);
}
