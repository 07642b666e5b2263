#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <memory>

#include "blelab/actors.hpp"

using namespace blelab;
using namespace blelab::actors;
using radio::FrameKind;

namespace {

radio::RadioLink empirical_link(const DeviceId& a, const DeviceId& b, double d) {
  radio::RadioLink l;
  l.a = a;
  l.b = b;
  l.distance_m = d;
  l.signal.mode = radio::SignalMode::kEmpirical;
  return l;
}

struct World {
  radio::EventQueue q;
  radio::Radio radio;
  PairingBroker broker;
  std::unique_ptr<HeartRateSensor> sensor;
  std::unique_ptr<MobileApp> phone;

  explicit World(HeartRateSource source = HeartRateSource::constant(70), SensorConfig sc = {},
                 MobileAppConfig pc = {}, std::uint64_t seed = 1)
      : radio(q, seed) {
    sensor = std::make_unique<HeartRateSensor>(radio, broker, sc, std::move(source));
    phone = std::make_unique<MobileApp>(radio, broker, pc);
    sensor->register_device();
    phone->register_device();
    radio.add_link(empirical_link(pc.id, sc.id, 1.0));
  }

  void start() {
    sensor->start();
    phone->start();
  }
};

std::vector<std::uint8_t> smp_codes(const radio::Radio& r) {
  std::vector<std::uint8_t> out;
  for (const auto& e : r.log()) {
    if (e.kind == FrameKind::kData && e.payload.size() >= 2 && e.payload[0] == link::kCidSmp) {
      out.push_back(e.payload[1]);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("advertising data") {
  const Bytes adv = make_adv_data(kSensorName);
  CHECK(adv_name(adv) == std::string("PolarSim H7"));
  CHECK(adv.size() == 3 + 2 + 11 + 4);
  CHECK(adv[adv.size() - 2] == 0x0D);
  CHECK(adv[adv.size() - 1] == 0x18);
  CHECK_FALSE(adv_name(Bytes{0x02, 0x01, 0x06}));
  CHECK_FALSE(adv_name(Bytes{0x05, 0x09, 'a'}));  // truncated
}

TEST_CASE("heart-rate sources") {
  auto c = HeartRateSource::constant(70);
  for (int i = 0; i < 10; ++i) CHECK(c.next() == 70);

  auto w = HeartRateSource::seeded_walk(42, 60, 100, 3);
  auto w2 = HeartRateSource::seeded_walk(42, 60, 100, 3);
  unsigned lo = 1000, hi = 0, prev = 80;
  for (int i = 0; i < 20000; ++i) {
    const unsigned v = w.next();
    CHECK(v == w2.next());
    CHECK(v >= 60);
    CHECK(v <= 100);
    CHECK(static_cast<int>(v) - static_cast<int>(prev) <= 3);
    CHECK(static_cast<int>(prev) - static_cast<int>(v) <= 3);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    prev = v;
  }
  CHECK(lo == 60);
  CHECK(hi == 100);
  CHECK_THROWS_AS(HeartRateSource::seeded_walk(1, 100, 60, 3), Error);
}

TEST_CASE("constant 70 bpm stream") {
  World w;
  w.start();
  w.q.run_until(5500);

  REQUIRE(w.phone->phase() == GattClient::Phase::kReady);
  CHECK(w.sensor->secured());
  CHECK(w.sensor->subscribed(gatt::kHeartRateMeasurementUuid));

  const auto& em = w.sensor->emitted();
  REQUIRE(em.size() == 5);
  for (std::size_t i = 0; i < em.size(); ++i) {
    CHECK(em[i].time_ms == static_cast<SimTime>(1000 * (i + 1)));
    CHECK(em[i].bpm == 70);
  }
  const auto& rd = w.phone->readings();
  REQUIRE(rd.size() == 5);
  for (std::size_t i = 0; i < rd.size(); ++i) {
    CHECK(rd[i].time_ms == em[i].time_ms + 5);
    CHECK(rd[i].bpm == 70);
    CHECK(rd[i].source == "sensor");
  }

  // On air the notification is ciphertext; with the session key it opens to [0x00, 0x46].
  const auto& key = w.phone->keys()->session_key();
  int notifies = 0;
  for (const auto& e : w.radio.log()) {
    if (e.sender != "sensor" || e.kind != FrameKind::kData || e.payload.empty() || e.payload[0] != link::kCidAtt) continue;
    const auto op = link::open_att(key, pairing::LinkDirection::kPeripheralToCentral, e.payload);
    if (op.kind != gatt::OpKind::kNotify) continue;
    ++notifies;
    CHECK(op.payload == Bytes{0x00, 0x46});
    const Bytes plain = gatt::encode_op(op);
    CHECK_FALSE(std::search(e.payload.begin(), e.payload.end(), plain.begin(), plain.end()) != e.payload.end());
  }
  CHECK(notifies == 5);
}

TEST_CASE("connection flow order") {
  World w;
  w.start();
  wait_until_ready(w.radio, *w.phone);
  CHECK(smp_codes(w.radio) == std::vector<std::uint8_t>{0x01, 0x02, 0x03, 0x03, 0x04, 0x04});

  // scan -> connect -> pair -> discover -> subscribe
  std::vector<std::string> steps;
  for (const auto& e : w.radio.log()) {
    if (e.kind == FrameKind::kAdvInd && e.receiver == "phone" && steps.empty()) steps.push_back("adv");
    if (e.kind == FrameKind::kConnectReq) steps.push_back("connect");
    if (e.kind == FrameKind::kData && e.payload[0] == link::kCidSmp && e.payload[1] == 0x01) steps.push_back("pair");
  }
  CHECK(steps == std::vector<std::string>{"adv", "connect", "pair"});
  CHECK(w.phone->remote_db().same_structure(gatt::build_heart_rate_profile()));
  CHECK(w.phone->keys()->stk.has_value());
  // Notify lands after ready.
  w.q.run_until(1100);
  CHECK(w.phone->readings().size() == 1);

  // Roles: the peripheral never connects, the central never advertises.
  for (const auto& e : w.radio.log()) {
    if (e.kind == FrameKind::kConnectReq) CHECK(e.sender == "phone");
    if (e.kind == FrameKind::kAdvInd) CHECK(e.sender == "sensor");
  }
}

TEST_CASE("target absent") {
  MobileAppConfig pc;
  pc.target_name = "Nobody";
  World w({}, {}, pc);
  w.start();
  try {
    wait_until_ready(w.radio, *w.phone, 5000);
    FAIL("expected timeout");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kTimeout);
  }
  CHECK_FALSE(w.phone->connection());
  CHECK(w.q.now() == 5000);
}

TEST_CASE("secure connections uses the same flow") {
  MobileAppConfig pc;
  pc.mode = pairing::PairingMode::kSecureConnections;
  World sc({}, {}, pc);
  sc.start();
  wait_until_ready(sc.radio, *sc.phone);
  CHECK(smp_codes(sc.radio) == std::vector<std::uint8_t>{0x01, 0x02, 0x0C, 0x0C, 0x03, 0x03, 0x04, 0x04});
  CHECK(sc.phone->keys()->ltk.has_value());
  sc.q.run_until(3100);
  CHECK(sc.phone->readings().size() == 3);

  World legacy;
  legacy.start();
  wait_until_ready(legacy.radio, *legacy.phone);
  CHECK(legacy.phone->keys()->session_key() != sc.phone->keys()->session_key());
}

TEST_CASE("unsubscribed peer gets nothing") {
  radio::EventQueue q;
  radio::Radio r(q, 1);
  PairingBroker broker;
  HeartRateSensor sensor(r, broker, {}, HeartRateSource::constant(70));
  GattClient client(r, broker, {"phone", "5c:f3:70:11:aa:02", pairing::IoCapability::kKeyboardDisplay,
                                pairing::PairingMode::kLegacyLE, false, gatt::Uuid::from_short(0x2A38)});
  sensor.register_device();
  client.register_device();
  r.add_link(empirical_link("phone", "sensor", 1.0));
  sensor.start();
  client.connect_to_name(kSensorName);
  q.run_until(5500);
  CHECK(client.phase() == GattClient::Phase::kReady);
  CHECK_FALSE(sensor.subscribed(gatt::kHeartRateMeasurementUuid));
  CHECK(sensor.emitted().empty());
  int att_from_sensor = 0;
  for (const auto& e : r.log()) {
    if (e.sender == "sensor" && e.kind == FrameKind::kData && e.payload[0] == link::kCidAtt) ++att_from_sensor;
  }
  CHECK(att_from_sensor == 1);  // the discovery response only
}

TEST_CASE("rtt probe on a direct link") {
  SensorConfig sc;
  sc.supports_echo = true;
  MobileAppConfig pc;
  pc.rtt_probe_interval_ms = 1000;
  World w(HeartRateSource::constant(70), sc, pc);
  w.start();
  w.q.run_until(10'500);
  const auto& rtt = w.phone->rtt_probe_results();
  REQUIRE(rtt.size() >= 9);
  for (const auto& s : rtt) CHECK(s.rtt_ms == 10);
  CHECK(w.phone->alerts().empty());
}

TEST_CASE("echo processing adds to rtt") {
  SensorConfig sc;
  sc.supports_echo = true;
  sc.echo_processing_ms = 3;
  MobileAppConfig pc;
  pc.rtt_probe_interval_ms = 500;
  World w(HeartRateSource::constant(70), sc, pc);
  w.start();
  w.q.run_until(3000);
  REQUIRE_FALSE(w.phone->rtt_trace().empty());
  for (const auto& s : w.phone->rtt_trace()) CHECK(s.rtt_ms == 13);
}

TEST_CASE("echo unsupported") {
  MobileAppConfig pc;
  pc.rtt_probe_interval_ms = 1000;
  World w(HeartRateSource::constant(70), {}, pc);
  w.start();
  w.q.run_until(10'000);
  CHECK(w.phone->rtt_unsupported());
  CHECK(w.phone->rtt_trace().empty());
  try {
    w.phone->rtt_probe_results();
    FAIL("expected Unsupported");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kUnsupported);
  }
  for (const auto& a : w.phone->alerts()) CHECK(a.kind != detection::AlertKind::kRttInflation);
  // Only one echo request ever goes out.
  int reqs = 0;
  for (const auto& e : w.radio.log()) reqs += e.kind == FrameKind::kEchoReq;
  CHECK(reqs == 1);
}

TEST_CASE("decoded stream equals the source stream") {
  World w(HeartRateSource::seeded_walk(42, 60, 100, 3), {}, {}, 9);
  w.start();
  w.q.run_until(120'000);
  auto reference = HeartRateSource::seeded_walk(42, 60, 100, 3);
  const auto& em = w.sensor->emitted();
  const auto& rd = w.phone->readings();
  REQUIRE(em.size() == 120);
  REQUIRE(rd.size() == 119);  // the 120000 ms notification is still in flight
  for (std::size_t i = 0; i < em.size(); ++i) {
    CHECK(em[i].bpm == reference.next());
    if (i < rd.size()) CHECK(rd[i].bpm == em[i].bpm);
  }
}

TEST_CASE("wide heart rates use the uint16 format") {
  World w(HeartRateSource::constant(300));
  w.start();
  w.q.run_until(2500);
  REQUIRE(w.phone->readings().size() == 2);
  CHECK(w.phone->readings()[0].bpm == 300);
}

TEST_CASE("reconnect keeps the baseline") {
  World w;
  w.start();
  w.q.run_until(30'500);
  REQUIRE(w.phone->detector().frozen());
  const auto baseline = *w.phone->detector().baseline();
  const auto before = w.phone->readings().size();
  w.sensor->disconnect();
  w.q.run_until(31'000);
  CHECK(w.phone->phase() != GattClient::Phase::kReady);
  w.q.run_until(40'500);
  CHECK(w.phone->phase() == GattClient::Phase::kReady);
  CHECK(w.phone->readings().size() > before);
  CHECK(w.phone->detector().baseline()->mu == baseline.mu);
  CHECK(w.phone->alerts().empty());
}

TEST_CASE("same seed, same trace") {
  auto run = [] {
    World w(HeartRateSource::seeded_walk(5, 60, 100, 3), {}, {}, 77);
    w.start();
    w.q.run_until(20'000);
    std::vector<std::string> lines;
    for (const auto& e : w.radio.log()) lines.push_back(radio::to_json_line(e));
    return lines;
  };
  CHECK(run() == run());
}
