#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "blelab/control.hpp"
#include "blelab/harness.hpp"

using namespace blelab;
using namespace blelab::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kInvalidArgument;
}

std::string error_text(const json& j) {
  try {
    config_from_json(j);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfigInvalid);
    return e.what();
  }
  FAIL("expected ConfigInvalid");
  return {};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("blelab_test_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

ScenarioConfig poc_config() {
  ScenarioConfig c;
  c.mitm.enabled = true;
  c.mitm.rules = {{gatt::kHeartRateMeasurementUuid, mitm::Direction::kToCentral, mitm::Transform::hr_override(255)}};
  return c;
}

}  // namespace

TEST_CASE("config defaults and round trip") {
  const auto c = config_from_json(json::object());
  CHECK(c.seed == 1);
  CHECK(c.duration_ms == 60'000);
  CHECK(c.pairing_mode == pairing::PairingMode::kLegacyLE);
  CHECK(c.sensor_to_phone_m == 1.0);
  CHECK(c.attacker_to_phone_m == 0.5);
  CHECK_FALSE(c.path_loss.has_value());
  CHECK(c.one_way_latency_ms == 5);
  CHECK(c.proxy_processing_ms == 2);
  CHECK_FALSE(c.mitm.enabled);
  CHECK(c.detector.k == 20);

  auto p = poc_config();
  p.path_loss = radio::PathLossParams{2.0, -59.0, 1.5};
  p.sensor_to_phone_m = 2.0;
  p.heart_rate.kind = HeartRateConfig::Kind::kWalk;
  p.heart_rate.seed = 9;
  p.rtt_probe_interval_ms = 2000;
  const auto text = to_json(p).dump();
  CHECK(to_json(config_from_json(json::parse(text))).dump() == text);
}

TEST_CASE("config errors name the field") {
  CHECK(error_text({{"distances", {{"sensor_to_phone", -1.0}}}}).find("distances.sensor_to_phone") !=
        std::string::npos);
  CHECK(error_text({{"colour", "red"}}).find("colour: unknown field") != std::string::npos);
  CHECK(error_text({{"mitm", {{"enabeld", true}}}}).find("mitm.enabeld") != std::string::npos);
  CHECK(error_text({{"duration_ms", "long"}}).find("duration_ms") != std::string::npos);
  CHECK(error_text({{"pairing_mode", "Classic"}}).find("pairing_mode") != std::string::npos);
  CHECK(error_text({{"mitm", {{"rules", {{{"match_uuid", "0x2a38"}, {"transform", {{"kind", "HrOverride"}, {"bpm", 255}}}}}}}}})
            .find("mitm.rules[0]") != std::string::npos);
  // Empirical mode only knows the measured distances.
  CHECK(error_text({{"distances", {{"sensor_to_phone", 2.0}}}}).find("distances.sensor_to_phone") !=
        std::string::npos);
  CHECK_NOTHROW(config_from_json({{"distances", {{"sensor_to_phone", 2.0}}}, {"path_loss", {{"n", 2.0}}}}));
  CHECK(error_text({{"path_loss", {{"n", 2.0}}}, {"distances", {{"attacker_to_phone", 0.05}}}})
            .find("distances.attacker_to_phone") != std::string::npos);
  CHECK(error_text({{"mitm", {{"start_ms", 60'000}}}}).find("mitm.start_ms") != std::string::npos);
  CHECK(error_text({{"detector", {{"w", 0}}}}).find("detector") != std::string::npos);
  CHECK(error_text(json::array()).find("config") != std::string::npos);
  CHECK(code_of([] { load_config("/nonexistent/blelab.json"); }) == ErrorCode::kIo);
}

TEST_CASE("config hash") {
  // FNV-1a 64 reference vectors.
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);

  ScenarioConfig a, b;
  b.seed = 99;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.mitm.enabled = true;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("scenario facts") {
  const auto f = scenario_facts(ScenarioConfig{});
  CHECK(f.pairing_mode == pairing::PairingMode::kLegacyLE);
  CHECK(f.association == pairing::AssociationMethod{pairing::Method::kJustWorks, false});
  CHECK(f.always_discoverable);
  CHECK_FALSE(f.user_auth);
}

TEST_CASE("run: 255 bpm override") {
  const auto c = poc_config();
  const auto res = run(c, scratch("poc"));
  REQUIRE(res.attack_started == c.mitm.start_ms);

  std::size_t before = 0, during = 0;
  for (const auto& r : res.readings) {
    if (r.time_ms < c.mitm.start_ms) {
      CHECK(r.bpm == 70);
      CHECK(r.source == kSensorId);
      ++before;
    } else {
      CHECK(r.bpm == 255);
      CHECK(r.source == "eve-proxy");
      ++during;
    }
  }
  CHECK(before >= 25);
  CHECK(during >= 25);
  for (auto bpm : res.emitted_bpm) CHECK(bpm == 70);
  CHECK(res.emitted_bpm.size() >= 58);

  REQUIRE(fs::exists(res.events_path));
  REQUIRE(fs::exists(res.journal_path));
  REQUIRE(fs::exists(res.summary_path));
  CHECK(res.out_dir.filename() == config_hash(c) + "-s1");
  std::ifstream jl(res.journal_path);
  std::size_t lines = 0;
  for (std::string line; std::getline(jl, line); ++lines) {
    const auto e = json::parse(line);
    CHECK(e["before_hex"] == "0046");
    CHECK(e["after_hex"] == "00ff");
    CHECK(e["decision"] == "auto");
    CHECK(e["direction"] == "toCentral");
  }
  CHECK(lines == during);

  // All three links use legacy Just Works, so a passive listener reads
  // every one of them.
  REQUIRE(res.sniffed.size() == 3);
  for (const auto& s : res.sniffed) {
    REQUIRE(s.transcript.has_value());
    CHECK(s.transcript->method.method == pairing::Method::kJustWorks);
    CHECK(s.key.has_value());
    CHECK(s.decrypted == s.att_frames);
  }
  for (auto bpm : res.sniffed[0].heart_rates) CHECK(bpm == 70);
  for (auto bpm : res.sniffed[1].heart_rates) CHECK(bpm == 255);
  for (auto bpm : res.sniffed[2].heart_rates) CHECK(bpm == 70);
  CHECK(res.sniffed[1].heart_rates.size() == during);

  const auto summary = json::parse(slurp(res.summary_path));
  CHECK(summary["attack_started_ms"] == 30'000);
  CHECK(summary["eavesdrop"][0]["key_recovered"] == true);
}

TEST_CASE("run: identical config and seed give identical bytes") {
  const auto c = poc_config();
  const auto a = run(c, scratch("det_a"));
  const auto b = run(c, scratch("det_b"));
  CHECK(slurp(a.events_path) == slurp(b.events_path));
  CHECK(slurp(a.journal_path) == slurp(b.journal_path));
  CHECK(slurp(a.summary_path) == slurp(b.summary_path));
  CHECK_FALSE(slurp(a.events_path).empty());

  auto other = c;
  other.seed = 2;
  const auto d = run(other, scratch("det_c"));
  CHECK(slurp(a.events_path) != slurp(d.events_path));
}

TEST_CASE("run: no attacker, no alerts") {
  ScenarioConfig c;
  const auto res = run(c, scratch("clean"));
  CHECK(res.alerts.empty());
  CHECK_FALSE(res.attack_started.has_value());
  CHECK(slurp(res.journal_path).empty());
  REQUIRE(res.sniffed.size() == 1);
  for (const auto& r : res.readings) CHECK(r.source == kSensorId);
  CHECK(res.readings.size() >= 55);
}

TEST_CASE("run: secure connections defeats the passive listener") {
  ScenarioConfig c;
  c.pairing_mode = pairing::PairingMode::kSecureConnections;
  const auto res = run(c, scratch("sc"));
  REQUIRE(res.sniffed.size() == 1);
  const auto& s = res.sniffed[0];
  REQUIRE(s.transcript.has_value());
  CHECK(s.transcript->public_values.has_value());
  CHECK_FALSE(s.key.has_value());
  CHECK(s.decrypted == 0);
  CHECK(s.att_frames > 50);
  CHECK(res.readings.size() >= 55);
}

TEST_CASE("run: legacy passkey falls to the passkey search") {
  ScenarioConfig c;
  c.duration_ms = 10'000;
  c.mitm.start_ms = 5'000;
  c.responder_io = pairing::IoCapability::kDisplayOnly;
  const auto res = run(c, scratch("passkey"));
  const auto& s = res.sniffed[0];
  REQUIRE(s.transcript.has_value());
  CHECK(s.transcript->method == pairing::AssociationMethod{pairing::Method::kPasskey, true});
  CHECK(s.key.has_value());
  CHECK(s.decrypted == s.att_frames);
  CHECK_FALSE(s.heart_rates.empty());
}

TEST_CASE("montecarlo plumbing") {
  ScenarioConfig c;
  const auto one = montecarlo_metrics(c, 1, 7);
  CHECK(one.runs == 1);
  CHECK((*one.tpr == 0.0 || *one.tpr == 1.0));
  CHECK((*one.fpr == 0.0 || *one.fpr == 1.0));
  CHECK(code_of([&] { montecarlo_metrics(c, 0, 1); }) == ErrorCode::kInvalidArgument);

  CHECK(montecarlo_metrics(c, 40, 100) == montecarlo_metrics_serial(c, 40, 100));

  const auto a = montecarlo(c, 20, 5, scratch("mc_a"));
  const auto b = montecarlo(c, 20, 5, scratch("mc_b"));
  CHECK(slurp(a.csv_path) == slurp(b.csv_path));
  CHECK(slurp(a.csv_path).rfind("runs,tpr,fpr,mean_ttd_ms,z,w,k\n20,", 0) == 0);

  // Per seed, the attack run and the clean run share the channel seed.
  const auto o = run_pair(c, 3);
  CHECK(o.attack_ran);
  CHECK(o.clean_ran);
  CHECK(o.clean_windows > 30);
}

TEST_CASE("montecarlo: detection rate and per-window false alerts") {
  ScenarioConfig c;
  const auto m = montecarlo_metrics(c, 1000, 1);
  CHECK(*m.tpr >= 0.99);
  // Detection lands within a few samples of the takeover.
  CHECK(*m.mean_ttd_ms < 5'000);
  // With a baseline fitted from k samples the window statistic follows a
  // Student t tail: P(T_{k-1} > z / sqrt(1 + w/k)) = 0.00735 for the
  // defaults. Allow 25% for the run-to-run correlation.
  const double rate = *m.per_window_false_alert_rate();
  MESSAGE("per-window false-alert rate " << rate << ", per-run FPR " << *m.fpr);
  CHECK(rate == doctest::Approx(0.00735).epsilon(0.25));
}

TEST_CASE("montecarlo_fpr_example") {
  // Per-run FPR counts any alert in a clean run of ~38 evaluated windows.
  ScenarioConfig c;
  const auto m = montecarlo_metrics(c, 1000, 1);
  MESSAGE("per-run FPR " << *m.fpr << " over " << m.clean_windows << " clean windows");
  CHECK(*m.tpr >= 0.99);
  CHECK(*m.fpr <= 0.01);
}

TEST_CASE("assess") {
  ScenarioConfig c;
  const auto res = assess(c, scratch("assess"));
  REQUIRE(res.findings.size() == 5);
  const risk::Risk expect[] = {risk::Risk::kCritical, risk::Risk::kCritical, risk::Risk::kHigh, risk::Risk::kMedium,
                               risk::Risk::kHigh};
  for (int i = 0; i < 5; ++i) CHECK(res.findings[i].risk == expect[i]);
  CHECK(slurp(res.text_path) == slurp(std::string(BLELAB_GOLDEN_DIR) + "/report_default.txt"));
  CHECK(slurp(res.json_path) == slurp(std::string(BLELAB_GOLDEN_DIR) + "/report_default.json"));

  const auto again = assess(c, scratch("assess2"));
  CHECK(slurp(again.text_path) == slurp(res.text_path));

  auto sc = c;
  sc.pairing_mode = pairing::PairingMode::kSecureConnections;
  sc.responder_io = pairing::IoCapability::kDisplayOnly;
  const auto s = assess(sc, scratch("assess_sc"));
  std::vector<int> ids;
  for (const auto& f : s.findings) ids.push_back(f.id);
  CHECK(ids == std::vector<int>{3, 4, 5});
}

TEST_CASE("control session commands") {
  ScenarioConfig c;
  c.duration_ms = 120'000;
  control::ControlSession cs(c);
  std::vector<json> out;
  cs.sink = [&](const nlohmann::ordered_json& m) { out.push_back(json::parse(m.dump())); };
  cs.start();
  cs.run_until(25'000);

  auto devices = cs.handle({{"type", "list_devices"}});
  REQUIRE(devices["type"] == "devices");
  std::map<std::string, json> by_id;
  for (const auto& d : devices["devices"]) by_id[d["id"].get<std::string>()] = d;
  CHECK(by_id.size() == 4);
  CHECK(by_id["sensor"]["name"] == actors::kSensorName);
  CHECK(by_id["sensor"]["connected_to"] == "phone");
  CHECK(by_id["eve-proxy"]["fake"] == true);
  CHECK(by_id["eve-proxy"]["name"].is_null());
  CHECK(by_id["phone"]["role"] == "Central");

  CHECK(cs.handle({{"type", "start_mitm"}, {"target", "fridge"}})["code"] == "UnknownDevice");
  CHECK(cs.handle({{"type", "decision"}, {"op_id", 1}, {"action", "forward"}})["code"] == "NotHeld");
  CHECK(cs.handle({{"type", "warp"}})["type"] == "error");
  CHECK(cs.handle(json::array())["code"] == "InvalidArgument");
  CHECK(cs.handle({{"type", "set_manual"}, {"on", "yes"}})["code"] == "InvalidArgument");
  const auto ack = cs.handle({{"type", "set_manual"}, {"on", true}, {"id", 7}});
  CHECK(ack["type"] == "ack");
  CHECK(ack["id"] == 7);

  CHECK(cs.handle({{"type", "start_mitm"}, {"target", actors::kSensorName}})["type"] == "ack");
  CHECK(cs.handle({{"type", "start_mitm"}})["code"] == "InvalidState");
  cs.run_until(35'000);

  const auto status = cs.handle({{"type", "get_status"}});
  CHECK(status["session"] == "Active");
  CHECK(status["manual"] == true);
  // No rules and manual mode: every op is held.
  const auto held = status["held"].get<std::vector<std::uint64_t>>();
  REQUIRE(held.size() >= 3);

  CHECK(cs.handle({{"type", "decision"}, {"op_id", held[0]}, {"action", "drop"}})["type"] == "ack");
  CHECK(cs.handle({{"type", "decision"}, {"op_id", held[0]}, {"action", "drop"}})["code"] == "NotHeld");
  CHECK(cs.handle({{"type", "decision"}, {"op_id", held[1]}, {"action", "modify"}, {"bytes_hex", "00b4"}})["type"] ==
        "ack");
  CHECK(cs.handle({{"type", "decision"}, {"op_id", held[2]}, {"action", "forward"}})["type"] == "ack");
  CHECK(cs.handle({{"type", "replay"}, {"op_id", held[0]}})["code"] == "InvalidState");
  CHECK(cs.handle({{"type", "replay"}, {"op_id", 9999}})["code"] == "UnknownOpId");
  CHECK(cs.handle({{"type", "replay"}, {"op_id", held[1]}})["type"] == "ack");
  cs.run_until(36'000);
  bool saw_180 = false;
  for (const auto& r : cs.sim().phone().readings()) saw_180 |= r.bpm == 180;
  CHECK(saw_180);

  // Nobody decides the rest: each is released unchanged after the timeout.
  const auto pending = cs.handle({{"type", "get_status"}})["held"].get<std::vector<std::uint64_t>>();
  REQUIRE_FALSE(pending.empty());
  cs.run_until(36'000 + c.mitm.hold_timeout_ms + 1'000);
  const auto journal = cs.handle({{"type", "get_journal"}});
  std::map<std::uint64_t, json> entries;
  for (const auto& e : journal["entries"]) entries[e["op_id"].get<std::uint64_t>()] = e;
  CHECK(entries[held[0]]["decision"] == "manual-drop");
  CHECK(entries[held[0]]["after_hex"] == "");
  CHECK(entries[held[1]]["decision"] == "manual-modify");
  CHECK(entries[held[2]]["decision"] == "manual-forward");
  for (auto id : pending) {
    CHECK(entries[id]["decision"] == "timeout-forward");
    CHECK(entries[id]["after_hex"] == entries[id]["before_hex"]);
  }

  CHECK(cs.handle({{"type", "stop_mitm"}})["type"] == "ack");
  CHECK(cs.handle({{"type", "get_status"}})["session"] == "Stopped");

  std::vector<std::string> states;
  std::size_t ops = 0;
  for (const auto& m : out) {
    if (m["type"] == "session") states.push_back(m["state"]);
    if (m["type"] == "op") ++ops;
  }
  CHECK(states == std::vector<std::string>{"Cloning", "Ready", "Active", "Stopped"});
  CHECK(ops > held.size());
}

TEST_CASE("control server over HTTP") {
  ScenarioConfig c;
  c.duration_ms = 600'000;
  c.detector.k = 5;
  control::ControlServer server(c, {"127.0.0.1", 0, 20.0});
  const int port = server.listen();
  REQUIRE(port > 0);
  std::thread loop([&] { server.run(); });

  // A second server on the same port must not start.
  control::ControlServer clash(c, {"127.0.0.1", port, 1.0});
  CHECK(code_of([&] { clash.listen(); }) == ErrorCode::kPortUnavailable);

  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(std::chrono::seconds(10));
  auto post = [&](const json& cmd) {
    auto r = cli.Post("/api/command", cmd.dump(), "application/json");
    REQUIRE(r);
    return json::parse(r->body);
  };
  auto get = [&](const std::string& path) {
    auto r = cli.Get(path);
    REQUIRE(r);
    return json::parse(r->body);
  };
  auto wait_for = [&](auto pred) {
    for (int i = 0; i < 400; ++i) {
      if (pred()) return true;
      std::this_thread::sleep_for(std::chrono::milliseconds(25));
    }
    return false;
  };

  const auto devices = get("/api/devices");
  REQUIRE(devices["devices"].size() == 4);
  bool fake_listed = false;
  for (const auto& d : devices["devices"]) fake_listed |= d["fake"] == true;
  CHECK(fake_listed);

  auto bad = cli.Post("/api/command", "{not json", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);

  REQUIRE(wait_for([&] { return get("/api/status")["time_ms"].get<SimTime>() > 3'000; }));
  CHECK(post({{"type", "set_manual"}, {"on", true}})["type"] == "ack");
  CHECK(post({{"type", "start_mitm"}, {"target", "sensor"}})["type"] == "ack");
  REQUIRE(wait_for([&] { return !get("/api/status")["held"].empty(); }));
  const auto id = get("/api/status")["held"][0].get<std::uint64_t>();
  const auto reply = post({{"type", "decision"}, {"op_id", id}, {"action", "forward"}});
  CHECK(reply["type"] == "ack");
  bool recorded = false;
  const auto jr = get("/api/journal");
  INFO("journal: " << jr.dump() << " op " << id);
  for (const auto& e : jr["entries"]) {
    if (e["op_id"] == id) recorded = e["decision"] == "manual-forward";
  }
  CHECK(recorded);

  // The event stream replays history from the start.
  std::string buffer;
  httplib::Client sse("127.0.0.1", port);
  sse.set_read_timeout(std::chrono::seconds(10));
  sse.Get("/api/events", [&](const char* data, std::size_t len) {
    buffer.append(data, len);
    return buffer.find("\"command\":\"decision\"") == std::string::npos;
  });
  CHECK(buffer.rfind("id: 1\ndata: {\"type\":\"status\"", 0) == 0);
  CHECK(buffer.find("\"type\":\"devices\"") != std::string::npos);
  CHECK(buffer.find("\"state\":\"Active\"") != std::string::npos);
  CHECK(buffer.find("\"held\":true") != std::string::npos);

  server.stop();
  loop.join();
  CHECK(server.events_published() > 10);
}
