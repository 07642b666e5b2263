#include "blelab/harness.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace blelab::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void invalid(const std::string& path, const std::string& msg) {
  throw Error(ErrorCode::kConfigInvalid, path + ": " + msg);
}

// Walks one JSON object, remembering which keys were consumed so that
// leftovers can be reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) invalid(label(), "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void boolean(const std::string& key, bool& out) {
    if (auto* v = find(key)) {
      if (!v->is_boolean()) invalid(at(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  void number(const std::string& key, double& out) {
    if (auto* v = find(key)) {
      if (!v->is_number()) invalid(at(key), "expected a number");
      out = v->get<double>();
    }
  }

  void integer(const std::string& key, std::int64_t& out) {
    if (auto* v = find(key)) {
      if (!v->is_number_integer()) invalid(at(key), "expected an integer");
      out = v->get<std::int64_t>();
    }
  }

  void integer(const std::string& key, int& out) {
    std::int64_t v = out;
    integer(key, v);
    if (v < INT32_MIN || v > INT32_MAX) invalid(at(key), "out of range");
    out = static_cast<int>(v);
  }

  void unsigned_int(const std::string& key, unsigned& out) {
    std::int64_t v = out;
    integer(key, v);
    if (v < 0 || v > UINT32_MAX) invalid(at(key), "expected a non-negative integer");
    out = static_cast<unsigned>(v);
  }

  void u64(const std::string& key, std::uint64_t& out) {
    if (auto* v = find(key)) {
      if (!v->is_number_unsigned()) invalid(at(key), "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }

  template <class Parse>
  void enumeration(const std::string& key, Parse parse) {
    if (auto* v = find(key)) {
      if (!v->is_string()) invalid(at(key), "expected a string");
      try {
        parse(v->get<std::string>());
      } catch (const Error& e) {
        invalid(at(key), e.what());
      }
    }
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) invalid(at(k), "unknown field");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

radio::SignalModel signal_model(const ScenarioConfig& c) {
  radio::SignalModel m;
  if (c.path_loss) {
    m.mode = radio::SignalMode::kModel;
    m.params = *c.path_loss;
  } else {
    m.mode = radio::SignalMode::kEmpirical;
  }
  return m;
}

void require_positive(SimTime v, const char* path) {
  if (v <= 0) invalid(path, "must be > 0");
}

void require_non_negative(SimTime v, const char* path) {
  if (v < 0) invalid(path, "must be >= 0");
}

ordered_json alert_json(const detection::Alert& a) {
  ordered_json j;
  j["time_ms"] = a.time_ms;
  j["kind"] = detection::to_string(a.kind);
  j["score"] = a.score;
  return j;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  out.flush();
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

fs::path make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

std::string seed_dir(const ScenarioConfig& c) { return config_hash(c) + "-s" + std::to_string(c.seed); }

}  // namespace

void ScenarioConfig::validate() const {
  require_positive(duration_ms, "duration_ms");
  if (path_loss) {
    try {
      path_loss->validate();
    } catch (const Error& e) {
      invalid("path_loss", e.what());
    }
  }
  const auto model = signal_model(*this);
  const std::pair<const char*, double> distances[] = {
      {"distances.sensor_to_phone", sensor_to_phone_m},
      {"distances.attacker_to_phone", attacker_to_phone_m},
      {"distances.attacker_to_sensor", attacker_to_sensor_m},
  };
  for (const auto& [path, d] : distances) {
    try {
      model.validate_distance(d);
    } catch (const Error& e) {
      invalid(path, e.what());
    }
  }
  require_non_negative(one_way_latency_ms, "latency.one_way_ms");
  require_non_negative(proxy_processing_ms, "latency.proxy_processing_ms");
  require_non_negative(echo_processing_ms, "latency.echo_processing_ms");
  require_positive(advertising_interval_ms, "advertising_interval_ms");
  require_positive(notify_interval_ms, "notify_interval_ms");
  if (heart_rate.kind == HeartRateConfig::Kind::kConstant) {
    if (heart_rate.bpm > 0xFFFF) invalid("heart_rate.bpm", "must be <= 65535");
  } else {
    if (heart_rate.min > heart_rate.max) invalid("heart_rate.min", "must be <= heart_rate.max");
    if (heart_rate.max > 0xFFFF) invalid("heart_rate.max", "must be <= 65535");
  }
  if (rtt_probe_interval_ms) require_positive(*rtt_probe_interval_ms, "rtt_probe_interval_ms");
  require_non_negative(mitm.start_ms, "mitm.start_ms");
  if (mitm.start_ms >= duration_ms) invalid("mitm.start_ms", "must be before duration_ms");
  for (std::size_t i = 0; i < mitm.rules.size(); ++i) {
    try {
      mitm.rules[i].validate();
    } catch (const Error& e) {
      invalid("mitm.rules[" + std::to_string(i) + "]", e.what());
    }
  }
  require_positive(mitm.advertising_interval_ms, "mitm.advertising_interval_ms");
  require_positive(mitm.hold_timeout_ms, "mitm.hold_timeout_ms");
  require_non_negative(mitm.victim_reconnect_delay_ms, "mitm.victim_reconnect_delay_ms");
  try {
    detector.validate();
  } catch (const Error& e) {
    invalid("detector", e.what());
  }
}

ScenarioConfig config_from_json(const json& j) {
  ScenarioConfig c;
  Fields top(j, "");
  top.u64("seed", c.seed);
  top.integer("duration_ms", c.duration_ms);
  top.enumeration("pairing_mode", [&](const std::string& s) { c.pairing_mode = pairing::parse_pairing_mode(s); });
  top.enumeration("initiator_io", [&](const std::string& s) { c.initiator_io = pairing::parse_io_capability(s); });
  top.enumeration("responder_io", [&](const std::string& s) { c.responder_io = pairing::parse_io_capability(s); });
  top.boolean("oob_available", c.oob_available);

  if (auto* v = top.find("distances")) {
    Fields f(*v, "distances");
    f.number("sensor_to_phone", c.sensor_to_phone_m);
    f.number("attacker_to_phone", c.attacker_to_phone_m);
    f.number("attacker_to_sensor", c.attacker_to_sensor_m);
    f.finish();
  }
  if (auto* v = top.find("path_loss")) {
    if (v->is_string()) {
      if (v->get<std::string>() != "empirical") invalid("path_loss", "expected \"empirical\" or an object");
      c.path_loss.reset();
    } else {
      Fields f(*v, "path_loss");
      radio::PathLossParams p;
      f.number("n", p.exponent);
      f.number("a", p.ref_power_dbm);
      f.number("sigma", p.sigma_db);
      f.finish();
      c.path_loss = p;
    }
  }
  if (auto* v = top.find("latency")) {
    Fields f(*v, "latency");
    f.integer("one_way_ms", c.one_way_latency_ms);
    f.integer("proxy_processing_ms", c.proxy_processing_ms);
    f.integer("echo_processing_ms", c.echo_processing_ms);
    f.finish();
  }
  top.integer("advertising_interval_ms", c.advertising_interval_ms);
  top.integer("notify_interval_ms", c.notify_interval_ms);
  if (auto* v = top.find("heart_rate")) {
    Fields f(*v, "heart_rate");
    f.enumeration("kind", [&](const std::string& s) {
      if (s == "constant") {
        c.heart_rate.kind = HeartRateConfig::Kind::kConstant;
      } else if (s == "walk") {
        c.heart_rate.kind = HeartRateConfig::Kind::kWalk;
      } else {
        throw Error(ErrorCode::kInvalidArgument, "expected \"constant\" or \"walk\"");
      }
    });
    f.unsigned_int("bpm", c.heart_rate.bpm);
    if (f.find("seed")) {
      std::uint64_t s = 0;
      f.u64("seed", s);
      c.heart_rate.seed = s;
    }
    f.unsigned_int("min", c.heart_rate.min);
    f.unsigned_int("max", c.heart_rate.max);
    f.unsigned_int("step_max", c.heart_rate.step_max);
    f.finish();
  }
  top.boolean("supports_echo", c.supports_echo);
  if (auto* v = top.find("rtt_probe_interval_ms"); v && !v->is_null()) {
    SimTime t = 0;
    top.integer("rtt_probe_interval_ms", t);
    c.rtt_probe_interval_ms = t;
  }
  if (auto* v = top.find("mitm")) {
    Fields f(*v, "mitm");
    f.boolean("enabled", c.mitm.enabled);
    f.integer("start_ms", c.mitm.start_ms);
    if (auto* r = f.find("rules")) {
      if (!r->is_array()) invalid("mitm.rules", "expected an array");
      for (std::size_t i = 0; i < r->size(); ++i) {
        try {
          c.mitm.rules.push_back(mitm::rule_from_json((*r)[i]));
        } catch (const Error& e) {
          invalid("mitm.rules[" + std::to_string(i) + "]", e.what());
        }
      }
    }
    f.boolean("manual_mode", c.mitm.manual_mode);
    f.integer("advertising_interval_ms", c.mitm.advertising_interval_ms);
    f.integer("hold_timeout_ms", c.mitm.hold_timeout_ms);
    f.integer("victim_reconnect_delay_ms", c.mitm.victim_reconnect_delay_ms);
    f.finish();
  }
  if (auto* v = top.find("detector")) {
    Fields f(*v, "detector");
    f.integer("k", c.detector.k);
    f.integer("w", c.detector.w);
    f.number("z", c.detector.z);
    f.number("rho", c.detector.rho);
    f.boolean("clamp_sigma", c.detector.clamp_sigma);
    f.finish();
  }
  if (auto* v = top.find("assessment")) {
    Fields f(*v, "assessment");
    f.boolean("always_discoverable", c.assessment.always_discoverable);
    f.boolean("user_auth", c.assessment.user_auth);
    f.boolean("end_to_end_security", c.assessment.end_to_end_security);
    f.finish();
  }
  top.finish();
  c.validate();
  return c;
}

ScenarioConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

ordered_json to_json(const ScenarioConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["duration_ms"] = c.duration_ms;
  j["pairing_mode"] = pairing::to_string(c.pairing_mode);
  j["initiator_io"] = pairing::to_string(c.initiator_io);
  j["responder_io"] = pairing::to_string(c.responder_io);
  j["oob_available"] = c.oob_available;
  j["distances"] = {{"sensor_to_phone", c.sensor_to_phone_m},
                    {"attacker_to_phone", c.attacker_to_phone_m},
                    {"attacker_to_sensor", c.attacker_to_sensor_m}};
  if (c.path_loss) {
    j["path_loss"] = {{"n", c.path_loss->exponent}, {"a", c.path_loss->ref_power_dbm}, {"sigma", c.path_loss->sigma_db}};
  } else {
    j["path_loss"] = "empirical";
  }
  j["latency"] = {{"one_way_ms", c.one_way_latency_ms},
                  {"proxy_processing_ms", c.proxy_processing_ms},
                  {"echo_processing_ms", c.echo_processing_ms}};
  j["advertising_interval_ms"] = c.advertising_interval_ms;
  j["notify_interval_ms"] = c.notify_interval_ms;
  ordered_json hr;
  if (c.heart_rate.kind == HeartRateConfig::Kind::kConstant) {
    hr["kind"] = "constant";
    hr["bpm"] = c.heart_rate.bpm;
  } else {
    hr["kind"] = "walk";
    if (c.heart_rate.seed) hr["seed"] = *c.heart_rate.seed;
    hr["min"] = c.heart_rate.min;
    hr["max"] = c.heart_rate.max;
    hr["step_max"] = c.heart_rate.step_max;
  }
  j["heart_rate"] = hr;
  j["supports_echo"] = c.supports_echo;
  j["rtt_probe_interval_ms"] = c.rtt_probe_interval_ms ? ordered_json(*c.rtt_probe_interval_ms) : ordered_json();
  ordered_json m;
  m["enabled"] = c.mitm.enabled;
  m["start_ms"] = c.mitm.start_ms;
  m["rules"] = ordered_json::array();
  for (const auto& r : c.mitm.rules) m["rules"].push_back(mitm::to_json(r));
  m["manual_mode"] = c.mitm.manual_mode;
  m["advertising_interval_ms"] = c.mitm.advertising_interval_ms;
  m["hold_timeout_ms"] = c.mitm.hold_timeout_ms;
  m["victim_reconnect_delay_ms"] = c.mitm.victim_reconnect_delay_ms;
  j["mitm"] = m;
  j["detector"] = {{"k", c.detector.k},
                   {"w", c.detector.w},
                   {"z", c.detector.z},
                   {"rho", c.detector.rho},
                   {"clamp_sigma", c.detector.clamp_sigma}};
  j["assessment"] = {{"always_discoverable", c.assessment.always_discoverable},
                     {"user_auth", c.assessment.user_auth},
                     {"end_to_end_security", c.assessment.end_to_end_security}};
  return j;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const ScenarioConfig& c) {
  auto j = to_json(c);
  j.erase("seed");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(j.dump()));
  return buf;
}

risk::ScenarioFacts scenario_facts(const ScenarioConfig& c) {
  risk::ScenarioFacts f;
  f.pairing_mode = c.pairing_mode;
  f.association = pairing::select_association(c.initiator_io, c.responder_io, c.oob_available);
  f.always_discoverable = c.assessment.always_discoverable;
  f.user_auth = c.assessment.user_auth;
  f.end_to_end_security = c.assessment.end_to_end_security;
  return f;
}

Simulation::Simulation(const ScenarioConfig& config, SimulationOptions options)
    : config_(config), options_(options) {
  config_.validate();
  radio_ = std::make_unique<radio::Radio>(queue_, config_.seed);
  radio_->set_logging(options_.logging);

  const auto& hr = config_.heart_rate;
  auto source = hr.kind == HeartRateConfig::Kind::kConstant
                    ? actors::HeartRateSource::constant(hr.bpm)
                    : actors::HeartRateSource::seeded_walk(hr.seed.value_or(config_.seed), hr.min, hr.max,
                                                           hr.step_max);
  actors::SensorConfig sc;
  sc.id = kSensorId;
  sc.io = config_.responder_io;
  sc.adv_interval_ms = config_.advertising_interval_ms;
  sc.notify_interval_ms = config_.notify_interval_ms;
  sc.supports_echo = config_.supports_echo;
  sc.echo_processing_ms = config_.echo_processing_ms;
  sensor_ = std::make_unique<actors::HeartRateSensor>(*radio_, broker_, sc, std::move(source));

  actors::MobileAppConfig pc;
  pc.id = kPhoneId;
  pc.io = config_.initiator_io;
  pc.mode = config_.pairing_mode;
  pc.oob_available = config_.oob_available;
  pc.detector = config_.detector;
  pc.rtt_probe_interval_ms = config_.rtt_probe_interval_ms;
  pc.reconnect_delay_ms = config_.mitm.victim_reconnect_delay_ms;
  phone_ = std::make_unique<actors::MobileApp>(*radio_, broker_, pc);

  sensor_->register_device();
  phone_->register_device();

  mitm::AttackerConfig ac;
  if (config_.mitm.enabled || options_.with_attacker) {
    ac.proxy_adv_interval_ms = config_.mitm.advertising_interval_ms;
    ac.proxy_processing_ms = config_.proxy_processing_ms;
    ac.hold_timeout_ms = config_.mitm.hold_timeout_ms;
    ac.mode = config_.pairing_mode;
    ac.oob_available = config_.oob_available;
    ac.rules = config_.mitm.rules;
    ac.manual = config_.mitm.manual_mode;
    attacker_ = std::make_unique<mitm::MitmAttacker>(*radio_, broker_, ac);
    attacker_->register_devices(kSensorId);
  }

  const auto model = signal_model(config_);
  auto add = [&](const DeviceId& a, const DeviceId& b, double d) {
    radio::RadioLink l;
    l.a = a;
    l.b = b;
    l.distance_m = d;
    l.signal = model;
    l.one_way_latency_ms = config_.one_way_latency_ms;
    radio_->add_link(l);
  };
  add(kPhoneId, kSensorId, config_.sensor_to_phone_m);
  if (attacker_) {
    add(kPhoneId, ac.proxy_id, config_.attacker_to_phone_m);
    add(ac.core_id, kSensorId, config_.attacker_to_sensor_m);
  }
}

Simulation::~Simulation() = default;

void Simulation::start() {
  sensor_->start();
  phone_->start();
  if (attacker_) attacker_->start_observing();
  if (config_.mitm.enabled) {
    queue_.schedule_at(config_.mitm.start_ms, [this] { launch_attack(); });
  } else if (options_.clean_restart) {
    queue_.schedule_at(config_.mitm.start_ms, [this] { restart_victim(); });
  }
}

void Simulation::run_until(SimTime t) { queue_.run_until(t); }

void Simulation::launch_attack() {
  if (!attacker_) throw Error(ErrorCode::kInvalidState, "no attacker in this scenario");
  if (attacker_->session()) throw Error(ErrorCode::kInvalidState, "one interception session per scenario");
  attack_started_ = queue_.now();
  restart_victim();
  attacker_->launch(kPhoneId);
}

void Simulation::restart_victim() { sensor_->disconnect(); }

SniffResult sniff_link(const std::vector<radio::EventRecord>& log, const DeviceId& central,
                       const DeviceId& peripheral) {
  SniffResult out;
  out.central = central;
  out.peripheral = peripheral;
  auto on_link = [&](const radio::EventRecord& r) {
    return r.kind == radio::FrameKind::kData && !r.payload.empty() &&
           ((r.sender == central && r.receiver == peripheral) || (r.sender == peripheral && r.receiver == central));
  };

  std::optional<std::size_t> start;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& r = log[i];
    if (on_link(r) && r.sender == central && r.payload.size() >= 5 && r.payload[0] == actors::link::kCidSmp &&
        r.payload[1] == actors::link::kSmpPairingRequest) {
      start = i;
    }
  }
  if (!start) return out;

  const auto& req = log[*start].payload;
  std::optional<Bytes> rsp;
  std::optional<pairing::Key128> m_confirm, s_confirm, m_rand, s_rand;
  Bytes m_pub, s_pub;
  std::optional<std::size_t> paired_at;
  auto block = [](const Bytes& p) {
    pairing::Key128 k{};
    std::copy_n(p.begin() + 2, 16, k.begin());
    return k;
  };
  for (std::size_t i = *start + 1; i < log.size() && !paired_at; ++i) {
    const auto& r = log[i];
    if (!on_link(r) || r.payload[0] != actors::link::kCidSmp || r.payload.size() < 2) continue;
    const bool from_central = r.sender == central;
    const auto& p = r.payload;
    switch (p[1]) {
      case actors::link::kSmpPairingResponse:
        if (p.size() >= 5) rsp = p;
        break;
      case actors::link::kSmpPublicKey:
        (from_central ? m_pub : s_pub).assign(p.begin() + 2, p.end());
        break;
      case actors::link::kSmpConfirm:
        if (p.size() >= 18) (from_central ? m_confirm : s_confirm) = block(p);
        break;
      case actors::link::kSmpRandom:
        if (p.size() >= 18) (from_central ? m_rand : s_rand) = block(p);
        if (!from_central) paired_at = i;
        break;
      default:
        break;
    }
  }
  if (!rsp || !m_confirm || !s_confirm || !m_rand || !s_rand) return out;

  pairing::PairingTranscript t;
  t.mode = static_cast<pairing::PairingMode>(req[4]);
  t.method = pairing::select_association(static_cast<pairing::IoCapability>(req[2]),
                                         static_cast<pairing::IoCapability>((*rsp)[2]), req[3] != 0 && (*rsp)[3] != 0);
  t.m_confirm = *m_confirm;
  t.s_confirm = *s_confirm;
  t.m_rand = *m_rand;
  t.s_rand = *s_rand;
  if (!m_pub.empty() || !s_pub.empty()) {
    Bytes pub = m_pub;
    pub.insert(pub.end(), s_pub.begin(), s_pub.end());
    t.public_values = pub;
  }
  out.transcript = t;
  out.key = pairing::eavesdrop_recover(t);

  for (std::size_t i = *paired_at + 1; i < log.size(); ++i) {
    const auto& r = log[i];
    if (!on_link(r)) continue;
    if (r.payload[0] == actors::link::kCidSmp && r.payload.size() >= 2 &&
        r.payload[1] == actors::link::kSmpPairingRequest) {
      break;
    }
    if (r.payload[0] != actors::link::kCidAtt) continue;
    ++out.att_frames;
    if (!out.key) continue;
    const auto dir = r.sender == central ? pairing::LinkDirection::kCentralToPeripheral
                                         : pairing::LinkDirection::kPeripheralToCentral;
    try {
      const auto op = actors::link::open_att(*out.key, dir, r.payload);
      ++out.decrypted;
      if (op.kind == gatt::OpKind::kNotify && op.target == gatt::kHeartRateMeasurementUuid) {
        try {
          out.heart_rates.push_back(gatt::decode_hr_measurement(op.payload).bpm);
        } catch (const Error&) {
        }
      }
    } catch (const Error&) {
      // Wrong key or a later pairing on the same pair; not readable.
    }
  }
  return out;
}

namespace {

ordered_json sniff_json(const SniffResult& s) {
  ordered_json j;
  j["central"] = s.central;
  j["peripheral"] = s.peripheral;
  j["pairing_seen"] = s.transcript.has_value();
  if (s.transcript) {
    j["pairing_mode"] = pairing::to_string(s.transcript->mode);
    j["association_method"] = pairing::to_string(s.transcript->method.method);
  }
  j["key_recovered"] = s.key.has_value();
  if (s.key) j["session_key"] = pairing::key_hex(*s.key);
  j["att_frames"] = s.att_frames;
  j["decrypted"] = s.decrypted;
  j["heart_rates"] = s.heart_rates;
  return j;
}

}  // namespace

RunResult run(const ScenarioConfig& config, const fs::path& out_root) {
  Simulation sim(config);
  sim.start();
  sim.run();

  RunResult res;
  res.out_dir = make_dir(out_root / seed_dir(config));
  res.events_path = res.out_dir / "events.jsonl";
  res.journal_path = res.out_dir / "journal.jsonl";
  res.summary_path = res.out_dir / "summary.json";
  res.alerts = sim.alerts();
  res.readings = sim.phone().readings();
  for (const auto& e : sim.sensor().emitted()) res.emitted_bpm.push_back(e.bpm);
  res.attack_started = sim.attack_started();

  std::string events;
  for (const auto& r : sim.radio().log()) events += radio::to_json_line(r) + "\n";
  write_file(res.events_path, events);

  std::string journal;
  if (auto* a = sim.attacker(); a && a->session()) {
    for (const auto& e : a->session()->journal()) journal += mitm::to_json_line(e) + "\n";
  }
  write_file(res.journal_path, journal);

  res.sniffed.push_back(sniff_link(sim.radio().log(), kPhoneId, kSensorId));
  if (auto* a = sim.attacker()) {
    res.sniffed.push_back(sniff_link(sim.radio().log(), kPhoneId, a->config().proxy_id));
    res.sniffed.push_back(sniff_link(sim.radio().log(), a->config().core_id, kSensorId));
  }

  ordered_json s;
  s["config_hash"] = config_hash(config);
  s["seed"] = config.seed;
  s["duration_ms"] = config.duration_ms;
  s["attack_started_ms"] = res.attack_started ? ordered_json(*res.attack_started) : ordered_json();
  s["emitted"] = res.emitted_bpm.size();
  s["alerts"] = ordered_json::array();
  for (const auto& a : res.alerts) s["alerts"].push_back(alert_json(a));
  s["readings"] = ordered_json::array();
  for (const auto& r : res.readings) {
    s["readings"].push_back({{"time_ms", r.time_ms}, {"bpm", r.bpm}, {"source", r.source}});
  }
  s["eavesdrop"] = ordered_json::array();
  for (const auto& r : res.sniffed) s["eavesdrop"].push_back(sniff_json(r));
  write_file(res.summary_path, s.dump(2) + "\n");
  write_file(res.out_dir / "config.json", to_json(config).dump(2) + "\n");
  return res;
}

detection::RunOutcome run_pair(const ScenarioConfig& config, std::uint64_t seed) {
  detection::RunOutcome out;
  ScenarioConfig c = config;
  c.seed = seed;
  const SimTime start = c.mitm.start_ms;
  {
    c.mitm.enabled = true;
    Simulation sim(c, {.logging = false});
    sim.start();
    sim.run();
    out.attack_ran = true;
    for (const auto& a : sim.alerts()) {
      if (a.time_ms >= start) {
        out.attack_detected = true;
        out.time_to_detect_ms = a.time_ms - start;
        break;
      }
    }
  }
  {
    c.mitm.enabled = false;
    Simulation sim(c, {.logging = false, .clean_restart = true});
    sim.start();
    sim.run();
    out.clean_ran = true;
    out.clean_alerted = !sim.alerts().empty();
    out.clean_windows = sim.phone().detector().windows_evaluated();
    out.clean_window_alerts = sim.phone().detector().window_alerts();
  }
  return out;
}

detection::DetectionMetrics montecarlo_metrics(const ScenarioConfig& config, int runs, std::uint64_t seed_base) {
  config.validate();
  return detection::evaluate_runs(runs, seed_base, [&](std::uint64_t s) { return run_pair(config, s); });
}

detection::DetectionMetrics montecarlo_metrics_serial(const ScenarioConfig& config, int runs,
                                                      std::uint64_t seed_base) {
  config.validate();
  return detection::evaluate_runs_serial(runs, seed_base, [&](std::uint64_t s) { return run_pair(config, s); });
}

MonteCarloResult montecarlo(const ScenarioConfig& config, int runs, std::uint64_t seed_base,
                            const fs::path& out_root) {
  MonteCarloResult res;
  res.metrics = montecarlo_metrics(config, runs, seed_base);
  const auto dir =
      make_dir(out_root / (config_hash(config) + "-mc" + std::to_string(seed_base) + "x" + std::to_string(runs)));
  res.csv_path = dir / "metrics.csv";
  write_file(res.csv_path, detection::metrics_csv(res.metrics, config.detector));
  return res;
}

AssessResult assess(const ScenarioConfig& config, const fs::path& out_root) {
  config.validate();
  AssessResult res;
  const auto facts = scenario_facts(config);
  res.findings = risk::applicable_findings(facts);
  const auto dir = make_dir(out_root / seed_dir(config));
  res.json_path = dir / "report.json";
  res.text_path = dir / "report.txt";
  write_file(res.json_path, risk::render_json(res.findings, facts));
  write_file(res.text_path, risk::render_text(res.findings, facts));
  return res;
}

}  // namespace blelab::harness
