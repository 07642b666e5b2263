#include "blelab/control.hpp"

#include <chrono>

#include <httplib.h>
#include <sys/socket.h>

namespace blelab::control {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json error_reply(const std::string& command, ErrorCode code, const std::string& message) {
  ordered_json j;
  j["type"] = "error";
  j["command"] = command;
  j["code"] = to_string(code);
  j["message"] = message;
  return j;
}

std::uint64_t op_id_of(const json& c) {
  auto it = c.find("op_id");
  if (it == c.end() || !it->is_number_integer() || it->get<std::int64_t>() < 0) {
    throw Error(ErrorCode::kInvalidArgument, "op_id must be a non-negative integer");
  }
  return it->get<std::uint64_t>();
}

mitm::MitmAttacker& attacker_of(harness::Simulation& sim) {
  auto* a = sim.attacker();
  if (!a) throw Error(ErrorCode::kInvalidState, "no attacker in this scenario");
  return *a;
}

}  // namespace

ControlSession::ControlSession(const harness::ScenarioConfig& config)
    : sim_(config, {.logging = false, .with_attacker = true}) {
  auto& phone = sim_.phone();
  phone.reading_hook = [this](const actors::HrReading& r) {
    emit({{"type", "reading"}, {"time_ms", r.time_ms}, {"bpm", r.bpm}, {"source", r.source}});
  };
  phone.rssi_hook = [this](const actors::RssiSample& s) {
    emit({{"type", "rssi"}, {"time_ms", s.time_ms}, {"dbm", s.dbm}, {"peer", s.peer}});
  };
  phone.alert_hook = [this](const detection::Alert& a) {
    emit({{"type", "alert"}, {"time_ms", a.time_ms}, {"kind", detection::to_string(a.kind)}, {"score", a.score}});
  };
  auto& eve = *sim_.attacker();
  eve.journal_hook = [this](const mitm::OpLogEntry& e) {
    ordered_json j;
    j["type"] = "op";
    j["held"] = e.held();
    const auto line = ordered_json::parse(mitm::to_json_line(e));
    for (const auto& [k, v] : line.items()) j[k] = v;
    emit(std::move(j));
  };
  eve.state_hook = [this](mitm::SessionState s) {
    emit({{"type", "session"}, {"time_ms", now()}, {"state", mitm::to_string(s)}});
    if (s == mitm::SessionState::kActive || s == mitm::SessionState::kStopped) emit(devices());
  };
}

void ControlSession::start() {
  sim_.start();
  emit(status());
  emit(devices());
}

void ControlSession::emit(ordered_json message) {
  if (sink) sink(message);
}

std::optional<SimTime> ControlSession::next_time() const {
  auto t = sim_.queue().next_time();
  if (!t || *t > sim_.config().duration_ms) return std::nullopt;
  return t;
}

bool ControlSession::finished() const { return !next_time().has_value(); }

bool ControlSession::step() {
  if (finished()) return false;
  return sim_.queue().step();
}

void ControlSession::run_until(SimTime t) {
  sim_.queue().run_until(std::min(t, sim_.config().duration_ms));
}

ordered_json ControlSession::devices() {
  auto& radio = sim_.radio();
  auto* eve = sim_.attacker();
  ordered_json list = ordered_json::array();
  for (const auto& d : radio.devices()) {
    ordered_json j;
    j["id"] = d.id;
    j["address"] = d.address;
    j["role"] = radio::to_string(d.role);
    std::optional<std::string> name;
    if (d.id == harness::kSensorId) name = actors::adv_name(sim_.sensor().adv_data());
    if (eve && d.id == eve->config().proxy_id && eve->session() &&
        eve->session()->state() != mitm::SessionState::kCloning) {
      name = actors::adv_name(eve->proxy().adv_data());
    }
    j["name"] = name ? ordered_json(*name) : ordered_json();
    j["fake"] = eve && d.id == eve->config().proxy_id;
    const bool advertiser = d.role == radio::GapRole::kPeripheral || d.role == radio::GapRole::kBroadcaster;
    j["advertising"] = advertiser && radio.is_advertising(d.id);
    auto conn = radio.connection_of(d.id);
    j["connected_to"] = conn ? ordered_json(radio.peer_of(*conn, d.id)) : ordered_json();
    list.push_back(j);
  }
  return {{"type", "devices"}, {"time_ms", now()}, {"devices", list}};
}

ordered_json ControlSession::status() {
  ordered_json j;
  j["type"] = "status";
  j["time_ms"] = now();
  j["duration_ms"] = sim_.config().duration_ms;
  j["finished"] = finished();
  auto* eve = sim_.attacker();
  const bool has_session = eve && eve->session();
  j["session"] = has_session ? ordered_json(mitm::to_string(eve->session()->state())) : ordered_json();
  j["manual"] = has_session ? eve->session()->manual() : eve && eve->config().manual;
  j["held"] = has_session ? ordered_json(eve->session()->held_ids()) : ordered_json::array();
  return j;
}

ordered_json ControlSession::handle(const json& command) {
  std::string type = "?";
  ordered_json reply;
  try {
    if (!command.is_object()) throw Error(ErrorCode::kInvalidArgument, "command must be a JSON object");
    auto it = command.find("type");
    if (it == command.end() || !it->is_string()) throw Error(ErrorCode::kInvalidArgument, "type required");
    type = it->get<std::string>();
    reply = dispatch(type, command);
  } catch (const Error& e) {
    reply = error_reply(type, e.code(), e.what());
  } catch (const json::exception& e) {
    reply = error_reply(type, ErrorCode::kInvalidArgument, e.what());
  }
  if (command.is_object() && command.contains("id")) reply["id"] = command["id"];
  emit(reply);
  return reply;
}

ordered_json ControlSession::dispatch(const std::string& type, const json& c) {
  ordered_json ack = {{"type", "ack"}, {"command", type}, {"time_ms", now()}};
  if (type == "list_devices") return devices();
  if (type == "get_status") return status();
  if (type == "get_journal") {
    ordered_json entries = ordered_json::array();
    auto* eve = sim_.attacker();
    if (eve && eve->session()) {
      for (const auto& e : eve->session()->journal()) entries.push_back(ordered_json::parse(mitm::to_json_line(e)));
    }
    return {{"type", "journal"}, {"time_ms", now()}, {"entries", entries}};
  }
  if (type == "start_mitm") {
    const auto target = c.value("target", std::string(harness::kSensorId));
    if (target != harness::kSensorId && actors::adv_name(sim_.sensor().adv_data()) != target) {
      throw Error(ErrorCode::kUnknownDevice, "no interceptable device '" + target + "'");
    }
    sim_.launch_attack();
    return ack;
  }
  auto& eve = attacker_of(sim_);
  if (type == "stop_mitm") {
    if (!eve.session()) throw Error(ErrorCode::kInvalidState, "no interception session");
    eve.stop();
    return ack;
  }
  if (type == "set_rules") {
    auto it = c.find("rules");
    if (it == c.end() || !it->is_array()) throw Error(ErrorCode::kInvalidArgument, "rules array required");
    std::vector<mitm::ModificationRule> rules;
    for (const auto& r : *it) rules.push_back(mitm::rule_from_json(r));
    eve.set_rules(std::move(rules));
    return ack;
  }
  if (type == "set_manual") {
    auto it = c.find("on");
    if (it == c.end() || !it->is_boolean()) throw Error(ErrorCode::kInvalidArgument, "on must be true or false");
    eve.set_manual(it->get<bool>());
    return ack;
  }
  if (type == "decision") {
    const auto id = op_id_of(c);
    const auto action = c.value("action", std::string());
    mitm::OperatorDecision d;
    if (action == "forward") {
      d = mitm::OperatorDecision::forward();
    } else if (action == "modify") {
      d = mitm::OperatorDecision::modify(from_hex(c.value("bytes_hex", std::string())));
    } else if (action == "drop") {
      d = mitm::OperatorDecision::drop();
    } else {
      throw Error(ErrorCode::kInvalidArgument, "action must be forward, modify or drop");
    }
    eve.decide(id, d);
    ack["op_id"] = id;
    return ack;
  }
  if (type == "replay") {
    const auto id = op_id_of(c);
    eve.replay(id);
    ack["op_id"] = id;
    return ack;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown command '" + type + "'");
}

struct ControlServer::Http {
  httplib::Server server;
};

ControlServer::ControlServer(const harness::ScenarioConfig& config, ServeOptions options)
    : options_(std::move(options)), session_(config), http_(std::make_unique<Http>()) {
  if (options_.time_scale < 0) throw Error(ErrorCode::kInvalidArgument, "time scale must be >= 0");
  session_.sink = [this](const ordered_json& m) { publish(m); };

  auto& svr = http_->server;
  // Plain SO_REUSEADDR: a second server on a busy port must fail.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  auto send_json = [](httplib::Response& res, const ordered_json& j) {
    res.status = j.value("type", "") == "error" ? 400 : 200;
    res.set_content(j.dump(), "application/json");
  };
  svr.Post("/api/command", [this, send_json](const httplib::Request& req, httplib::Response& res) {
    json command;
    try {
      command = json::parse(req.body);
    } catch (const json::parse_error& e) {
      send_json(res, error_reply("?", ErrorCode::kInvalidArgument, e.what()));
      return;
    }
    send_json(res, submit(std::move(command)));
  });
  svr.Get("/api/devices", [this, send_json](const httplib::Request&, httplib::Response& res) {
    send_json(res, submit({{"type", "list_devices"}}));
  });
  svr.Get("/api/journal", [this, send_json](const httplib::Request&, httplib::Response& res) {
    send_json(res, submit({{"type", "get_journal"}}));
  });
  svr.Get("/api/status", [this, send_json](const httplib::Request&, httplib::Response& res) {
    send_json(res, submit({{"type", "get_status"}}));
  });
  svr.Get("/api/events", [this](const httplib::Request& req, httplib::Response& res) {
    std::size_t cursor = 0;
    const auto last = req.get_header_value("Last-Event-ID");
    const auto since = req.has_param("since") ? req.get_param_value("since") : last;
    if (!since.empty()) {
      try {
        cursor = std::stoull(since);
      } catch (const std::exception&) {
        cursor = 0;
      }
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [this, cursor](std::size_t, httplib::DataSink& sink) mutable {
      std::unique_lock lock(events_mu_);
      events_cv_.wait_for(lock, std::chrono::seconds(1),
                          [&] { return stopping_.load() || events_.size() > cursor; });
      if (stopping_) {
        lock.unlock();
        sink.done();
        return true;
      }
      std::string chunk;
      while (cursor < events_.size()) {
        chunk += "id: " + std::to_string(cursor + 1) + "\ndata: " + events_[cursor] + "\n\n";
        ++cursor;
      }
      lock.unlock();
      if (chunk.empty()) chunk = ": keep-alive\n\n";
      return sink.write(chunk.data(), chunk.size());
    });
  });
}

ControlServer::~ControlServer() { stop(); }

int ControlServer::listen() {
  auto& svr = http_->server;
  if (options_.port == 0) {
    port_ = svr.bind_to_any_port(options_.host);
    if (port_ < 0) throw Error(ErrorCode::kPortUnavailable, "cannot bind " + options_.host);
  } else {
    if (!svr.bind_to_port(options_.host, options_.port)) {
      throw Error(ErrorCode::kPortUnavailable,
                  "cannot bind " + options_.host + ":" + std::to_string(options_.port));
    }
    port_ = options_.port;
  }
  http_thread_ = std::thread([this] { http_->server.listen_after_bind(); });
  return port_;
}

void ControlServer::publish(const ordered_json& message) {
  {
    std::lock_guard lock(events_mu_);
    events_.push_back(message.dump());
  }
  events_cv_.notify_all();
}

std::size_t ControlServer::events_published() const {
  std::lock_guard lock(events_mu_);
  return events_.size();
}

ordered_json ControlServer::submit(json command) {
  std::unique_lock lock(mu_);
  if (!loop_running_) return session_.handle(command);
  Pending p{std::move(command), {}};
  auto reply = p.reply.get_future();
  pending_.push_back(std::move(p));
  lock.unlock();
  loop_cv_.notify_all();
  if (reply.wait_for(std::chrono::seconds(10)) != std::future_status::ready) {
    return error_reply("?", ErrorCode::kTimeout, "simulation loop did not answer");
  }
  return reply.get();
}

void ControlServer::drain() {
  std::unique_lock lock(mu_);
  while (!pending_.empty()) {
    auto p = std::move(pending_.front());
    pending_.pop_front();
    lock.unlock();
    p.reply.set_value(session_.handle(p.command));
    lock.lock();
  }
}

void ControlServer::run() {
  using Clock = std::chrono::steady_clock;
  {
    std::lock_guard lock(mu_);
    session_.start();
    loop_running_ = true;
  }
  const auto wall0 = Clock::now();
  const SimTime virt0 = session_.now();
  auto has_work = [this] { return stopping_.load() || !pending_.empty(); };

  while (!stopping_) {
    drain();
    const auto next = session_.next_time();
    std::unique_lock lock(mu_);
    if (!next) {
      loop_cv_.wait_for(lock, std::chrono::milliseconds(200), has_work);
      continue;
    }
    if (options_.time_scale > 0) {
      const auto due = wall0 + std::chrono::duration_cast<Clock::duration>(
                                   std::chrono::duration<double, std::milli>((*next - virt0) / options_.time_scale));
      if (loop_cv_.wait_until(lock, due, has_work)) continue;
    }
    lock.unlock();
    session_.step();
  }
  std::unique_lock lock(mu_);
  loop_running_ = false;
  // Anything queued after the last drain is answered inline.
  while (!pending_.empty()) {
    auto p = std::move(pending_.front());
    pending_.pop_front();
    p.reply.set_value(session_.handle(p.command));
  }
}

void ControlServer::stop() {
  if (stopping_.exchange(true)) return;
  loop_cv_.notify_all();
  events_cv_.notify_all();
  if (http_thread_.joinable()) {
    http_->server.stop();
    http_thread_.join();
  }
}

}  // namespace blelab::control
