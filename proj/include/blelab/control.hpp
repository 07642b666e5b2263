#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "blelab/harness.hpp"

namespace blelab::control {

// Interactive scenario: the simulation plus the operator command protocol.
// Single-threaded; the server below drives it from one loop thread.
//
// Client -> server (one JSON object each, optional "id" echoed back):
//   {"type":"list_devices"}
//   {"type":"start_mitm","target":"sensor" | "<advertised name>"}
//   {"type":"stop_mitm"}
//   {"type":"set_rules","rules":[...]}
//   {"type":"set_manual","on":true}
//   {"type":"decision","op_id":N,"action":"forward"|"modify"|"drop"[,"bytes_hex":"..."]}
//   {"type":"replay","op_id":N}
//   {"type":"get_journal"}
// Server -> client: ack, error, devices, journal, op, reading, rssi, alert,
// session, status.
class ControlSession {
 public:
  explicit ControlSession(const harness::ScenarioConfig& config);

  // Receives every server -> client message, in order.
  std::function<void(const nlohmann::ordered_json&)> sink;

  void start();
  // Applies one command and returns the reply (also sent to the sink).
  nlohmann::ordered_json handle(const nlohmann::json& command);

  // Runs the next event if it is due within the scenario duration.
  bool step();
  std::optional<SimTime> next_time() const;
  SimTime now() { return sim_.queue().now(); }
  bool finished() const;
  void run_until(SimTime t);

  nlohmann::ordered_json devices();
  nlohmann::ordered_json status();
  harness::Simulation& sim() { return sim_; }

 private:
  nlohmann::ordered_json dispatch(const std::string& type, const nlohmann::json& c);
  void emit(nlohmann::ordered_json message);

  harness::Simulation sim_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  // 0 picks a free port.
  int port = 8080;
  // Virtual milliseconds per wall millisecond; 0 runs unpaced.
  double time_scale = 1.0;
};

// HTTP front end. GET /api/events is a server-sent event stream of every
// message (resumable with Last-Event-ID); POST /api/command takes one
// command object and answers with the reply; GET /api/devices, /api/journal
// and /api/status are shorthands for the matching commands.
class ControlServer {
 public:
  ControlServer(const harness::ScenarioConfig& config, ServeOptions options);
  ~ControlServer();

  ControlServer(const ControlServer&) = delete;
  ControlServer& operator=(const ControlServer&) = delete;

  // Binds and starts serving. Throws kPortUnavailable. Returns the port.
  int listen();
  // Runs the scenario on this thread, then keeps answering commands until
  // stop(). Held operations still time out without any client attached.
  void run();
  void stop();

  int port() const { return port_; }
  std::size_t events_published() const;

 private:
  struct Pending {
    nlohmann::json command;
    std::promise<nlohmann::ordered_json> reply;
  };

  nlohmann::ordered_json submit(nlohmann::json command);
  void drain();
  void publish(const nlohmann::ordered_json& message);

  struct Http;
  ServeOptions options_;
  ControlSession session_;
  std::unique_ptr<Http> http_;
  std::thread http_thread_;
  int port_ = 0;

  // mu_ guards the command queue and the loop flag; events_mu_ the log.
  std::mutex mu_;
  std::condition_variable loop_cv_;
  std::deque<Pending> pending_;
  mutable std::mutex events_mu_;
  std::condition_variable events_cv_;
  std::vector<std::string> events_;
  std::atomic<bool> stopping_{false};
  bool loop_running_ = false;
};

}  // namespace blelab::control
