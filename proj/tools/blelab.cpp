// blelab: command-line front end for the BLE security lab.
//
//   blelab run        --config F [--seed N] [--out DIR]
//   blelab montecarlo --config F --runs N --seed-base N [--out DIR]
//   blelab assess     --config F [--out DIR]
//   blelab serve      --config F --port N [--time-scale X] [--host H]

#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "blelab/control.hpp"
#include "blelab/harness.hpp"

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

}  // namespace

int main(int argc, char** argv) {
  using namespace blelab;

  CLI::App app{"Deterministic BLE security lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";

  auto* run_cmd = app.add_subcommand("run", "Run one seeded scenario and write its logs");
  std::optional<std::uint64_t> seed;
  run_cmd->add_option("--config", config_path, "Scenario JSON")->required();
  run_cmd->add_option("--seed", seed, "Override the config seed");
  run_cmd->add_option("--out", out_dir, "Output root")->capture_default_str();

  auto* mc_cmd = app.add_subcommand("montecarlo", "Attack and clean runs over a seed range");
  int runs = 0;
  std::uint64_t seed_base = 1;
  mc_cmd->add_option("--config", config_path, "Scenario JSON")->required();
  mc_cmd->add_option("--runs", runs, "Number of seeds")->required()->check(CLI::PositiveNumber);
  mc_cmd->add_option("--seed-base", seed_base, "First seed")->required();
  mc_cmd->add_option("--out", out_dir, "Output root")->capture_default_str();

  auto* assess_cmd = app.add_subcommand("assess", "Write the vulnerability report for a scenario");
  assess_cmd->add_option("--config", config_path, "Scenario JSON")->required();
  assess_cmd->add_option("--out", out_dir, "Output root")->capture_default_str();

  auto* serve_cmd = app.add_subcommand("serve", "Interactive scenario behind the HTTP control API");
  control::ServeOptions serve;
  serve_cmd->add_option("--config", config_path, "Scenario JSON")->required();
  serve_cmd->add_option("--port", serve.port, "TCP port (0 picks one)")->required();
  serve_cmd->add_option("--time-scale", serve.time_scale, "Virtual ms per wall ms (0 = unpaced)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  serve_cmd->add_option("--host", serve.host, "Bind address")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    auto config = harness::load_config(config_path);

    if (*run_cmd) {
      if (seed) config.seed = *seed;
      const auto res = harness::run(config, out_dir);
      std::cout << res.out_dir.string() << "\n";
      std::cout << "readings " << res.readings.size() << ", alerts " << res.alerts.size();
      if (res.attack_started) std::cout << ", attack at " << *res.attack_started << " ms";
      std::cout << "\n";
      for (const auto& s : res.sniffed) {
        std::cout << "sniffer " << s.central << " <-> " << s.peripheral << ": "
                  << (s.key ? "key recovered, " + std::to_string(s.decrypted) + "/" +
                                  std::to_string(s.att_frames) + " ATT frames read"
                            : std::string("no key"))
                  << "\n";
      }
    } else if (*mc_cmd) {
      const auto res = harness::montecarlo(config, runs, seed_base, out_dir);
      std::cout << detection::metrics_csv(res.metrics, config.detector);
      if (auto r = res.metrics.per_window_false_alert_rate()) {
        std::cout << "per-window false-alert rate " << *r << " over " << res.metrics.clean_windows
                  << " clean windows\n";
      }
      std::cout << res.csv_path.string() << "\n";
    } else if (*assess_cmd) {
      const auto res = harness::assess(config, out_dir);
      std::cout << risk::render_text(res.findings, harness::scenario_facts(config));
      std::cout << res.json_path.string() << "\n" << res.text_path.string() << "\n";
    } else if (*serve_cmd) {
      control::ControlServer server(config, serve);
      const int port = server.listen();
      std::cout << "listening on http://" << serve.host << ":" << port << " (GET /api/events, POST /api/command)"
                << std::endl;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::thread loop([&] { server.run(); });
      while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
      loop.join();
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::kConfigInvalid ? 2 : 1;
  }
  return 0;
}
