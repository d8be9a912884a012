#pragma once

// Desk-scale experiments: daemon restart, upgrade outage, spawn latency and
// scalability, each across supervision modes. Results are CSV rows
//   experiment,mode,trial,metric,value,unit

#include <chrono>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hydra/client.hpp"
#include "hydra/model.hpp"
#include "hydra/protocol.hpp"

namespace hydra::bench {

struct BenchEnv {
  fs::path hydra_bin;
  // Binary providing the __echo-server and __probe subcommands.
  fs::path bench_bin;
  // Per-experiment state dirs are created under here.
  fs::path work_dir;
  std::optional<std::uint64_t> seed;
};

// Orphaned monitors are re-parented to the closest subreaper; the harness
// becomes one and reaps them so they do not pile up as zombies.
class ChildReaper {
 public:
  static void become_subreaper();
  // Reaps exited children other than the ones registered as owned.
  static void reap_orphans();
  static void own(int pid);
  static void disown(int pid);
};

// `hydra daemon start --foreground` as a child process.
class DaemonProcess {
 public:
  DaemonProcess(const BenchEnv& env, fs::path state_dir, SupervisionMode mode,
                std::vector<std::string> extra_args = {});
  ~DaemonProcess();
  DaemonProcess(const DaemonProcess&) = delete;
  DaemonProcess& operator=(const DaemonProcess&) = delete;

  // Spawns the daemon and waits until it answers `status`.
  void start(std::chrono::milliseconds timeout = std::chrono::seconds(15));
  void kill9();
  // Graceful shutdown through the API.
  void stop();
  bool running() const { return pid_ > 0; }
  int pid() const { return pid_; }
  DaemonClient client() const { return DaemonClient(state_dir_); }
  const fs::path& state_dir() const { return state_dir_; }
  SupervisionMode mode() const { return mode_; }

 private:
  void wait_gone(std::chrono::milliseconds timeout);

  BenchEnv env_;
  fs::path state_dir_;
  SupervisionMode mode_;
  std::vector<std::string> extra_;
  int pid_ = 0;
};

// Kills every monitor, container group and daemon recorded in `state_dir`,
// then deletes it.
void cleanup_state_dir(const fs::path& state_dir);

struct Row {
  std::string experiment;
  std::string mode;
  int trial = 0;
  std::string metric;
  double value = 0;
  std::string unit;
};

struct Stats {
  std::size_t n = 0;
  double median = 0;
  double p95 = 0;
  double min = 0;
  double max = 0;
};

Stats summarize(std::vector<double> values);

struct ExperimentReport {
  std::string experiment;
  std::vector<Row> rows;
  fs::path csv_path;

  void add(const std::string& mode, int trial, const std::string& metric, double value,
           const std::string& unit);
  std::vector<double> values(const std::string& mode, const std::string& metric) const;
  Stats stats(const std::string& mode, const std::string& metric) const;
};

inline constexpr const char* kCsvHeader = "experiment,mode,trial,metric,value,unit";

void write_csv(const ExperimentReport& report, const fs::path& path);
std::vector<Row> read_csv(const fs::path& path);
// Human-readable median/p95 table.
std::string render_summary(const ExperimentReport& report);

// ---- experiments ----

struct DaemonRestartOptions {
  int containers = 5;
  int trials = 3;
  // Kill/restart cycles per trial; survival is judged against the pids seen
  // before the first kill.
  int restarts = 1;
};

// Metrics: survived, restarts, restore_ms (daemon-reported lock to
// reconcile-done), recover_ms (daemon spawn until every container is Running).
ExperimentReport exp_daemon_restart(const BenchEnv& env, const std::vector<SupervisionMode>& modes,
                                    const DaemonRestartOptions& opts);

struct OutageOptions {
  int trials = 3;
  int startup_ms = 300;
  int probe_interval_ms = 10;
  // Also run a decoupled trial without any upgrade, reported as mode "control".
  bool control = true;
};

// Metrics: max_gap_ms, probes, failures.
ExperimentReport exp_upgrade_outage(const BenchEnv& env, const std::vector<SupervisionMode>& modes,
                                    const OutageOptions& opts);

struct SpawnOptions {
  int trials = 50;
};

// Metrics: latency_ms per mode; delta_ms (paired against coupled) for lazy
// and decoupled; loadavg_1m under mode "host".
ExperimentReport exp_spawn_latency(const BenchEnv& env, const SpawnOptions& opts);

struct ScalabilityOptions {
  int max_n = 100;
  int step = 10;
};

// Rows use trial = n. Metrics: launch_ms (of the n-th container),
// daemon_rss_kb, daemon_threads.
ExperimentReport exp_scalability(const BenchEnv& env, const std::vector<SupervisionMode>& modes,
                                 const ScalabilityOptions& opts);

// ---- workload processes ----

// Unix-socket line echo server; sleeps `startup_ms` first to stand in for
// application initialisation.
int echo_server_main(const fs::path& socket, int startup_ms);

// Probes `socket` every `interval_ms` until stdin reaches EOF, then prints
// {"max_gap_ms":..,"probes":..,"failures":..} on stdout.
int probe_main(const fs::path& socket, int interval_ms);

// ---- /proc helpers ----

std::int64_t process_rss_kb(int pid);
int process_threads(int pid);

}  // namespace hydra::bench
