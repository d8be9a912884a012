#pragma once

// The per-container monitor: spawns the sandbox, detaches from the daemon
// (decoupled mode), reports launch and exit, and serves monitor.sock.

#include <cstdint>
#include <optional>
#include <string>

#include "hydra/protocol.hpp"
#include "hydra/sandbox.hpp"

namespace hydra {

inline constexpr int kMonitorMaxClients = 16;

// Everything a monitor knows about the world; carried on its command line.
struct MonitorBootArgs {
  ContainerId container_id;
  fs::path state_dir;
  SupervisionMode mode = SupervisionMode::decoupled;
  ContainerSpec spec;
  std::optional<ProcessIdentity> daemon;
  SignalPlan signal_plan = SignalPlan::defaults();
  std::int64_t handshake_timeout_ms = 5000;
  std::int64_t max_log_bytes = 0;  // 0 = unlimited

  // Filled in by the pre-exec half once the sandbox exists.
  int intermediate_pid = 0;
  ProcessIdentity container;
  int stdin_fd = -1;
  int stdout_fd = -1;
  int stderr_fd = -1;
  std::int64_t started_at = 0;
};

json to_json(const MonitorBootArgs& args);
MonitorBootArgs boot_args_from_json(const json& j);

struct LaunchRequest {
  MonitorBootArgs boot;
  fs::path monitor_exe;
};

// Daemon side. Forks the monitor-to-be and returns the pid of the direct
// child: the short-lived intermediate in decoupled mode, the monitor itself
// in lazy/coupled mode. Identities arrive later through the Launched
// message on the daemon socket. Throws Error{spawn_error} if fork fails.
int launch_monitor(const LaunchRequest& req);

// Entry point of the exec'd monitor image. Returns the process exit code.
int monitor_main(const MonitorBootArgs& args);

// Hidden subcommand name the daemon execs the monitor binary with.
inline constexpr const char* kMonitorSubcommand = "__monitor";

}  // namespace hydra
