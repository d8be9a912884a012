#pragma once

// Spawning a container's first process, signalling its process group, and
// reading the OS process table.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hydra/io.hpp"
#include "hydra/model.hpp"

namespace hydra {

struct ProcStat {
  int pid = 0;
  int ppid = 0;
  int pgid = 0;
  char state = '?';
  std::string comm;
  std::uint64_t utime = 0;
  std::uint64_t stime = 0;
  std::uint64_t start_ticks = 0;
  std::int64_t rss_pages = 0;
};

// Parses /proc/<pid>/stat; nullopt when the process is gone.
std::optional<ProcStat> read_proc_stat(int pid);

// Identity of a live process; nullopt when gone or a zombie.
std::optional<ProcessIdentity> identity_of(int pid);

// True iff `pid` exists, is not a zombie, and started at `start_ticks`.
bool is_alive(const ProcessIdentity& identity);

struct ProcRow {
  int pid = 0;
  int ppid = 0;
  std::string command;
  std::uint64_t cpu_ticks = 0;
  std::int64_t rss_bytes = 0;
  char state = '?';
};

struct ProcSample {
  std::vector<ProcRow> rows;
  std::int64_t sampled_at = 0;
};

// Live (non-zombie) processes in group `pgid` or descended from pid `pgid`.
ProcSample sample_proc(int pgid);

struct SandboxOptions {
  // Kill the container when its parent dies (coupled mode).
  bool die_with_parent = false;
  std::optional<std::string> hostname;
};

struct SandboxHandle {
  ProcessIdentity container;
  int pgid = 0;
  Isolation isolation = Isolation::none;
  // Parent-side ends; the child holds the others.
  Fd stdin_w;
  Fd stdout_r;
  Fd stderr_r;
  std::int64_t started_at = 0;
};

// Forks the container in its own process group with its stdio on pipes.
// Exec failures come back synchronously as Error{exec_failure} with no
// zombie left; missing namespace privileges as Error{isolation_unsupported}.
SandboxHandle spawn(const ContainerSpec& spec, const SandboxOptions& opts = {});

// Delivers `signo` to the whole group. A group that no longer exists is a
// successful no-op. Throws Error{permission_denied} / Error{signal_failure}.
void signal_group(int pgid, int signo);
inline void signal_group(const SandboxHandle& h, int signo) { signal_group(h.pgid, signo); }

// Blocks until the container exits and reaps it. Throws Error{not_parent}
// when the caller is not its parent.
ExitReport wait_exit(const SandboxHandle& h, const ContainerId& id);

// Non-blocking variant: nullopt while the container is still running.
std::optional<ExitReport> try_wait_exit(const SandboxHandle& h, const ContainerId& id);

// Translates a waitpid status into a report.
ExitReport report_from_status(const ContainerId& id, int status, std::int64_t at);

struct ExecHandle {
  int pid = 0;
  Fd stdin_w;
  Fd stdout_r;
  Fd stderr_r;
};

// Starts an extra process inside a running sandbox: same process group, or
// the container's namespaces when it is isolated. Must be called by the
// container's parent so the new process is reapable there too.
ExecHandle spawn_in_sandbox(const SandboxHandle& target, const std::vector<std::string>& argv,
                            const std::vector<std::string>& env);

// Default dispositions and an empty mask; for freshly forked children.
void reset_signal_state() noexcept;

// Environment handed to exec: the spec's env plus a default PATH when absent.
std::vector<std::string> container_environment(const ContainerSpec& spec);

}  // namespace hydra
