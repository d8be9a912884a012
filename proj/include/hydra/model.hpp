#pragma once

// Domain types shared by the daemon, monitor, CLI and bench harness.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hydra {

enum class ErrorCode {
  invalid_argument,
  not_found,
  invalid_state,
  already_exists,
  already_running,
  not_running,
  rm_running,
  io_error,
  parse_error,
  spawn_error,
  exec_failure,
  isolation_unsupported,
  handshake_timeout,
  signal_failure,
  permission_denied,
  not_parent,
  frame_too_large,
  bad_tag,
  truncated_stream,
  unknown_op,
  too_many_connections,
  transport_error,
};

std::string_view to_string(ErrorCode code);
std::optional<ErrorCode> error_code_from_string(std::string_view s);

// Every failure in the engine surfaces as an Error carrying a stable code.
// The code's string form is what travels in API responses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ContainerId {
 public:
  ContainerId() = default;

  // Throws Error{invalid_argument} unless `s` is exactly 16 lowercase hex chars.
  static ContainerId parse(std::string_view s);
  static bool is_valid(std::string_view s) noexcept;

  const std::string& str() const noexcept { return value_; }
  bool empty() const noexcept { return value_.empty(); }

  friend bool operator==(const ContainerId&, const ContainerId&) = default;
  friend auto operator<=>(const ContainerId&, const ContainerId&) = default;

 private:
  explicit ContainerId(std::string v) : value_(std::move(v)) {}
  std::string value_;
};

// Seeded calls are deterministic; unseeded calls draw from the OS entropy pool.
ContainerId new_container_id(std::optional<std::uint64_t> rng_seed = std::nullopt);

// Deterministic id stream, used by daemons started with a fixed seed.
class ContainerIdGenerator {
 public:
  explicit ContainerIdGenerator(std::optional<std::uint64_t> seed);
  ContainerId next();

 private:
  std::optional<std::uint64_t> seed_;
  std::uint64_t counter_ = 0;
};

enum class Isolation { none, namespaces };

std::string_view to_string(Isolation iso);
Isolation isolation_from_string(std::string_view s);

struct ContainerSpec {
  std::vector<std::string> command;
  std::vector<std::string> env;
  std::optional<std::string> working_dir;
  Isolation isolation = Isolation::none;
  bool restart_on_monitor_loss = true;
  std::int64_t stop_grace_ms = 10000;

  // Throws Error{invalid_argument} on an empty command, relative working_dir,
  // negative grace or a malformed env entry.
  void validate() const;

  friend bool operator==(const ContainerSpec&, const ContainerSpec&) = default;
};

// A pid plus the process start time; the pair survives pid recycling.
struct ProcessIdentity {
  int pid = 0;
  std::uint64_t start_ticks = 0;

  friend bool operator==(const ProcessIdentity&, const ProcessIdentity&) = default;
};

enum class SupervisionMode { coupled, lazy, decoupled };

std::string_view to_string(SupervisionMode mode);
SupervisionMode supervision_mode_from_string(std::string_view s);

enum class StateKind { created, running, paused, stopping, exited, lost };

std::string_view to_string(StateKind kind);
StateKind state_kind_from_string(std::string_view s);

class ContainerState {
 public:
  ContainerState() = default;

  static ContainerState created() { return ContainerState(StateKind::created); }
  static ContainerState running() { return ContainerState(StateKind::running); }
  static ContainerState paused() { return ContainerState(StateKind::paused); }
  static ContainerState stopping() { return ContainerState(StateKind::stopping); }
  static ContainerState lost() { return ContainerState(StateKind::lost); }
  // Throws unless code is 0..255.
  static ContainerState exited_code(int code);
  // Throws unless sig is 1..64.
  static ContainerState exited_signal(int sig);

  StateKind kind() const noexcept { return kind_; }
  bool is_exited() const noexcept { return kind_ == StateKind::exited; }
  // Running or Paused or Stopping: a live container is expected.
  bool is_active() const noexcept;
  std::optional<int> exit_code() const noexcept { return exit_code_; }
  std::optional<int> term_signal() const noexcept { return term_signal_; }

  std::string describe() const;

  friend bool operator==(const ContainerState&, const ContainerState&) = default;

 private:
  explicit ContainerState(StateKind k) : kind_(k) {}
  StateKind kind_ = StateKind::created;
  std::optional<int> exit_code_;
  std::optional<int> term_signal_;
};

// Legal transition table:
//   Created  -> Running | Lost | Exited(signal)
//   Running  -> Paused | Stopping | Lost | Exited(*)
//   Paused   -> Running | Exited(signal)
//   Stopping -> Exited(*)
//   Lost     -> Exited(*)
//   Exited   -> (terminal)
bool validate_transition(const ContainerState& from, const ContainerState& to);

struct ExitReport {
  ContainerId container_id;
  std::optional<int> exit_code;
  std::optional<int> term_signal;
  std::int64_t finished_at = 0;

  static ExitReport with_code(ContainerId id, int code, std::int64_t at);
  static ExitReport with_signal(ContainerId id, int sig, std::int64_t at);

  // Exactly one of exit_code / term_signal, in range.
  void validate() const;
  ContainerState as_state() const;
  // Shell-style status: the code, or 128 + signal.
  int shell_status() const;

  friend bool operator==(const ExitReport&, const ExitReport&) = default;
};

struct ContainerRecord {
  ContainerId id;
  ContainerSpec spec;
  SupervisionMode mode = SupervisionMode::decoupled;
  ContainerState state;
  std::optional<ProcessIdentity> monitor;
  std::optional<ProcessIdentity> container;
  std::optional<std::int64_t> created_at;
  std::optional<std::int64_t> started_at;
  std::optional<std::int64_t> finished_at;
  int restart_count = 0;
  // Set when the container vanished without an exit file; the recorded
  // term_signal (9) is then a placeholder, not an observation.
  bool exit_unknown = false;
  std::optional<std::string> launch_error;

  // Throws Error{invalid_state} when the record violates its invariants.
  void validate() const;

  // Moves to `next` if legal, else throws Error{invalid_state}.
  void transition(const ContainerState& next);

  friend bool operator==(const ContainerRecord&, const ContainerRecord&) = default;
};

std::int64_t now_epoch_ms();

}  // namespace hydra
