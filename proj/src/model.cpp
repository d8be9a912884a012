#include "hydra/model.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <random>

namespace hydra {

namespace {

constexpr std::array<std::pair<ErrorCode, std::string_view>, 22> kErrorNames{{
    {ErrorCode::invalid_argument, "invalid_argument"},
    {ErrorCode::not_found, "not_found"},
    {ErrorCode::invalid_state, "invalid_state"},
    {ErrorCode::already_exists, "already_exists"},
    {ErrorCode::already_running, "already_running"},
    {ErrorCode::not_running, "not_running"},
    {ErrorCode::rm_running, "rm_running"},
    {ErrorCode::io_error, "io_error"},
    {ErrorCode::parse_error, "parse_error"},
    {ErrorCode::spawn_error, "spawn_error"},
    {ErrorCode::exec_failure, "exec_failure"},
    {ErrorCode::isolation_unsupported, "isolation_unsupported"},
    {ErrorCode::handshake_timeout, "handshake_timeout"},
    {ErrorCode::signal_failure, "signal_failure"},
    {ErrorCode::permission_denied, "permission_denied"},
    {ErrorCode::not_parent, "not_parent"},
    {ErrorCode::frame_too_large, "frame_too_large"},
    {ErrorCode::bad_tag, "bad_tag"},
    {ErrorCode::truncated_stream, "truncated_stream"},
    {ErrorCode::unknown_op, "unknown_op"},
    {ErrorCode::too_many_connections, "too_many_connections"},
    {ErrorCode::transport_error, "transport_error"},
}};

std::string to_hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t entropy64() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

}  // namespace

std::string_view to_string(ErrorCode code) {
  for (const auto& [c, name] : kErrorNames) {
    if (c == code) return name;
  }
  return "unknown";
}

std::optional<ErrorCode> error_code_from_string(std::string_view s) {
  for (const auto& [c, name] : kErrorNames) {
    if (name == s) return c;
  }
  return std::nullopt;
}

bool ContainerId::is_valid(std::string_view s) noexcept {
  if (s.size() != 16) return false;
  for (char c : s) {
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  }
  return true;
}

ContainerId ContainerId::parse(std::string_view s) {
  if (!is_valid(s)) {
    throw Error(ErrorCode::invalid_argument, "malformed container id '" + std::string(s) + "'");
  }
  return ContainerId(std::string(s));
}

ContainerId new_container_id(std::optional<std::uint64_t> rng_seed) {
  std::mt19937_64 rng(rng_seed ? *rng_seed : entropy64());
  return ContainerId::parse(to_hex16(rng()));
}

ContainerIdGenerator::ContainerIdGenerator(std::optional<std::uint64_t> seed) : seed_(seed) {}

ContainerId ContainerIdGenerator::next() {
  if (!seed_) return new_container_id();
  // Stream i of a seeded generator is the id for seed + i.
  return new_container_id(*seed_ + counter_++);
}

std::string_view to_string(Isolation iso) {
  return iso == Isolation::namespaces ? "namespaces" : "none";
}

Isolation isolation_from_string(std::string_view s) {
  if (s == "none") return Isolation::none;
  if (s == "namespaces") return Isolation::namespaces;
  throw Error(ErrorCode::invalid_argument, "unknown isolation '" + std::string(s) + "'");
}

void ContainerSpec::validate() const {
  if (command.empty() || command.front().empty()) {
    throw Error(ErrorCode::invalid_argument, "command must be non-empty");
  }
  if (working_dir && (working_dir->empty() || working_dir->front() != '/')) {
    throw Error(ErrorCode::invalid_argument, "working_dir must be absolute");
  }
  if (stop_grace_ms < 0) {
    throw Error(ErrorCode::invalid_argument, "stop_grace_ms must be >= 0");
  }
  for (const auto& e : env) {
    auto eq = e.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw Error(ErrorCode::invalid_argument, "env entry '" + e + "' is not KEY=VALUE");
    }
  }
}

std::string_view to_string(SupervisionMode mode) {
  switch (mode) {
    case SupervisionMode::coupled:
      return "coupled";
    case SupervisionMode::lazy:
      return "lazy";
    case SupervisionMode::decoupled:
      return "decoupled";
  }
  return "decoupled";
}

SupervisionMode supervision_mode_from_string(std::string_view s) {
  if (s == "coupled") return SupervisionMode::coupled;
  if (s == "lazy") return SupervisionMode::lazy;
  if (s == "decoupled") return SupervisionMode::decoupled;
  throw Error(ErrorCode::invalid_argument, "unknown supervision mode '" + std::string(s) + "'");
}

std::string_view to_string(StateKind kind) {
  switch (kind) {
    case StateKind::created:
      return "created";
    case StateKind::running:
      return "running";
    case StateKind::paused:
      return "paused";
    case StateKind::stopping:
      return "stopping";
    case StateKind::exited:
      return "exited";
    case StateKind::lost:
      return "lost";
  }
  return "lost";
}

StateKind state_kind_from_string(std::string_view s) {
  for (auto k : {StateKind::created, StateKind::running, StateKind::paused, StateKind::stopping,
                 StateKind::exited, StateKind::lost}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::parse_error, "unknown container state '" + std::string(s) + "'");
}

ContainerState ContainerState::exited_code(int code) {
  if (code < 0 || code > 255) {
    throw Error(ErrorCode::invalid_argument, "exit code out of range: " + std::to_string(code));
  }
  ContainerState s(StateKind::exited);
  s.exit_code_ = code;
  return s;
}

ContainerState ContainerState::exited_signal(int sig) {
  if (sig < 1 || sig > 64) {
    throw Error(ErrorCode::invalid_argument, "signal out of range: " + std::to_string(sig));
  }
  ContainerState s(StateKind::exited);
  s.term_signal_ = sig;
  return s;
}

bool ContainerState::is_active() const noexcept {
  return kind_ == StateKind::running || kind_ == StateKind::paused || kind_ == StateKind::stopping;
}

std::string ContainerState::describe() const {
  if (kind_ != StateKind::exited) return std::string(to_string(kind_));
  if (exit_code_) return "exited(code=" + std::to_string(*exit_code_) + ")";
  return "exited(signal=" + std::to_string(term_signal_.value_or(0)) + ")";
}

bool validate_transition(const ContainerState& from, const ContainerState& to) {
  const bool to_code = to.kind() == StateKind::exited && to.exit_code().has_value();
  const bool to_signal = to.kind() == StateKind::exited && to.term_signal().has_value();
  switch (from.kind()) {
    case StateKind::created:
      return to.kind() == StateKind::running || to.kind() == StateKind::lost || to_signal;
    case StateKind::running:
      return to.kind() == StateKind::paused || to.kind() == StateKind::stopping ||
             to.kind() == StateKind::lost || to_code || to_signal;
    case StateKind::paused:
      return to.kind() == StateKind::running || to_signal;
    case StateKind::stopping:
    case StateKind::lost:
      return to_code || to_signal;
    case StateKind::exited:
      return false;
  }
  return false;
}

ExitReport ExitReport::with_code(ContainerId id, int code, std::int64_t at) {
  ExitReport r{std::move(id), code, std::nullopt, at};
  r.validate();
  return r;
}

ExitReport ExitReport::with_signal(ContainerId id, int sig, std::int64_t at) {
  ExitReport r{std::move(id), std::nullopt, sig, at};
  r.validate();
  return r;
}

void ExitReport::validate() const {
  if (exit_code.has_value() == term_signal.has_value()) {
    throw Error(ErrorCode::invalid_argument, "exit report needs exactly one of code/signal");
  }
  if (exit_code && (*exit_code < 0 || *exit_code > 255)) {
    throw Error(ErrorCode::invalid_argument, "exit code out of range");
  }
  if (term_signal && (*term_signal < 1 || *term_signal > 64)) {
    throw Error(ErrorCode::invalid_argument, "signal out of range");
  }
  if (container_id.empty()) throw Error(ErrorCode::invalid_argument, "exit report without id");
}

ContainerState ExitReport::as_state() const {
  return exit_code ? ContainerState::exited_code(*exit_code)
                   : ContainerState::exited_signal(*term_signal);
}

int ExitReport::shell_status() const {
  return exit_code ? *exit_code : 128 + term_signal.value_or(0);
}

void ContainerRecord::validate() const {
  spec.validate();
  if (state.kind() == StateKind::running && !container) {
    throw Error(ErrorCode::invalid_state, "running record without container identity");
  }
  if (state.is_exited() && !finished_at) {
    throw Error(ErrorCode::invalid_state, "exited record without finished_at");
  }
  if (restart_count < 0) throw Error(ErrorCode::invalid_state, "negative restart_count");
}

void ContainerRecord::transition(const ContainerState& next) {
  if (!validate_transition(state, next)) {
    throw Error(ErrorCode::invalid_state,
                "illegal transition " + state.describe() + " -> " + next.describe());
  }
  state = next;
}

std::int64_t now_epoch_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

}  // namespace hydra
