#pragma once

// The container daemon: owns the registry of records, launches monitors,
// ingests exit files and answers the JSON-lines API on daemon.sock.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "hydra/protocol.hpp"

namespace hydra {

struct DaemonConfig {
  fs::path state_dir;
  SupervisionMode mode = SupervisionMode::decoupled;
  std::int64_t poll_interval_ms = 2000;
  SignalPlan signal_plan = SignalPlan::defaults();
  std::int64_t handshake_timeout_ms = 5000;
  // Binary exec'd as `<monitor_exe> __monitor <boot-json>`; empty means
  // /proc/self/exe.
  fs::path monitor_exe;
  std::optional<std::uint64_t> id_seed;
  std::int64_t max_log_bytes = 0;
  // Coupled mode keeps one blocked waiter thread per container; this is the
  // working set each of them touches.
  std::size_t coupled_waiter_bytes = 256 * 1024;

  void validate() const;
};

// In-memory view of containers/<id>/record.json, written through on save.
class Registry {
 public:
  explicit Registry(StateDirLayout layout) : layout_(std::move(layout)) {}

  // Reads every record. Unreadable ones are renamed to record.json.corrupt
  // and their paths returned.
  std::vector<fs::path> load();

  ContainerRecord* find(const ContainerId& id);
  const ContainerRecord* find(const ContainerId& id) const;
  bool contains(const ContainerId& id) const { return records_.count(id) != 0; }
  void save(const ContainerRecord& rec);
  void erase(const ContainerId& id);
  std::vector<ContainerId> ids() const;
  std::size_t size() const { return records_.size(); }
  const StateDirLayout& layout() const { return layout_; }

 private:
  StateDirLayout layout_;
  std::map<ContainerId, ContainerRecord> records_;
};

// Moves `rec` into an exited state, passing through Lost or Running first
// when the direct edge is not in the transition table.
void settle_exit(ContainerRecord& rec, const ContainerState& exited);

// Records a disappearance nobody observed: Exited(signal 9) flagged unknown.
void mark_exit_unknown(ContainerRecord& rec);

struct IngestOutcome {
  std::vector<ContainerId> exited;
  std::vector<fs::path> quarantined;
};

// Applies exits/<id>.exit files to records that have not exited yet.
// Malformed files and files for unknown ids are renamed *.corrupt.
IngestOutcome ingest_exit_files(Registry& reg);

struct ReconcileOutcome {
  // Coupled mode: previously running containers to launch again.
  std::vector<ContainerId> relaunch;
  std::vector<ContainerId> changed;
  IngestOutcome ingest;
};

// Startup pass bringing records in line with the exit files and the live
// process table. Running it twice leaves the registry unchanged.
ReconcileOutcome reconcile(Registry& reg, SupervisionMode mode);

// Periodic pass over active records whose monitor has died. Containers left
// behind are killed; the ids returned should be relaunched, the rest are
// marked exited-unknown.
std::vector<ContainerId> sweep_orphans(Registry& reg);

// Runs the daemon in the calling process until shutdown. Throws
// Error{already_running} when another daemon holds the state dir.
int run_daemon(const DaemonConfig& config);

}  // namespace hydra
