#include "hydra/daemon.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <fstream>
#include <functional>
#include <list>
#include <memory>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <sys/file.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include "hydra/event_loop.hpp"
#include "hydra/io.hpp"
#include "hydra/monitor.hpp"
#include "hydra/sandbox.hpp"

namespace hydra {

using namespace std::chrono_literals;

void DaemonConfig::validate() const {
  if (state_dir.empty() || !state_dir.is_absolute()) {
    throw Error(ErrorCode::invalid_argument, "state dir must be an absolute path");
  }
  if (poll_interval_ms < 10) {
    throw Error(ErrorCode::invalid_argument, "poll interval must be at least 10 ms");
  }
  if (handshake_timeout_ms <= 0) {
    throw Error(ErrorCode::invalid_argument, "handshake timeout must be positive");
  }
  if (max_log_bytes < 0) throw Error(ErrorCode::invalid_argument, "negative max log size");
  if (!signal_plan.disjoint()) {
    throw Error(ErrorCode::invalid_argument, "exit-notify signal collides with a container signal");
  }
}

// ---------------------------------------------------------------------------
// Registry

namespace {

void quarantine(const fs::path& p) {
  std::error_code ec;
  fs::rename(p, fs::path(p.string() + ".corrupt"), ec);
  if (ec) spdlog::warn("cannot quarantine {}: {}", p.string(), ec.message());
}

}  // namespace

std::vector<fs::path> Registry::load() {
  std::vector<fs::path> bad;
  records_.clear();
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(layout_.containers_dir(), ec)) {
    const std::string name = entry.path().filename().string();
    if (!ContainerId::is_valid(name)) continue;
    const fs::path file = entry.path() / "record.json";
    if (!fs::exists(file)) continue;
    try {
      ContainerRecord rec = read_record(file);
      if (rec.id.str() != name) throw Error(ErrorCode::parse_error, "id does not match directory");
      rec.validate();
      records_[rec.id] = std::move(rec);
    } catch (const Error& e) {
      spdlog::warn("quarantining record {}: {}", file.string(), e.what());
      quarantine(file);
      bad.push_back(file);
    }
  }
  return bad;
}

ContainerRecord* Registry::find(const ContainerId& id) {
  auto it = records_.find(id);
  return it == records_.end() ? nullptr : &it->second;
}

const ContainerRecord* Registry::find(const ContainerId& id) const {
  auto it = records_.find(id);
  return it == records_.end() ? nullptr : &it->second;
}

void Registry::save(const ContainerRecord& rec) {
  write_record(layout_, rec);
  records_[rec.id] = rec;
}

void Registry::erase(const ContainerId& id) {
  records_.erase(id);
  std::error_code ec;
  fs::remove_all(layout_.container_dir(id), ec);
  fs::remove(layout_.exit_file(id), ec);
  fs::remove(layout_.log_file(id), ec);
}

std::vector<ContainerId> Registry::ids() const {
  std::vector<ContainerId> out;
  out.reserve(records_.size());
  for (const auto& [id, rec] : records_) out.push_back(id);
  return out;
}

// ---------------------------------------------------------------------------
// Pure-ish state passes

void settle_exit(ContainerRecord& rec, const ContainerState& exited) {
  if (!validate_transition(rec.state, exited)) {
    if (rec.state.kind() == StateKind::created) {
      rec.transition(ContainerState::lost());
    } else if (rec.state.kind() == StateKind::paused) {
      rec.transition(ContainerState::running());
    }
  }
  rec.transition(exited);
}

void mark_exit_unknown(ContainerRecord& rec) {
  settle_exit(rec, ContainerState::exited_signal(SIGKILL));
  rec.exit_unknown = true;
  rec.finished_at = now_epoch_ms();
}

IngestOutcome ingest_exit_files(Registry& reg) {
  IngestOutcome out;
  const auto& layout = reg.layout();
  std::error_code ec;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(layout.exits_dir(), ec)) {
    if (entry.path().extension() == ".exit") files.push_back(entry.path());
  }
  for (const auto& path : files) {
    const std::string stem = path.stem().string();
    if (!ContainerId::is_valid(stem)) {
      quarantine(path);
      out.quarantined.push_back(path);
      continue;
    }
    const ContainerId id = ContainerId::parse(stem);
    ContainerRecord* rec = reg.find(id);
    if (rec && rec->state.is_exited()) continue;  // already applied
    std::optional<ExitReport> report;
    try {
      report = read_exit_report(path);
      if (report->container_id != id) throw Error(ErrorCode::parse_error, "id mismatch");
    } catch (const Error& e) {
      spdlog::warn("quarantining exit file {}: {}", path.string(), e.what());
      quarantine(path);
      out.quarantined.push_back(path);
      if (rec && validate_transition(rec->state, ContainerState::lost())) {
        ContainerRecord next = *rec;
        next.transition(ContainerState::lost());
        reg.save(next);
      }
      continue;
    }
    if (!rec) {
      spdlog::warn("exit file for unknown container {}", id.str());
      quarantine(path);
      out.quarantined.push_back(path);
      continue;
    }
    ContainerRecord next = *rec;
    settle_exit(next, report->as_state());
    next.finished_at = report->finished_at;
    next.exit_unknown = false;
    reg.save(next);
    out.exited.push_back(id);
  }
  return out;
}

ReconcileOutcome reconcile(Registry& reg, SupervisionMode mode) {
  ReconcileOutcome out;
  out.ingest = ingest_exit_files(reg);
  out.changed = out.ingest.exited;

  for (const auto& id : reg.ids()) {
    ContainerRecord rec = *reg.find(id);
    const StateKind kind = rec.state.kind();
    if (kind == StateKind::exited || kind == StateKind::lost) continue;

    const bool alive = rec.container && is_alive(*rec.container);
    if (mode == SupervisionMode::coupled) {
      // Containers do not outlive a coupled daemon; anything still around is
      // a straggler and gets replaced.
      if (rec.monitor && is_alive(*rec.monitor)) ::kill(rec.monitor->pid, SIGKILL);
      if (alive) signal_group(rec.container->pid, SIGKILL);
      if (kind == StateKind::created) {
        rec.transition(ContainerState::lost());
        rec.launch_error = "daemon restarted during launch";
        reg.save(rec);
        out.changed.push_back(id);
      } else {
        out.relaunch.push_back(id);
      }
      continue;
    }

    if (alive) {
      const auto st = read_proc_stat(rec.container->pid);
      const bool stopped = st && st->state == 'T';
      ContainerRecord next = rec;
      if (kind == StateKind::created) next.transition(ContainerState::running());
      if (next.state.kind() == StateKind::running && stopped) {
        next.transition(ContainerState::paused());
      } else if (next.state.kind() == StateKind::paused && !stopped) {
        next.transition(ContainerState::running());
      } else if (next.state.kind() == StateKind::stopping) {
        // The stop was interrupted along with the daemon; finish it.
        signal_group(rec.container->pid, SIGCONT);
        signal_group(rec.container->pid, SIGKILL);
      }
      if (!(next == rec)) {
        reg.save(next);
        out.changed.push_back(id);
      }
      continue;
    }

    if (kind == StateKind::created) {
      rec.transition(ContainerState::lost());
      rec.launch_error = "daemon restarted during launch";
    } else {
      mark_exit_unknown(rec);
    }
    reg.save(rec);
    out.changed.push_back(id);
  }
  return out;
}

std::vector<ContainerId> sweep_orphans(Registry& reg) {
  std::vector<ContainerId> relaunch;
  const auto& layout = reg.layout();
  for (const auto& id : reg.ids()) {
    ContainerRecord rec = *reg.find(id);
    if (!rec.state.is_active() || !rec.monitor) continue;
    if (is_alive(*rec.monitor)) continue;
    if (fs::exists(layout.exit_file(id))) continue;  // next ingest picks it up
    const bool alive = rec.container && is_alive(*rec.container);
    if (alive) {
      try {
        signal_group(rec.container->pid, SIGKILL);
      } catch (const Error& e) {
        spdlog::warn("{}: {}", id.str(), e.what());
      }
      const bool running = rec.state.kind() == StateKind::running ||
                           rec.state.kind() == StateKind::paused;
      if (running && rec.spec.restart_on_monitor_loss) {
        spdlog::info("{}: monitor lost, relaunching", id.str());
        relaunch.push_back(id);
        continue;
      }
    }
    spdlog::info("{}: monitor and container gone without an exit file", id.str());
    mark_exit_unknown(rec);
    reg.save(rec);
  }
  return relaunch;
}

// ---------------------------------------------------------------------------
// The daemon process

namespace {

json record_json(const Registry& reg, const ContainerRecord& rec) {
  json j = to_json(rec);
  j["socket"] = reg.layout().monitor_socket(rec.id).string();
  return j;
}

fs::path self_exe() {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  if (ec) throw Error(ErrorCode::io_error, "cannot resolve /proc/self/exe");
  return p;
}

class Daemon;

// One accepted API connection. Requests are a single JSON line.
struct ApiClient {
  std::shared_ptr<Connection> conn;
  std::string buf;
};

class Daemon {
 public:
  explicit Daemon(DaemonConfig cfg)
      : cfg_(std::move(cfg)),
        layout_(resolve_layout(cfg_.state_dir)),
        reg_(layout_),
        ids_(cfg_.id_seed) {
    if (cfg_.monitor_exe.empty()) cfg_.monitor_exe = self_exe();
  }

  int run();

 private:
  using Reply = std::function<void(const json&)>;
  using LaunchDone = std::function<void(const std::optional<Error>&)>;

  struct PendingLaunch {
    int child = 0;
    bool launched = false;
    bool child_reaped = false;
    EventLoop::TimerId timer = 0;
    std::vector<LaunchDone> done;
  };

  void acquire_lock();
  void accept_clients();
  void on_request(const std::shared_ptr<Connection>& conn, const json& req);
  void dispatch(const std::string& op, const json& req, const Reply& reply,
                const std::shared_ptr<Connection>& conn);

  ContainerRecord& require(const json& req);
  ContainerId fresh_id();

  void start_launch(const ContainerId& id, LaunchDone done);
  void relaunch(const ContainerId& id, bool bump, LaunchDone done);
  void finish_launch(const ContainerId& id, const std::optional<Error>& err);
  void maybe_complete(const ContainerId& id);
  void spawn_coupled_waiter(int pid);

  void on_exit(const ContainerId& id, std::function<void()> cb);
  void notify_settled(const ContainerId& id);
  void ingest();
  void poll_tick();
  void reap_children();
  void begin_shutdown();

  void op_run(const json& req, const Reply& reply);
  void op_start(const json& req, const Reply& reply);
  void op_stop(const json& req, const Reply& reply);
  void op_kill(const json& req, const Reply& reply);
  void op_pause(const json& req, const Reply& reply, bool pause);
  void op_restart(const json& req, const Reply& reply);
  void op_wait(const json& req, const Reply& reply);
  void op_top(const json& req, const Reply& reply);
  void op_stats(const json& req, const Reply& reply);
  void op_logs(const json& req, const Reply& reply, const std::shared_ptr<Connection>& conn);
  void op_monitor_socket(const json& req, const Reply& reply);
  void op_rm(const json& req, const Reply& reply);
  void op_launched(const json& req, const Reply& reply);
  void op_launch_failed(const json& req, const Reply& reply);

  void stop_then(const ContainerId& id, std::int64_t grace_ms, std::function<void()> after);

  DaemonConfig cfg_;
  StateDirLayout layout_;
  Registry reg_;
  ContainerIdGenerator ids_;
  EventLoop loop_;
  Fd lock_fd_;
  Fd listener_;
  std::list<std::shared_ptr<ApiClient>> clients_;
  std::map<ContainerId, PendingLaunch> launches_;
  std::map<int, ContainerId> launch_children_;
  std::multimap<ContainerId, std::function<void()>> exit_waiters_;
  std::map<ContainerId, EventLoop::TimerId> stop_timers_;
  double restore_ms_ = 0;
  bool shutting_down_ = false;
};

void Daemon::acquire_lock() {
  lock_fd_.reset(::open(layout_.lock_file().c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0600));
  if (!lock_fd_) {
    throw Error(ErrorCode::io_error, "open " + layout_.lock_file().string() + ": " +
                                         std::strerror(errno));
  }
  if (::flock(lock_fd_.get(), LOCK_EX | LOCK_NB) != 0) {
    std::string who;
    if (auto pid = read_daemon_pid(layout_)) who = " (pid " + std::to_string(pid->pid) + ")";
    throw Error(ErrorCode::already_running,
                "a daemon already serves " + layout_.root.string() + who);
  }
}

ContainerId Daemon::fresh_id() {
  for (int i = 0; i < 1000; ++i) {
    ContainerId id = ids_.next();
    if (!reg_.contains(id) && !fs::exists(layout_.container_dir(id))) return id;
  }
  throw Error(ErrorCode::already_exists, "could not find a free container id");
}

ContainerRecord& Daemon::require(const json& req) {
  if (!req.contains("id") || !req["id"].is_string()) {
    throw Error(ErrorCode::invalid_argument, "missing container id");
  }
  const std::string s = req["id"].get<std::string>();
  if (!ContainerId::is_valid(s)) throw Error(ErrorCode::invalid_argument, "bad container id " + s);
  ContainerRecord* rec = reg_.find(ContainerId::parse(s));
  if (!rec) throw Error(ErrorCode::not_found, "no such container " + s);
  return *rec;
}

int Daemon::run() {
  const auto t0 = std::chrono::steady_clock::now();
  acquire_lock();

  loop_.on_signal(cfg_.signal_plan.exit_notify, [this] { ingest(); });
  loop_.on_signal(SIGTERM, [this] { begin_shutdown(); });
  loop_.on_signal(SIGINT, [this] { begin_shutdown(); });
  if (cfg_.mode != SupervisionMode::coupled) {
    loop_.on_signal(SIGCHLD, [this] { reap_children(); });
  }
  ::signal(SIGPIPE, SIG_IGN);

  for (const auto& p : reg_.load()) spdlog::warn("ignored corrupt record {}", p.string());
  ReconcileOutcome rec = reconcile(reg_, cfg_.mode);
  restore_ms_ = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
  spdlog::info("restored {} records in {:.3f} ms ({} changed, {} to relaunch)", reg_.size(),
               restore_ms_, rec.changed.size(), rec.relaunch.size());

  auto self = identity_of(::getpid());
  if (self) write_daemon_pid(layout_, *self);

  listener_ = listen_unix(layout_.daemon_socket());
  set_nonblocking(listener_.get());
  loop_.watch(listener_.get(), POLLIN, [this](short) { accept_clients(); });

  // Exits that landed between reconcile and daemon.pid being written.
  loop_.post([this] { ingest(); });
  for (const auto& id : rec.relaunch) {
    loop_.post([this, id] {
      relaunch(id, false, [id](const std::optional<Error>& err) {
        if (err) spdlog::warn("{}: relaunch failed: {}", id.str(), err->what());
      });
    });
  }
  loop_.every(std::chrono::milliseconds(cfg_.poll_interval_ms), [this] { poll_tick(); });

  spdlog::info("daemon {} serving {} in {} mode", ::getpid(), layout_.root.string(),
               to_string(cfg_.mode));
  loop_.run();

  if (cfg_.mode == SupervisionMode::coupled) {
    // Containers die with their monitors.
    for (const auto& id : reg_.ids()) {
      const ContainerRecord* r = reg_.find(id);
      if (r->monitor && r->state.is_active() && is_alive(*r->monitor)) {
        ::kill(r->monitor->pid, SIGKILL);
      }
    }
  }
  ::unlink(layout_.daemon_socket().c_str());
  ::unlink(layout_.daemon_pid_file().c_str());
  spdlog::info("daemon stopped");
  return 0;
}

void Daemon::begin_shutdown() {
  if (shutting_down_) return;
  shutting_down_ = true;
  // Give queued replies a moment to leave.
  loop_.after(50ms, [this] { loop_.stop(); });
}

void Daemon::accept_clients() {
  while (true) {
    int fd = ::accept4(listener_.get(), nullptr, nullptr, SOCK_CLOEXEC | SOCK_NONBLOCK);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;
    }
    auto client = std::make_shared<ApiClient>();
    client->conn = std::make_shared<Connection>(loop_, Fd(fd));
    clients_.push_back(client);
    std::weak_ptr<ApiClient> weak = client;
    client->conn->start(
        [this, weak](std::string_view bytes) {
          auto c = weak.lock();
          if (!c) return;
          c->buf.append(bytes);
          const auto nl = c->buf.find('\n');
          if (nl == std::string::npos) {
            if (c->buf.size() > kMaxFramePayload) c->conn->close();
            return;
          }
          c->conn->pause_reading();
          json req = json::parse(c->buf.substr(0, nl), nullptr, false);
          auto conn = c->conn;
          on_request(conn, req);
        },
        [this, weak] {
          if (auto c = weak.lock()) clients_.remove(c);
        });
  }
}

void Daemon::on_request(const std::shared_ptr<Connection>& conn, const json& req) {
  Reply reply = [conn](const json& j) {
    conn->send_json(j);
    conn->close_after_flush();
  };
  if (req.is_discarded() || !req.is_object()) {
    reply(make_error(ErrorCode::parse_error, "request is not a JSON object"));
    return;
  }
  const std::string op = req.value("op", "");
  try {
    dispatch(op, req, reply, conn);
  } catch (const Error& e) {
    reply(make_error(e.code(), e.what()));
  } catch (const json::exception& e) {
    reply(make_error(ErrorCode::invalid_argument, e.what()));
  } catch (const std::exception& e) {
    reply(make_error(ErrorCode::io_error, e.what()));
  }
}

void Daemon::dispatch(const std::string& op, const json& req, const Reply& reply,
                      const std::shared_ptr<Connection>& conn) {
  if (shutting_down_ && op != "launched" && op != "launch_failed") {
    reply(make_error(ErrorCode::transport_error, "daemon is shutting down"));
    return;
  }
  if (op == "run") return op_run(req, reply);
  if (op == "start") return op_start(req, reply);
  if (op == "stop") return op_stop(req, reply);
  if (op == "kill") return op_kill(req, reply);
  if (op == "pause") return op_pause(req, reply, true);
  if (op == "unpause") return op_pause(req, reply, false);
  if (op == "restart") return op_restart(req, reply);
  if (op == "wait") return op_wait(req, reply);
  if (op == "top") return op_top(req, reply);
  if (op == "stats") return op_stats(req, reply);
  if (op == "logs") return op_logs(req, reply, conn);
  if (op == "attach" || op == "exec") return op_monitor_socket(req, reply);
  if (op == "rm") return op_rm(req, reply);
  if (op == "launched") return op_launched(req, reply);
  if (op == "launch_failed") return op_launch_failed(req, reply);
  if (op == "ps") {
    json list = json::array();
    for (const auto& id : reg_.ids()) list.push_back(record_json(reg_, *reg_.find(id)));
    json r = make_ok();
    r["containers"] = std::move(list);
    return reply(r);
  }
  if (op == "inspect") {
    json r = make_ok();
    r["record"] = record_json(reg_, require(req));
    return reply(r);
  }
  if (op == "status") {
    json r = make_ok();
    r["pid"] = ::getpid();
    r["mode"] = to_string(cfg_.mode);
    r["state_dir"] = layout_.root.string();
    r["restore_ms"] = restore_ms_;
    r["containers"] = reg_.size();
    r["poll_interval_ms"] = cfg_.poll_interval_ms;
    return reply(r);
  }
  if (op == "shutdown") {
    reply(make_ok());
    begin_shutdown();
    return;
  }
  reply(make_error(ErrorCode::unknown_op, "unknown op '" + op + "'"));
}

// ---- launching ----

void Daemon::spawn_coupled_waiter(int pid) {
  const std::size_t bytes = cfg_.coupled_waiter_bytes;
  std::thread([pid, bytes] {
    std::vector<char> scratch(bytes);
    for (std::size_t i = 0; i < scratch.size(); i += 4096) scratch[i] = 1;
    int st = 0;
    while (::waitpid(pid, &st, 0) < 0 && errno == EINTR) {
    }
  }).detach();
}

void Daemon::start_launch(const ContainerId& id, LaunchDone done) {
  ContainerRecord* rec = reg_.find(id);
  LaunchRequest req;
  req.monitor_exe = cfg_.monitor_exe;
  req.boot.container_id = id;
  req.boot.state_dir = layout_.root;
  req.boot.mode = cfg_.mode;
  req.boot.spec = rec->spec;
  req.boot.daemon = identity_of(::getpid());
  req.boot.signal_plan = cfg_.signal_plan;
  req.boot.handshake_timeout_ms = cfg_.handshake_timeout_ms;
  req.boot.max_log_bytes = cfg_.max_log_bytes;

  int child = 0;
  try {
    child = launch_monitor(req);
  } catch (const Error& e) {
    ContainerRecord next = *rec;
    next.transition(ContainerState::lost());
    next.launch_error = e.what();
    reg_.save(next);
    done(e);
    notify_settled(id);
    return;
  }
  if (cfg_.mode == SupervisionMode::coupled) spawn_coupled_waiter(child);
  launch_children_[child] = id;
  PendingLaunch& p = launches_[id];
  p.child = child;
  p.done.push_back(std::move(done));
  p.timer = loop_.after(std::chrono::milliseconds(cfg_.handshake_timeout_ms), [this, id] {
    auto it = launches_.find(id);
    if (it == launches_.end()) return;
    it->second.timer = 0;
    if (it->second.launched) {
      // Launched but the intermediate never went away.
      finish_launch(id, std::nullopt);
      return;
    }
    ContainerRecord* r = reg_.find(id);
    if (r && r->state.kind() == StateKind::created) {
      ContainerRecord next = *r;
      next.transition(ContainerState::lost());
      next.launch_error = "monitor handshake timed out";
      reg_.save(next);
    }
    finish_launch(id, Error(ErrorCode::handshake_timeout, "monitor did not report in time"));
    notify_settled(id);
  });
}

void Daemon::relaunch(const ContainerId& id, bool bump, LaunchDone done) {
  ContainerRecord* rec = reg_.find(id);
  if (!rec) return done(Error(ErrorCode::not_found, "container vanished"));
  // A new incarnation starts from scratch; this deliberately bypasses the
  // transition table, which only governs a single incarnation.
  ContainerRecord next = *rec;
  next.state = ContainerState::created();
  next.monitor.reset();
  next.container.reset();
  next.started_at.reset();
  next.finished_at.reset();
  next.exit_unknown = false;
  next.launch_error.reset();
  if (bump) ++next.restart_count;
  std::error_code ec;
  fs::remove(layout_.exit_file(id), ec);
  reg_.save(next);
  start_launch(id, std::move(done));
}

void Daemon::finish_launch(const ContainerId& id, const std::optional<Error>& err) {
  auto it = launches_.find(id);
  if (it == launches_.end()) return;
  if (it->second.timer) loop_.cancel(it->second.timer);
  auto done = std::move(it->second.done);
  launches_.erase(it);
  for (auto& d : done) d(err);
}

void Daemon::maybe_complete(const ContainerId& id) {
  auto it = launches_.find(id);
  if (it == launches_.end() || !it->second.launched) return;
  if (cfg_.mode == SupervisionMode::decoupled && !it->second.child_reaped) return;
  finish_launch(id, std::nullopt);
}

void Daemon::op_launched(const json& req, const Reply& reply) {
  ContainerRecord& rec = require(req);
  if (rec.state.kind() != StateKind::created) {
    reply(make_error(ErrorCode::handshake_timeout,
                     "launch of " + rec.id.str() + " is no longer pending"));
    return;
  }
  ContainerRecord next = rec;
  next.container = identity_from_json(req.at("container"));
  if (req.contains("monitor") && !req["monitor"].is_null()) {
    next.monitor = identity_from_json(req["monitor"]);
  }
  next.started_at = req.value("started_at", now_epoch_ms());
  next.transition(ContainerState::running());
  reg_.save(next);
  reply(make_ok());
  auto it = launches_.find(next.id);
  if (it != launches_.end()) {
    it->second.launched = true;
    maybe_complete(next.id);
  }
}

void Daemon::op_launch_failed(const json& req, const Reply& reply) {
  ContainerRecord& rec = require(req);
  const ContainerId id = rec.id;
  const auto code = error_code_from_string(req.value("error", "spawn_error"))
                        .value_or(ErrorCode::spawn_error);
  const std::string message = req.value("message", "launch failed");
  if (rec.state.kind() == StateKind::created) {
    ContainerRecord next = rec;
    next.transition(ContainerState::lost());
    next.launch_error = message;
    reg_.save(next);
  }
  reply(make_ok());
  finish_launch(id, Error(code, message));
  notify_settled(id);
}

void Daemon::reap_children() {
  int st = 0;
  pid_t pid;
  while ((pid = ::waitpid(-1, &st, WNOHANG)) > 0) {
    auto it = launch_children_.find(pid);
    if (it == launch_children_.end()) continue;
    const ContainerId id = it->second;
    launch_children_.erase(it);
    auto lit = launches_.find(id);
    if (lit != launches_.end() && lit->second.child == pid) {
      lit->second.child_reaped = true;
      maybe_complete(id);
    }
  }
}

// ---- exits ----

void Daemon::on_exit(const ContainerId& id, std::function<void()> cb) {
  exit_waiters_.emplace(id, std::move(cb));
}

void Daemon::notify_settled(const ContainerId& id) {
  auto range = exit_waiters_.equal_range(id);
  std::vector<std::function<void()>> cbs;
  for (auto it = range.first; it != range.second; ++it) cbs.push_back(std::move(it->second));
  exit_waiters_.erase(range.first, range.second);
  for (auto& cb : cbs) cb();
}

void Daemon::ingest() {
  IngestOutcome out = ingest_exit_files(reg_);
  for (const auto& id : out.exited) notify_settled(id);
}

void Daemon::poll_tick() {
  ingest();
  for (const auto& id : sweep_orphans(reg_)) {
    relaunch(id, true, [id](const std::optional<Error>& err) {
      if (err) spdlog::warn("{}: relaunch after monitor loss failed: {}", id.str(), err->what());
    });
  }
  for (const auto& id : reg_.ids()) {
    const ContainerRecord* r = reg_.find(id);
    if (r->state.is_exited()) {
      if (exit_waiters_.count(id)) notify_settled(id);
    }
  }
}

// ---- container operations ----

void Daemon::op_run(const json& req, const Reply& reply) {
  ContainerSpec spec = spec_from_json(req.at("spec"));
  spec.validate();
  ContainerRecord rec;
  rec.id = fresh_id();
  rec.spec = std::move(spec);
  rec.mode = cfg_.mode;
  rec.state = ContainerState::created();
  rec.created_at = now_epoch_ms();
  reg_.save(rec);
  const ContainerId id = rec.id;
  start_launch(id, [this, id, reply](const std::optional<Error>& err) {
    if (err) {
      json r = make_error(err->code(), err->what());
      r["id"] = id.str();
      return reply(r);
    }
    json r = make_ok();
    r["id"] = id.str();
    if (const ContainerRecord* cur = reg_.find(id)) r["record"] = record_json(reg_, *cur);
    reply(r);
  });
}

void Daemon::op_start(const json& req, const Reply& reply) {
  ContainerRecord& rec = require(req);
  const StateKind k = rec.state.kind();
  if (k != StateKind::exited && k != StateKind::lost) {
    throw Error(ErrorCode::invalid_state, rec.id.str() + " is " + rec.state.describe());
  }
  if (k == StateKind::lost && rec.container && is_alive(*rec.container)) {
    throw Error(ErrorCode::invalid_state, rec.id.str() + " still has live processes");
  }
  const ContainerId id = rec.id;
  relaunch(id, false, [this, id, reply](const std::optional<Error>& err) {
    if (err) return reply(make_error(err->code(), err->what()));
    json r = make_ok();
    if (const ContainerRecord* cur = reg_.find(id)) r["record"] = record_json(reg_, *cur);
    reply(r);
  });
}

void Daemon::stop_then(const ContainerId& id, std::int64_t grace_ms, std::function<void()> after) {
  ContainerRecord rec = *reg_.find(id);
  const int pgid = rec.container->pid;
  if (rec.state.kind() == StateKind::paused) {
    signal_group(pgid, cfg_.signal_plan.unpause);
    rec.transition(ContainerState::running());
  }
  if (rec.state.kind() == StateKind::running) {
    rec.transition(ContainerState::stopping());
    reg_.save(rec);
    signal_group(pgid, cfg_.signal_plan.stop);
  }
  if (!stop_timers_.count(id)) {
    stop_timers_[id] = loop_.after(std::chrono::milliseconds(grace_ms), [this, id, pgid] {
      stop_timers_.erase(id);
      const ContainerRecord* r = reg_.find(id);
      if (r && r->state.kind() == StateKind::stopping) {
        try {
          signal_group(pgid, cfg_.signal_plan.kill);
        } catch (const Error& e) {
          spdlog::warn("{}: {}", id.str(), e.what());
        }
      }
    });
  }
  on_exit(id, [this, id, after = std::move(after)] {
    auto it = stop_timers_.find(id);
    if (it != stop_timers_.end()) {
      loop_.cancel(it->second);
      stop_timers_.erase(it);
    }
    after();
  });
}

void Daemon::op_stop(const json& req, const Reply& reply) {
  ContainerRecord& rec = require(req);
  const ContainerId id = rec.id;
  auto ok_with_record = [this, id, reply] {
    json r = make_ok();
    if (const ContainerRecord* cur = reg_.find(id)) r["record"] = record_json(reg_, *cur);
    reply(r);
  };
  if (rec.state.is_exited()) return ok_with_record();
  if (!rec.state.is_active() || !rec.container) {
    throw Error(ErrorCode::invalid_state, id.str() + " is " + rec.state.describe());
  }
  const std::int64_t grace = req.value("grace_ms", rec.spec.stop_grace_ms);
  if (grace < 0) throw Error(ErrorCode::invalid_argument, "negative grace period");
  stop_then(id, grace, ok_with_record);
}

void Daemon::op_kill(const json& req, const Reply& reply) {
  ContainerRecord& rec = require(req);
  const ContainerId id = rec.id;
  auto ok_with_record = [this, id, reply] {
    json r = make_ok();
    if (const ContainerRecord* cur = reg_.find(id)) r["record"] = record_json(reg_, *cur);
    reply(r);
  };
  if (rec.state.is_exited()) return ok_with_record();
  if (!rec.container) throw Error(ErrorCode::invalid_state, id.str() + " is " + rec.state.describe());
  const int signo = req.value("signal", cfg_.signal_plan.kill);
  if (signo < 1 || signo > 64) throw Error(ErrorCode::invalid_argument, "bad signal number");
  if (!is_alive(*rec.container)) return ok_with_record();
  signal_group(rec.container->pid, signo);
  if (signo != SIGKILL || !rec.state.is_active()) return ok_with_record();
  // Reply once the exit has been recorded, or after a bounded wait.
  auto replied = std::make_shared<bool>(false);
  auto timer = loop_.after(5s, [replied, ok_with_record] {
    if (*replied) return;
    *replied = true;
    ok_with_record();
  });
  on_exit(id, [this, replied, timer, ok_with_record] {
    loop_.cancel(timer);
    if (*replied) return;
    *replied = true;
    ok_with_record();
  });
}

void Daemon::op_pause(const json& req, const Reply& reply, bool pause) {
  ContainerRecord rec = require(req);
  const StateKind want = pause ? StateKind::running : StateKind::paused;
  if (rec.state.kind() != want || !rec.container) {
    throw Error(ErrorCode::invalid_state, rec.id.str() + " is " + rec.state.describe());
  }
  signal_group(rec.container->pid, pause ? cfg_.signal_plan.pause : cfg_.signal_plan.unpause);
  rec.transition(pause ? ContainerState::paused() : ContainerState::running());
  reg_.save(rec);
  json r = make_ok();
  r["record"] = record_json(reg_, rec);
  reply(r);
}

void Daemon::op_restart(const json& req, const Reply& reply) {
  ContainerRecord& rec = require(req);
  const ContainerId id = rec.id;
  auto launch = [this, id, reply] {
    relaunch(id, true, [this, id, reply](const std::optional<Error>& err) {
      if (err) return reply(make_error(err->code(), err->what()));
      json r = make_ok();
      if (const ContainerRecord* cur = reg_.find(id)) r["record"] = record_json(reg_, *cur);
      reply(r);
    });
  };
  const StateKind k = rec.state.kind();
  if (k == StateKind::exited || k == StateKind::lost) return launch();
  if ((k == StateKind::running || k == StateKind::paused) && rec.container) {
    stop_then(id, req.value("grace_ms", rec.spec.stop_grace_ms), launch);
    return;
  }
  throw Error(ErrorCode::invalid_state, id.str() + " is " + rec.state.describe());
}

void Daemon::op_wait(const json& req, const Reply& reply) {
  ContainerRecord& rec = require(req);
  const ContainerId id = rec.id;
  auto answer = [this, id, reply] {
    const ContainerRecord* cur = reg_.find(id);
    if (!cur) return reply(make_error(ErrorCode::not_found, "container removed"));
    if (!cur->state.is_exited()) {
      json r = make_error(ErrorCode::invalid_state,
                          id.str() + " is " + cur->state.describe() +
                              (cur->launch_error ? ": " + *cur->launch_error : ""));
      return reply(r);
    }
    json r = make_ok();
    r["record"] = record_json(reg_, *cur);
    if (cur->state.exit_code()) r["exit_code"] = *cur->state.exit_code();
    if (cur->state.term_signal()) r["term_signal"] = *cur->state.term_signal();
    r["exit_unknown"] = cur->exit_unknown;
    reply(r);
  };
  if (rec.state.is_exited()) return answer();
  if (rec.state.kind() == StateKind::lost && !(rec.container && is_alive(*rec.container))) {
    return answer();
  }
  on_exit(id, answer);
}

void Daemon::op_top(const json& req, const Reply& reply) {
  const ContainerRecord& rec = require(req);
  if (!rec.state.is_active() || !rec.container) {
    throw Error(ErrorCode::not_running, rec.id.str() + " is " + rec.state.describe());
  }
  ProcSample s = sample_proc(rec.container->pid);
  json rows = json::array();
  for (const auto& row : s.rows) {
    rows.push_back(json{{"pid", row.pid},
                        {"ppid", row.ppid},
                        {"command", row.command},
                        {"cpu_ticks", row.cpu_ticks},
                        {"rss_bytes", row.rss_bytes},
                        {"state", std::string(1, row.state)}});
  }
  json r = make_ok();
  r["processes"] = std::move(rows);
  r["sampled_at"] = s.sampled_at;
  reply(r);
}

void Daemon::op_stats(const json& req, const Reply& reply) {
  const ContainerRecord& rec = require(req);
  if (!rec.state.is_active() || !rec.container) {
    throw Error(ErrorCode::not_running, rec.id.str() + " is " + rec.state.describe());
  }
  const int pgid = rec.container->pid;
  const std::int64_t window = std::clamp<std::int64_t>(req.value("window_ms", 500), 10, 10000);
  auto first = std::make_shared<ProcSample>(sample_proc(pgid));
  const auto t0 = std::chrono::steady_clock::now();
  loop_.after(std::chrono::milliseconds(window), [pgid, first, t0, reply] {
    ProcSample second = sample_proc(pgid);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::map<int, std::uint64_t> before;
    for (const auto& row : first->rows) before[row.pid] = row.cpu_ticks;
    std::uint64_t delta = 0;
    std::int64_t rss = 0;
    for (const auto& row : second.rows) {
      auto it = before.find(row.pid);
      const std::uint64_t base = it == before.end() ? 0 : it->second;
      if (row.cpu_ticks > base) delta += row.cpu_ticks - base;
      rss += row.rss_bytes;
    }
    const double hz = static_cast<double>(::sysconf(_SC_CLK_TCK));
    json r = make_ok();
    r["cpu_percent"] = secs > 0 ? 100.0 * (static_cast<double>(delta) / hz) / secs : 0.0;
    r["rss_bytes"] = rss;
    r["pids"] = second.rows.size();
    r["sampled_at"] = second.sampled_at;
    reply(r);
  });
}

void Daemon::op_logs(const json& req, const Reply& reply, const std::shared_ptr<Connection>& conn) {
  const ContainerRecord& rec = require(req);
  const bool follow = req.value("follow", false);
  const fs::path sock = layout_.monitor_socket(rec.id);
  if (follow && rec.state.is_active() && rec.monitor && is_alive(*rec.monitor) &&
      fs::exists(sock)) {
    json r = make_ok();
    r["socket"] = sock.string();
    return reply(r);
  }
  std::string content;
  {
    std::ifstream in(layout_.log_file(rec.id), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    content = ss.str();
  }
  json r = make_ok();
  r["stream"] = true;
  conn->send_json(r);
  conn->send(content);
  if (rec.state.is_exited()) {
    ExitReport rep;
    rep.container_id = rec.id;
    rep.exit_code = rec.state.exit_code();
    rep.term_signal = rec.state.term_signal();
    rep.finished_at = rec.finished_at.value_or(0);
    conn->send(encode_frame(StreamTag::exit_notice, encode_exit_line(rep)));
  }
  conn->close_after_flush();
}

void Daemon::op_monitor_socket(const json& req, const Reply& reply) {
  const ContainerRecord& rec = require(req);
  if (!rec.state.is_active() || !rec.monitor || !is_alive(*rec.monitor)) {
    throw Error(ErrorCode::not_running, rec.id.str() + " is " + rec.state.describe());
  }
  json r = make_ok();
  r["socket"] = layout_.monitor_socket(rec.id).string();
  reply(r);
}

void Daemon::op_rm(const json& req, const Reply& reply) {
  const ContainerRecord& rec = require(req);
  const StateKind k = rec.state.kind();
  const bool gone = k == StateKind::exited ||
                    (k == StateKind::lost && !(rec.container && is_alive(*rec.container)));
  if (!gone) throw Error(ErrorCode::rm_running, rec.id.str() + " is " + rec.state.describe());
  const ContainerId id = rec.id;
  reg_.erase(id);
  reply(make_ok());
}

}  // namespace

int run_daemon(const DaemonConfig& config) {
  config.validate();
  Daemon d(config);
  return d.run();
}

}  // namespace hydra
