#include "hydra/monitor.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <fstream>
#include <list>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <sys/prctl.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include "hydra/event_loop.hpp"

namespace hydra {

using namespace std::chrono_literals;

json to_json(const MonitorBootArgs& a) {
  json j{{"container_id", a.container_id.str()},
         {"state_dir", a.state_dir.string()},
         {"mode", to_string(a.mode)},
         {"spec", to_json(a.spec)},
         {"exit_notify", a.signal_plan.exit_notify},
         {"handshake_timeout_ms", a.handshake_timeout_ms},
         {"max_log_bytes", a.max_log_bytes},
         {"intermediate_pid", a.intermediate_pid},
         {"container", to_json(a.container)},
         {"stdin_fd", a.stdin_fd},
         {"stdout_fd", a.stdout_fd},
         {"stderr_fd", a.stderr_fd},
         {"started_at", a.started_at}};
  j["daemon"] = a.daemon ? to_json(*a.daemon) : json(nullptr);
  return j;
}

MonitorBootArgs boot_args_from_json(const json& j) {
  try {
    MonitorBootArgs a;
    a.container_id = ContainerId::parse(j.at("container_id").get<std::string>());
    a.state_dir = j.at("state_dir").get<std::string>();
    a.mode = supervision_mode_from_string(j.at("mode").get<std::string>());
    a.spec = spec_from_json(j.at("spec"));
    a.signal_plan = SignalPlan::with_exit_notify(j.at("exit_notify").get<int>());
    a.handshake_timeout_ms = j.value("handshake_timeout_ms", std::int64_t{5000});
    a.max_log_bytes = j.value("max_log_bytes", std::int64_t{0});
    a.intermediate_pid = j.value("intermediate_pid", 0);
    a.container = identity_from_json(j.at("container"));
    a.stdin_fd = j.at("stdin_fd").get<int>();
    a.stdout_fd = j.at("stdout_fd").get<int>();
    a.stderr_fd = j.at("stderr_fd").get<int>();
    a.started_at = j.value("started_at", std::int64_t{0});
    if (j.contains("daemon") && !j["daemon"].is_null()) a.daemon = identity_from_json(j["daemon"]);
    return a;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("monitor boot args: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Launch: the pre-exec half runs in forked children of the daemon.

namespace {

void report_launch_failure(const StateDirLayout& layout, const ContainerId& id, ErrorCode code,
                           const std::string& message) {
  try {
    request(layout.daemon_socket(),
            json{{"op", "launch_failed"},
                 {"id", id.str()},
                 {"error", to_string(code)},
                 {"message", message}},
            2000ms);
  } catch (...) {
  }
}

[[noreturn]] void become_monitor(const LaunchRequest& req, int intermediate, int daemon_pid) {
  const auto& boot = req.boot;
  StateDirLayout layout{boot.state_dir};
  ::setsid();
  if (boot.mode == SupervisionMode::coupled) {
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    if (::getppid() != daemon_pid) ::_exit(1);
  }
  int devnull = ::open("/dev/null", O_RDONLY | O_CLOEXEC);
  if (devnull >= 0) ::dup2(devnull, 0);

  SandboxOptions opts;
  opts.die_with_parent = boot.mode == SupervisionMode::coupled;
  opts.hostname = boot.container_id.str();

  SandboxHandle h;
  try {
    h = spawn(boot.spec, opts);
  } catch (const Error& e) {
    report_launch_failure(layout, boot.container_id, e.code(), e.what());
    if (intermediate > 0) ::kill(intermediate, SIGKILL);
    ::_exit(1);
  }

  MonitorBootArgs next = boot;
  next.intermediate_pid = intermediate;
  next.container = h.container;
  next.started_at = h.started_at;
  next.stdin_fd = h.stdin_w.release();
  next.stdout_fd = h.stdout_r.release();
  next.stderr_fd = h.stderr_r.release();
  set_cloexec(next.stdin_fd, false);
  set_cloexec(next.stdout_fd, false);
  set_cloexec(next.stderr_fd, false);
  const std::string arg = to_json(next).dump();
  const std::string exe = req.monitor_exe.string();
  ::execl(exe.c_str(), exe.c_str(), kMonitorSubcommand, arg.c_str(), static_cast<char*>(nullptr));

  const int err = errno;
  ::kill(-h.pgid, SIGKILL);
  int st = 0;
  ::waitpid(h.container.pid, &st, 0);
  report_launch_failure(layout, boot.container_id, ErrorCode::spawn_error,
                        "exec monitor " + exe + ": " + std::strerror(err));
  if (intermediate > 0) ::kill(intermediate, SIGKILL);
  ::_exit(1);
}

}  // namespace

int launch_monitor(const LaunchRequest& req) {
  const int daemon_pid = ::getpid();
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::spawn_error, std::string("fork: ") + std::strerror(errno));
  if (pid > 0) return pid;

  reset_signal_state();
  close_fds_except({});
  if (req.boot.mode == SupervisionMode::decoupled) {
    // Intermediate: parks until the monitor kills it, so the monitor is
    // orphaned away from the daemon.
    const pid_t grandchild = ::fork();
    if (grandchild < 0) ::_exit(1);
    if (grandchild == 0) become_monitor(req, static_cast<int>(::getppid()), daemon_pid);
    int st = 0;
    while (::waitpid(grandchild, &st, 0) < 0 && errno == EINTR) {
    }
    ::_exit(1);
  }
  become_monitor(req, 0, daemon_pid);
}

// ---------------------------------------------------------------------------
// Runtime: the exec'd monitor image.

namespace {

// Queue in front of a pipe write end that may not keep up.
class PipeSink {
 public:
  PipeSink(EventLoop& loop, Fd fd) : loop_(loop), fd_(std::move(fd)) {
    if (fd_) set_nonblocking(fd_.get());
  }
  ~PipeSink() { shut(); }

  void write(std::string_view data) {
    if (!fd_ || closing_) return;
    queue_.append(data);
    flush();
  }
  void close_when_drained() {
    closing_ = true;
    if (queue_.empty()) shut();
  }
  bool open() const { return static_cast<bool>(fd_); }

 private:
  void flush() {
    while (fd_ && !queue_.empty()) {
      ssize_t n = ::write(fd_.get(), queue_.data(), queue_.size());
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN) break;
        shut();  // reader gone
        return;
      }
      queue_.erase(0, static_cast<std::size_t>(n));
    }
    if (!fd_) return;
    if (queue_.empty()) {
      loop_.unwatch(fd_.get());
      watching_ = false;
      if (closing_) shut();
    } else if (!watching_) {
      watching_ = true;
      loop_.watch(fd_.get(), POLLOUT, [this](short) { flush(); });
    }
  }
  void shut() {
    if (!fd_) return;
    loop_.unwatch(fd_.get());
    fd_.reset();
    queue_.clear();
  }

  EventLoop& loop_;
  Fd fd_;
  std::string queue_;
  bool closing_ = false;
  bool watching_ = false;
};

// Reads a pipe until EOF, handing chunks to a callback.
void pump_pipe(EventLoop& loop, Fd& fd, std::function<void(std::string_view)> on_chunk,
               std::function<void()> on_eof) {
  set_nonblocking(fd.get());
  const int raw = fd.get();
  loop.watch(raw, POLLIN, [&loop, &fd, raw, on_chunk, on_eof](short) {
    char buf[65536];
    while (true) {
      ssize_t n = ::read(raw, buf, sizeof(buf));
      if (n > 0) {
        on_chunk(std::string_view(buf, static_cast<std::size_t>(n)));
        if (static_cast<std::size_t>(n) < sizeof(buf)) return;
        continue;
      }
      if (n < 0 && errno == EINTR) continue;
      if (n < 0 && errno == EAGAIN) return;
      loop.unwatch(raw);
      fd.reset();
      on_eof();
      return;
    }
  });
}

class Monitor {
 public:
  explicit Monitor(MonitorBootArgs args)
      : args_(std::move(args)), layout_{args_.state_dir}, id_(args_.container_id) {}

  int run();

 private:
  enum class Kind { pending, attach, logs, wait, exec };

  struct ExecSession;

  struct Client {
    std::shared_ptr<Connection> conn;
    Kind kind = Kind::pending;
    bool want_stdin = false;
    bool want_stdout = true;
    bool want_stderr = true;
    std::string line;
    FrameDecoder frames;
    std::shared_ptr<ExecSession> exec;
  };

  struct ExecSession {
    int pid = 0;
    std::unique_ptr<PipeSink> stdin_sink;
    Fd out;
    Fd err;
    std::optional<int> status;
    std::weak_ptr<Client> client;
    EventLoop::TimerId drain_timer = 0;
    bool finished = false;
  };

  void accept_clients();
  void on_client_data(const std::shared_ptr<Client>& c, std::string_view bytes);
  void dispatch(const std::shared_ptr<Client>& c, const json& req);
  void on_client_frames(const std::shared_ptr<Client>& c, std::string_view bytes);
  void start_exec(const std::shared_ptr<Client>& c, const json& req);
  void finish_exec(const std::shared_ptr<ExecSession>& s);

  void on_output(StreamTag tag, std::string_view chunk);
  void reap_children();
  void maybe_finalize();
  void finalize();
  void notify_daemon();
  bool handshake();
  std::string read_log() const;

  MonitorBootArgs args_;
  StateDirLayout layout_;
  ContainerId id_;
  EventLoop loop_;
  SandboxHandle sandbox_;
  std::unique_ptr<PipeSink> stdin_sink_;
  Fd log_fd_;
  std::int64_t log_bytes_ = 0;
  Fd listener_;
  std::list<std::shared_ptr<Client>> clients_;
  std::map<int, std::shared_ptr<ExecSession>> sessions_;

  std::optional<ExitReport> exit_;
  bool out_eof_ = false;
  bool err_eof_ = false;
  bool finalized_ = false;
  EventLoop::TimerId drain_timer_ = 0;
  int exit_code_ = 0;
};

bool Monitor::handshake() {
  auto self = identity_of(::getpid());
  json msg{{"op", "launched"},
           {"id", id_.str()},
           {"monitor", self ? to_json(*self) : json(nullptr)},
           {"container", to_json(args_.container)},
           {"socket", layout_.monitor_socket(id_).string()},
           {"started_at", args_.started_at}};
  try {
    json reply = request(layout_.daemon_socket(), msg,
                         std::chrono::milliseconds(args_.handshake_timeout_ms));
    if (!reply.value("ok", false)) {
      spdlog::warn("monitor {}: daemon rejected launch: {}", id_.str(), reply.dump());
      return false;
    }
  } catch (const Error& e) {
    // A dead daemon is not fatal; a restarted one reconciles from disk.
    spdlog::warn("monitor {}: launch handshake failed: {}", id_.str(), e.what());
  }
  return true;
}

std::string Monitor::read_log() const {
  std::ifstream in(layout_.log_file(id_), std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void Monitor::on_output(StreamTag tag, std::string_view chunk) {
  const std::string frame = encode_frame(tag, chunk);
  if (log_fd_ && (args_.max_log_bytes <= 0 ||
                  log_bytes_ + static_cast<std::int64_t>(frame.size()) <= args_.max_log_bytes)) {
    if (try_write_all(log_fd_.get(), frame)) log_bytes_ += static_cast<std::int64_t>(frame.size());
  }
  for (auto& c : std::list<std::shared_ptr<Client>>(clients_)) {
    if (c->kind == Kind::logs ||
        (c->kind == Kind::attach &&
         ((tag == StreamTag::stdout_ && c->want_stdout) ||
          (tag == StreamTag::stderr_ && c->want_stderr)))) {
      c->conn->send(frame);
    }
  }
}

void Monitor::accept_clients() {
  while (true) {
    int fd = ::accept4(listener_.get(), nullptr, nullptr, SOCK_CLOEXEC | SOCK_NONBLOCK);
    if (fd < 0) return;
    auto conn = std::make_shared<Connection>(loop_, Fd(fd));
    if (clients_.size() >= static_cast<std::size_t>(kMonitorMaxClients)) {
      conn->start([](std::string_view) {}, [] {});
      conn->send_json(make_error(ErrorCode::too_many_connections,
                                 "monitor serves at most 16 concurrent clients"));
      conn->close_after_flush();
      continue;
    }
    auto client = std::make_shared<Client>();
    client->conn = conn;
    clients_.push_back(client);
    std::weak_ptr<Client> weak = client;
    conn->start(
        [this, weak](std::string_view bytes) {
          if (auto c = weak.lock()) on_client_data(c, bytes);
        },
        [this, weak] {
          if (auto c = weak.lock()) {
            clients_.remove(c);
            if (c->exec && c->exec->stdin_sink) c->exec->stdin_sink->close_when_drained();
          }
        });
  }
}

void Monitor::on_client_data(const std::shared_ptr<Client>& c, std::string_view bytes) {
  if (c->kind != Kind::pending) {
    on_client_frames(c, bytes);
    return;
  }
  c->line.append(bytes);
  auto nl = c->line.find('\n');
  if (nl == std::string::npos) {
    if (c->line.size() > 1 << 20) c->conn->close();
    return;
  }
  std::string rest = c->line.substr(nl + 1);
  json req = json::parse(c->line.substr(0, nl), nullptr, false);
  c->line.clear();
  if (req.is_discarded() || !req.is_object()) {
    c->conn->send_json(make_error(ErrorCode::parse_error, "request is not a JSON object"));
    c->conn->close_after_flush();
    return;
  }
  dispatch(c, req);
  if (!rest.empty() && (c->kind == Kind::attach || c->kind == Kind::exec)) {
    on_client_frames(c, rest);
  }
}

void Monitor::on_client_frames(const std::shared_ptr<Client>& c, std::string_view bytes) {
  try {
    c->frames.feed(bytes);
    while (auto f = c->frames.next()) {
      if (f->tag != StreamTag::stdin_) continue;
      PipeSink* sink = nullptr;
      if (c->kind == Kind::attach && c->want_stdin) sink = stdin_sink_.get();
      if (c->kind == Kind::exec && c->exec) sink = c->exec->stdin_sink.get();
      if (!sink) continue;
      if (f->payload.empty()) {
        sink->close_when_drained();
      } else {
        sink->write(f->payload);
      }
    }
  } catch (const Error& e) {
    c->conn->close();
  }
}

void Monitor::dispatch(const std::shared_ptr<Client>& c, const json& req) {
  const std::string op = req.value("op", "");
  auto& conn = *c->conn;
  if (op == "attach") {
    if (exit_) {
      conn.send_json(make_error(ErrorCode::not_running, "container has exited"));
      conn.close_after_flush();
      return;
    }
    c->kind = Kind::attach;
    c->want_stdin = req.value("stdin", false);
    c->want_stdout = req.value("stdout", true);
    c->want_stderr = req.value("stderr", true);
    conn.send_json(make_ok());
    if (req.value("logs", false)) {
      for (const auto& f : decode_frames(read_log())) {
        if ((f.tag == StreamTag::stdout_ && c->want_stdout) ||
            (f.tag == StreamTag::stderr_ && c->want_stderr)) {
          conn.send(encode_frame(f));
        }
      }
    }
    return;
  }
  if (op == "logs") {
    conn.send_json(make_ok());
    conn.send(read_log());
    if (req.value("follow", false) && !finalized_) {
      c->kind = Kind::logs;
      conn.pause_reading();
    } else {
      if (exit_ && finalized_) conn.send(encode_frame(StreamTag::exit_notice, encode_exit_line(*exit_)));
      conn.close_after_flush();
    }
    return;
  }
  if (op == "wait") {
    if (finalized_) {
      conn.send_json(json{{"ok", true}, {"exit", encode_exit_line(*exit_)}});
      conn.close_after_flush();
      return;
    }
    c->kind = Kind::wait;
    conn.pause_reading();
    return;
  }
  if (op == "exec") {
    start_exec(c, req);
    return;
  }
  if (op == "status") {
    json j = make_ok();
    j["id"] = id_.str();
    j["container"] = to_json(args_.container);
    j["exited"] = exit_.has_value();
    conn.send_json(j);
    conn.close_after_flush();
    return;
  }
  conn.send_json(make_error(ErrorCode::unknown_op, op));
  conn.close_after_flush();
}

void Monitor::start_exec(const std::shared_ptr<Client>& c, const json& req) {
  auto& conn = *c->conn;
  if (exit_) {
    conn.send_json(make_error(ErrorCode::not_running, "container has exited"));
    conn.close_after_flush();
    return;
  }
  std::vector<std::string> argv = req.value("argv", std::vector<std::string>{});
  std::vector<std::string> env = container_environment(args_.spec);
  for (const auto& e : req.value("env", std::vector<std::string>{})) env.push_back(e);

  ExecHandle h;
  try {
    h = spawn_in_sandbox(sandbox_, argv, env);
  } catch (const Error& e) {
    conn.send_json(make_error(e.code(), e.what()));
    conn.close_after_flush();
    return;
  }
  auto s = std::make_shared<ExecSession>();
  s->pid = h.pid;
  s->stdin_sink = std::make_unique<PipeSink>(loop_, std::move(h.stdin_w));
  s->out = std::move(h.stdout_r);
  s->err = std::move(h.stderr_r);
  s->client = c;
  c->kind = Kind::exec;
  c->exec = s;
  sessions_[s->pid] = s;
  conn.send_json(json{{"ok", true}, {"pid", s->pid}});

  std::weak_ptr<ExecSession> weak = s;
  auto forward = [weak](StreamTag tag) {
    return [weak, tag](std::string_view chunk) {
      auto s = weak.lock();
      if (!s) return;
      if (auto c = s->client.lock()) c->conn->send(encode_frame(tag, chunk));
    };
  };
  auto on_eof = [this, weak] {
    if (auto s = weak.lock()) {
      if (s->status && !s->out && !s->err) finish_exec(s);
    }
  };
  pump_pipe(loop_, s->out, forward(StreamTag::stdout_), on_eof);
  pump_pipe(loop_, s->err, forward(StreamTag::stderr_), on_eof);
}

void Monitor::finish_exec(const std::shared_ptr<ExecSession>& s) {
  if (s->finished) return;
  s->finished = true;
  if (s->drain_timer) loop_.cancel(s->drain_timer);
  if (s->out) {
    loop_.unwatch(s->out.get());
    s->out.reset();
  }
  if (s->err) {
    loop_.unwatch(s->err.get());
    s->err.reset();
  }
  s->stdin_sink.reset();
  if (auto c = s->client.lock()) {
    ExitReport r = report_from_status(id_, *s->status, now_epoch_ms());
    c->conn->send(encode_frame(StreamTag::exit_notice, encode_exit_line(r)));
    c->conn->close_after_flush();
  }
  sessions_.erase(s->pid);
}

void Monitor::reap_children() {
  while (true) {
    int status = 0;
    pid_t pid = ::waitpid(-1, &status, WNOHANG);
    if (pid <= 0) return;
    if (pid == args_.container.pid) {
      exit_ = report_from_status(id_, status, now_epoch_ms());
      spdlog::debug("monitor {}: container exited: {}", id_.str(), exit_->as_state().describe());
      // Give the pipes a moment to reach EOF; descendants may hold them open.
      drain_timer_ = loop_.after(200ms, [this] { finalize(); });
      maybe_finalize();
      continue;
    }
    auto it = sessions_.find(pid);
    if (it != sessions_.end()) {
      auto s = it->second;
      s->status = status;
      if (!s->out && !s->err) {
        finish_exec(s);
      } else {
        std::weak_ptr<ExecSession> weak = s;
        s->drain_timer = loop_.after(200ms, [this, weak] {
          if (auto s = weak.lock()) finish_exec(s);
        });
      }
    }
  }
}

void Monitor::maybe_finalize() {
  if (exit_ && out_eof_ && err_eof_) finalize();
}

void Monitor::notify_daemon() {
  // daemon.pid is re-read: a restarted daemon replaces the boot-time one.
  auto current = read_daemon_pid(layout_);
  if (!current || !is_alive(*current)) return;
  ::kill(current->pid, args_.signal_plan.exit_notify);
}

void Monitor::finalize() {
  if (finalized_) return;
  finalized_ = true;
  if (drain_timer_) loop_.cancel(drain_timer_);
  const ExitReport report = *exit_;

  bool written = false;
  for (int attempt = 0; attempt < 2 && !written; ++attempt) {
    try {
      write_exit_report(layout_, report);
      written = true;
    } catch (const Error& e) {
      spdlog::error("monitor {}: writing exit file: {}", id_.str(), e.what());
      if (attempt == 0) std::this_thread::sleep_for(100ms);
    }
  }
  if (!written) exit_code_ = 1;
  if (written) notify_daemon();

  const std::string line = encode_exit_line(report);
  const std::string notice = encode_frame(StreamTag::exit_notice, line);
  for (auto& c : std::list<std::shared_ptr<Client>>(clients_)) {
    switch (c->kind) {
      case Kind::attach:
      case Kind::logs:
        c->conn->send(notice);
        c->conn->close_after_flush();
        break;
      case Kind::wait:
        c->conn->send_json(json{{"ok", true}, {"exit", line}});
        c->conn->close_after_flush();
        break;
      case Kind::pending:
      case Kind::exec:
        break;
    }
  }
  if (listener_) {
    loop_.unwatch(listener_.get());
    listener_.reset();
  }
  ::unlink(layout_.monitor_socket(id_).c_str());
  stdin_sink_.reset();

  // Let queued frames reach their readers, then leave.
  const auto deadline = EventLoop::Clock::now() + 1s;
  loop_.every(10ms, [this, deadline] {
    bool pending = false;
    for (auto& c : clients_) pending = pending || !c->conn->closed();
    if (!pending || EventLoop::Clock::now() > deadline) loop_.stop();
  });
}

int Monitor::run() {
  ::umask(077);
  if (::chdir("/") != 0) {
    spdlog::warn("monitor {}: chdir /: {}", id_.str(), std::strerror(errno));
  }
  ::signal(SIGPIPE, SIG_IGN);
  if (args_.mode == SupervisionMode::coupled) {
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    if (args_.daemon && ::getppid() != args_.daemon->pid) return 1;
  }

  sandbox_.container = args_.container;
  sandbox_.pgid = args_.container.pid;
  sandbox_.isolation = args_.spec.isolation;
  sandbox_.started_at = args_.started_at;
  sandbox_.stdin_w = Fd(args_.stdin_fd);
  sandbox_.stdout_r = Fd(args_.stdout_fd);
  sandbox_.stderr_r = Fd(args_.stderr_fd);
  set_cloexec(args_.stdin_fd);
  set_cloexec(args_.stdout_fd);
  set_cloexec(args_.stderr_fd);

  log_fd_.reset(::open(layout_.log_file(id_).c_str(),
                       O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0600));
  if (!log_fd_) spdlog::warn("monitor {}: cannot open log: {}", id_.str(), std::strerror(errno));
  struct stat st {};
  if (log_fd_ && ::fstat(log_fd_.get(), &st) == 0) log_bytes_ = st.st_size;

  try {
    listener_ = listen_unix(layout_.monitor_socket(id_), 16);
    set_nonblocking(listener_.get());
  } catch (const Error& e) {
    spdlog::error("monitor {}: {}", id_.str(), e.what());
  }

  loop_.on_signal(SIGCHLD, [this] { reap_children(); });

  if (!handshake()) {
    // The daemon gave up on this launch; take the container down so its
    // exit is still reported through the normal path.
    signal_group(sandbox_.pgid, SIGKILL);
  }
  if (args_.intermediate_pid > 0 && ::getppid() == args_.intermediate_pid) {
    ::kill(args_.intermediate_pid, SIGKILL);
  }

  stdin_sink_ = std::make_unique<PipeSink>(loop_, std::move(sandbox_.stdin_w));
  pump_pipe(
      loop_, sandbox_.stdout_r, [this](std::string_view b) { on_output(StreamTag::stdout_, b); },
      [this] {
        out_eof_ = true;
        maybe_finalize();
      });
  pump_pipe(
      loop_, sandbox_.stderr_r, [this](std::string_view b) { on_output(StreamTag::stderr_, b); },
      [this] {
        err_eof_ = true;
        maybe_finalize();
      });
  if (listener_) {
    loop_.watch(listener_.get(), POLLIN, [this](short) { accept_clients(); });
  }
  // The container may have exited before SIGCHLD was being listened for.
  loop_.post([this] { reap_children(); });

  loop_.run();
  return exit_code_;
}

}  // namespace

int monitor_main(const MonitorBootArgs& args) {
  Monitor m(args);
  return m.run();
}

}  // namespace hydra
