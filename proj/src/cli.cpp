#include "hydra/cli.hpp"

#include <atomic>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "hydra/client.hpp"
#include "hydra/daemon.hpp"
#include "hydra/sandbox.hpp"

namespace hydra {

int exit_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::transport_error:
    case ErrorCode::io_error:
    case ErrorCode::parse_error:
    case ErrorCode::handshake_timeout:
    case ErrorCode::spawn_error:
    case ErrorCode::signal_failure:
    case ErrorCode::permission_denied:
    case ErrorCode::too_many_connections:
    case ErrorCode::truncated_stream:
    case ErrorCode::frame_too_large:
    case ErrorCode::bad_tag:
      return 2;
    default:
      return 1;
  }
}

namespace {

std::atomic<int> g_interrupts{0};

extern "C" void on_sigint(int) { g_interrupts.fetch_add(1); }

void install_sigint() {
  struct sigaction sa {};
  sa.sa_handler = on_sigint;
  sigemptyset(&sa.sa_mask);
  ::sigaction(SIGINT, &sa, nullptr);
}

void write_out(StreamTag tag, std::string_view bytes) {
  const int fd = tag == StreamTag::stderr_ ? 2 : 1;
  try_write_all(fd, bytes);
}

void print_json(const json& j) { std::cout << j.dump() << std::endl; }

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

std::string describe_exit(const ContainerRecord& r) {
  std::string s = r.state.describe();
  if (r.exit_unknown) s += " (unknown)";
  return s;
}

// The command after `--`, or everything left over.
std::vector<std::string> trailing_command(std::vector<std::string> rest) {
  if (!rest.empty() && rest.front() == "--") rest.erase(rest.begin());
  return rest;
}

struct Globals {
  std::string state_dir;
  bool json_out = false;
};

DaemonClient client_for(const Globals& g) { return DaemonClient(fs::path(g.state_dir)); }

int status_of(const ExitReport& r) { return r.shell_status(); }

int status_of_record(const ContainerRecord& r) {
  if (r.state.exit_code()) return *r.state.exit_code();
  if (r.state.term_signal()) return 128 + *r.state.term_signal();
  return 1;
}

// ---- daemon ----

struct DaemonStartOpts {
  bool foreground = false;
  std::string mode = "decoupled";
  std::int64_t poll_interval_ms = 2000;
  std::int64_t handshake_timeout_ms = 5000;
  int exit_signal = 0;
  std::string monitor_exe;
  std::optional<std::uint64_t> id_seed;
  std::int64_t max_log_bytes = 0;
};

DaemonConfig make_config(const Globals& g, const DaemonStartOpts& o) {
  DaemonConfig cfg;
  cfg.state_dir = fs::absolute(g.state_dir);
  cfg.mode = supervision_mode_from_string(o.mode);
  cfg.poll_interval_ms = o.poll_interval_ms;
  cfg.handshake_timeout_ms = o.handshake_timeout_ms;
  if (o.exit_signal > 0) cfg.signal_plan = SignalPlan::with_exit_notify(o.exit_signal);
  if (!o.monitor_exe.empty()) cfg.monitor_exe = fs::absolute(o.monitor_exe);
  cfg.id_seed = o.id_seed;
  cfg.max_log_bytes = o.max_log_bytes;
  cfg.validate();
  return cfg;
}

int daemon_start(const Globals& g, const DaemonStartOpts& o) {
  DaemonConfig cfg = make_config(g, o);
  if (o.foreground) return run_daemon(cfg);

  const StateDirLayout layout = resolve_layout(cfg.state_dir);
  DaemonClient client(cfg.state_dir);
  if (client.reachable()) {
    throw Error(ErrorCode::already_running, "a daemon already serves " + cfg.state_dir.string());
  }
  Pipe ready = make_pipe();
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::spawn_error, std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    ::setsid();
    if (::fork() != 0) ::_exit(0);
    ready.read.reset();
    int devnull = ::open("/dev/null", O_RDONLY);
    int log = ::open(layout.daemon_log().c_str(), O_WRONLY | O_CREAT | O_APPEND, 0600);
    if (devnull >= 0) ::dup2(devnull, 0);
    if (log >= 0) {
      ::dup2(log, 1);
      ::dup2(log, 2);
    }
    int rc = 1;
    try {
      rc = run_daemon(cfg);
    } catch (const std::exception& e) {
      spdlog::error("{}", e.what());
    }
    ::_exit(rc);
  }
  ready.write.reset();
  int st = 0;
  ::waitpid(pid, &st, 0);
  // The daemon keeps the write end open; EOF means it died.
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(15);
  while (std::chrono::steady_clock::now() < deadline) {
    if (client.reachable()) {
      auto status = client.call(json{{"op", "status"}});
      if (g.json_out) {
        print_json(status);
      } else {
        std::cout << "daemon started (pid " << status.value("pid", 0) << ", "
                  << status.value("mode", "") << " mode)" << std::endl;
      }
      return 0;
    }
    pollfd p{ready.read.get(), POLLIN, 0};
    if (::poll(&p, 1, 20) > 0) {
      char c;
      if (::read(ready.read.get(), &c, 1) == 0) {
        throw Error(ErrorCode::transport_error,
                    "daemon exited during startup; see " + layout.daemon_log().string());
      }
    }
  }
  throw Error(ErrorCode::transport_error,
              "daemon did not come up; see " + layout.daemon_log().string());
}

int daemon_stop(const Globals& g) {
  DaemonClient client = client_for(g);
  auto pid = read_daemon_pid(client.layout());
  client.call(json{{"op", "shutdown"}});
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
  while (pid && is_alive(*pid) && std::chrono::steady_clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  if (!g.json_out) std::cout << "daemon stopped" << std::endl;
  return 0;
}

int daemon_status(const Globals& g) {
  json s = client_for(g).call(json{{"op", "status"}});
  if (g.json_out) {
    print_json(s);
  } else {
    std::cout << fmt::format("pid {}  mode {}  containers {}  restore {:.3f} ms  state dir {}",
                             s.value("pid", 0), s.value("mode", ""), s.value("containers", 0),
                             s.value("restore_ms", 0.0), s.value("state_dir", ""))
              << std::endl;
  }
  return 0;
}

// ---- containers ----

struct RunOpts {
  bool detach = false;
  bool interactive = false;
  bool isolate = false;
  bool sigint_kills = false;
  bool no_restart = false;
  std::vector<std::string> env;
  std::string workdir;
  std::optional<std::int64_t> stop_grace_ms;
};

// Streams a container's output until it exits and returns its status.
int follow_container(const DaemonClient& client, const ContainerId& id, const json& record,
                     bool interactive, bool sigint_kills) {
  const std::int64_t grace = record.at("spec").value("stop_grace_ms", std::int64_t{10000});
  std::optional<std::thread> stopper;
  auto on_tick = [&] {
    static int handled = 0;
    const int n = g_interrupts.load();
    if (n == handled) return;
    handled = n;
    const bool kill = sigint_kills || n > 1;
    json req{{"op", kill ? "kill" : "stop"}, {"id", id.str()}};
    if (!kill) req["grace_ms"] = grace;
    if (stopper) stopper->detach();
    stopper.emplace([client, req] {
      try {
        client.call(req);
      } catch (const Error&) {
      }
    });
  };

  std::optional<ExitReport> exit;
  try {
    StreamSession s = open_stream(fs::path(record.at("socket").get<std::string>()),
                                  json{{"op", "attach"},
                                       {"stdin", true},
                                       {"stdout", true},
                                       {"stderr", true},
                                       {"logs", true}});
    check_reply(s.reply);
    if (!interactive) try_write_all(s.fd.get(), encode_frame(StreamTag::stdin_, ""));
    exit = run_session(s, interactive ? 0 : -1, write_out, on_tick).exit;
  } catch (const Error&) {
    // Too late to attach: replay what was logged.
    StreamSession s = open_stream(client.layout().daemon_socket(),
                                  json{{"op", "logs"}, {"id", id.str()}, {"follow", false}});
    check_reply(s.reply);
    pump_frames(s.fd.get(), s.carry, write_out);
  }
  if (stopper) stopper->join();
  if (exit) return status_of(*exit);
  json w = client.call(json{{"op", "wait"}, {"id", id.str()}});
  return status_of_record(record_from_json(w.at("record")));
}

int cmd_run(const Globals& g, const RunOpts& o, const std::vector<std::string>& command) {
  if (command.empty()) throw Error(ErrorCode::invalid_argument, "run needs a command");
  ContainerSpec spec;
  spec.command = command;
  spec.env = o.env;
  if (!o.workdir.empty()) spec.working_dir = o.workdir;
  spec.isolation = o.isolate ? Isolation::namespaces : Isolation::none;
  spec.restart_on_monitor_loss = !o.no_restart;
  if (o.stop_grace_ms) spec.stop_grace_ms = *o.stop_grace_ms;
  spec.validate();

  DaemonClient client = client_for(g);
  if (!o.detach) install_sigint();
  json reply = client.run(spec);
  const ContainerId id = ContainerId::parse(reply.at("id").get<std::string>());
  if (o.detach) {
    if (g.json_out) {
      print_json(reply.at("record"));
    } else {
      std::cout << id.str() << std::endl;
    }
    return 0;
  }
  return follow_container(client, id, reply.at("record"), o.interactive, o.sigint_kills);
}

int cmd_simple(const Globals& g, const std::string& op, const std::string& id_arg,
               json extra = json::object()) {
  DaemonClient client = client_for(g);
  const ContainerId id = client.resolve(id_arg);
  json req{{"op", op}, {"id", id.str()}};
  for (auto& [k, v] : extra.items()) req[k] = v;
  json reply = client.call(req);
  if (g.json_out) {
    print_json(reply);
  } else {
    std::cout << id.str() << std::endl;
  }
  return 0;
}

int cmd_wait(const Globals& g, const std::string& id_arg) {
  DaemonClient client = client_for(g);
  const ContainerId id = client.resolve(id_arg);
  json reply = client.call(json{{"op", "wait"}, {"id", id.str()}});
  const ContainerRecord rec = record_from_json(reply.at("record"));
  if (g.json_out) {
    json j{{"id", id.str()}, {"status", status_of_record(rec)}, {"exit_unknown", rec.exit_unknown}};
    j["exit_code"] = rec.state.exit_code() ? json(*rec.state.exit_code()) : json(nullptr);
    j["term_signal"] = rec.state.term_signal() ? json(*rec.state.term_signal()) : json(nullptr);
    print_json(j);
  } else {
    std::cout << status_of_record(rec) << std::endl;
  }
  return 0;
}

int cmd_ps(const Globals& g, bool all) {
  DaemonClient client = client_for(g);
  json reply = client.call(json{{"op", "ps"}});
  json list = json::array();
  for (const auto& j : reply.at("containers")) {
    const ContainerRecord rec = record_from_json(j);
    if (!all && !rec.state.is_active() && rec.state.kind() != StateKind::created) continue;
    list.push_back(j);
  }
  if (g.json_out) {
    print_json(list);
    return 0;
  }
  std::cout << fmt::format("{:<16}  {:<22}  {:>7}  {:>8}  {}\n", "CONTAINER ID", "STATUS", "PID",
                           "RESTARTS", "COMMAND");
  for (const auto& j : list) {
    const ContainerRecord rec = record_from_json(j);
    std::cout << fmt::format("{:<16}  {:<22}  {:>7}  {:>8}  {}\n", rec.id.str(), describe_exit(rec),
                             rec.container ? std::to_string(rec.container->pid) : "-",
                             rec.restart_count, join(rec.spec.command));
  }
  std::cout.flush();
  return 0;
}

int cmd_top(const Globals& g, const std::string& id_arg) {
  DaemonClient client = client_for(g);
  json reply = client.call(json{{"op", "top"}, {"id", client.resolve(id_arg).str()}});
  if (g.json_out) {
    print_json(reply.at("processes"));
    return 0;
  }
  std::cout << fmt::format("{:>7}  {:>7}  {:<4}  {:>10}  {:>9}  {}\n", "PID", "PPID", "STAT", "RSS",
                           "CPU(t)", "COMMAND");
  for (const auto& p : reply.at("processes")) {
    std::cout << fmt::format("{:>7}  {:>7}  {:<4}  {:>10}  {:>9}  {}\n", p.value("pid", 0),
                             p.value("ppid", 0), p.value("state", "?"),
                             p.value("rss_bytes", std::int64_t{0}),
                             p.value("cpu_ticks", std::uint64_t{0}), p.value("command", ""));
  }
  std::cout.flush();
  return 0;
}

int cmd_stats(const Globals& g, const std::string& id_arg) {
  DaemonClient client = client_for(g);
  json reply = client.call(json{{"op", "stats"}, {"id", client.resolve(id_arg).str()}});
  if (g.json_out) {
    reply.erase("ok");
    print_json(reply);
    return 0;
  }
  std::cout << fmt::format("{:>8}  {:>12}  {:>5}\n", "CPU %", "RSS", "PIDS")
            << fmt::format("{:>8.2f}  {:>12}  {:>5}\n", reply.value("cpu_percent", 0.0),
                           reply.value("rss_bytes", std::int64_t{0}), reply.value("pids", 0));
  std::cout.flush();
  return 0;
}

int cmd_logs(const Globals& g, const std::string& id_arg, bool follow) {
  DaemonClient client = client_for(g);
  const ContainerId id = client.resolve(id_arg);
  StreamSession s = open_stream(client.layout().daemon_socket(),
                                json{{"op", "logs"}, {"id", id.str()}, {"follow", follow}});
  check_reply(s.reply);
  if (s.reply.contains("socket")) {
    s = open_stream(fs::path(s.reply["socket"].get<std::string>()),
                    json{{"op", "logs"}, {"follow", true}});
    check_reply(s.reply);
  }
  pump_frames(s.fd.get(), s.carry, write_out);
  return 0;
}

int cmd_attach(const Globals& g, const std::string& id_arg, bool no_stdin) {
  DaemonClient client = client_for(g);
  const ContainerId id = client.resolve(id_arg);
  json reply = client.call(json{{"op", "attach"}, {"id", id.str()}});
  StreamSession s = open_stream(fs::path(reply.at("socket").get<std::string>()),
                                json{{"op", "attach"}, {"stdin", !no_stdin}, {"stdout", true},
                                     {"stderr", true}});
  check_reply(s.reply);
  StreamEnd end = run_session(s, no_stdin ? -1 : 0, write_out);
  if (end.exit) return status_of(*end.exit);
  return 0;
}

int cmd_exec(const Globals& g, const std::string& id_arg, bool interactive,
             const std::vector<std::string>& env, const std::vector<std::string>& command) {
  if (command.empty()) throw Error(ErrorCode::invalid_argument, "exec needs a command");
  DaemonClient client = client_for(g);
  const ContainerId id = client.resolve(id_arg);
  json reply = client.call(json{{"op", "exec"}, {"id", id.str()}});
  StreamSession s = open_stream(fs::path(reply.at("socket").get<std::string>()),
                                json{{"op", "exec"}, {"argv", command}, {"env", env}});
  check_reply(s.reply);
  if (!interactive) try_write_all(s.fd.get(), encode_frame(StreamTag::stdin_, ""));
  StreamEnd end = run_session(s, interactive ? 0 : -1, write_out);
  if (end.exit) return status_of(*end.exit);
  return 2;
}

}  // namespace

int cli_main(int argc, char** argv) {
  ::signal(SIGPIPE, SIG_IGN);
  auto sink = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
  spdlog::set_default_logger(std::make_shared<spdlog::logger>("hydra", sink));
  if (const char* lvl = std::getenv("HYDRA_LOG"); lvl && *lvl) {
    spdlog::set_level(spdlog::level::from_str(lvl));
  }

  CLI::App app{"hydra: containers whose monitors outlive the daemon"};
  app.require_subcommand(1);
  // Leftovers of `run` and `exec` (the container command) land here.
  app.allow_extras();
  Globals g;
  g.state_dir = default_state_dir().string();
  app.add_option("--state-dir", g.state_dir, "State directory (env HYDRA_STATE_DIR)");
  app.add_flag("--json", g.json_out, "Machine-readable output");

  // daemon
  auto* daemon = app.add_subcommand("daemon", "Manage the daemon")->require_subcommand(1);
  DaemonStartOpts dopts;
  auto* dstart = daemon->add_subcommand("start", "Start the daemon");
  dstart->add_flag("--foreground", dopts.foreground, "Do not detach");
  dstart->add_option("--mode", dopts.mode, "coupled, lazy or decoupled")
      ->check(CLI::IsMember({"coupled", "lazy", "decoupled"}));
  dstart->add_option("--poll-interval-ms", dopts.poll_interval_ms, "Orphan poll period");
  dstart->add_option("--handshake-timeout-ms", dopts.handshake_timeout_ms,
                     "How long a launch may take");
  dstart->add_option("--exit-signal", dopts.exit_signal, "Signal monitors raise on exit");
  dstart->add_option("--monitor-exe", dopts.monitor_exe, "Binary to exec as the monitor");
  dstart->add_option("--id-seed", dopts.id_seed, "Seed for reproducible container ids");
  dstart->add_option("--max-log-bytes", dopts.max_log_bytes, "Per-container log cap (0 = none)");
  auto* dstop = daemon->add_subcommand("stop", "Stop the daemon");
  auto* dstatus = daemon->add_subcommand("status", "Show daemon status");

  // run
  RunOpts ropts;
  auto* run = app.add_subcommand("run", "Run a command in a new container");
  run->add_flag("-d,--detach", ropts.detach, "Print the id and return");
  run->add_flag("-i,--interactive", ropts.interactive, "Forward stdin");
  run->add_flag("--isolate", ropts.isolate, "PID, mount and UTS namespaces");
  run->add_flag("--sigint-kills", ropts.sigint_kills, "Ctrl-C kills instead of stopping");
  run->add_flag("--no-restart-on-monitor-loss", ropts.no_restart, "Do not reboot on monitor loss");
  run->add_option("-e,--env", ropts.env, "KEY=VALUE")->take_all()->expected(1);
  run->add_option("-w,--workdir", ropts.workdir, "Working directory (absolute)");
  run->add_option("--stop-grace-ms", ropts.stop_grace_ms, "Grace period for stop");
  run->prefix_command();

  std::string id;
  auto add_id_cmd = [&](const char* name, const char* help) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("id", id, "Container id or unique prefix")->required();
    return c;
  };
  auto* start = add_id_cmd("start", "Start an exited container again");
  std::optional<std::int64_t> grace;
  auto* stop = add_id_cmd("stop", "SIGTERM, then SIGKILL after the grace period");
  stop->add_option("-t,--grace-ms", grace, "Grace period in ms");
  int kill_signal = SIGKILL;
  auto* kill = add_id_cmd("kill", "Signal the container");
  kill->add_option("-s,--signal", kill_signal, "Signal number");
  auto* pause = add_id_cmd("pause", "Freeze the container");
  auto* unpause = add_id_cmd("unpause", "Resume a paused container");
  auto* restart = add_id_cmd("restart", "Stop and start again under the same id");
  restart->add_option("-t,--grace-ms", grace, "Grace period in ms");
  auto* wait = add_id_cmd("wait", "Block until exit and print the status");
  auto* top = add_id_cmd("top", "List the container's processes");
  auto* stats = add_id_cmd("stats", "CPU and memory usage");
  bool follow = false;
  auto* logs = add_id_cmd("logs", "Print the container's output");
  logs->add_flag("-f,--follow", follow, "Keep streaming");
  auto* rm = add_id_cmd("rm", "Remove an exited container");
  auto* inspect = add_id_cmd("inspect", "Print the container record");
  bool no_stdin = false;
  auto* attach = add_id_cmd("attach", "Bridge stdio to the container");
  attach->add_flag("--no-stdin", no_stdin, "Do not forward stdin");

  bool exec_interactive = false;
  std::vector<std::string> exec_env;
  auto* exec = app.add_subcommand("exec", "Run a command inside a running container");
  exec->add_flag("-i,--interactive", exec_interactive, "Forward stdin");
  exec->add_option("-e,--env", exec_env, "KEY=VALUE")->take_all()->expected(1);
  exec->prefix_command();

  bool ps_all = false;
  auto* ps = app.add_subcommand("ps", "List containers");
  ps->add_flag("-a,--all", ps_all, "Include exited containers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  // Where leftovers land depends on whether `--` was used.
  std::vector<std::string> extras = app.remaining();
  for (auto* sub : {run, exec}) {
    if (!sub->parsed()) continue;
    auto mine = sub->remaining();
    extras.insert(extras.begin(), mine.begin(), mine.end());
  }
  if (!extras.empty() && !run->parsed() && !exec->parsed()) {
    std::cerr << "unexpected arguments: " << join(extras) << "\n" << app.help() << std::endl;
    return 1;
  }

  try {
    if (dstart->parsed()) return daemon_start(g, dopts);
    if (dstop->parsed()) return daemon_stop(g);
    if (dstatus->parsed()) return daemon_status(g);
    if (run->parsed()) return cmd_run(g, ropts, trailing_command(extras));
    if (exec->parsed()) {
      std::vector<std::string> rest = trailing_command(extras);
      if (rest.empty()) throw Error(ErrorCode::invalid_argument, "exec needs a container id");
      const std::string target = rest.front();
      rest.erase(rest.begin());
      if (!rest.empty() && rest.front() == "--") rest.erase(rest.begin());
      return cmd_exec(g, target, exec_interactive, exec_env, rest);
    }
    if (start->parsed()) return cmd_simple(g, "start", id);
    if (stop->parsed()) {
      json extra = json::object();
      if (grace) extra["grace_ms"] = *grace;
      return cmd_simple(g, "stop", id, extra);
    }
    if (kill->parsed()) return cmd_simple(g, "kill", id, json{{"signal", kill_signal}});
    if (pause->parsed()) return cmd_simple(g, "pause", id);
    if (unpause->parsed()) return cmd_simple(g, "unpause", id);
    if (restart->parsed()) {
      json extra = json::object();
      if (grace) extra["grace_ms"] = *grace;
      return cmd_simple(g, "restart", id, extra);
    }
    if (rm->parsed()) return cmd_simple(g, "rm", id);
    if (wait->parsed()) return cmd_wait(g, id);
    if (top->parsed()) return cmd_top(g, id);
    if (stats->parsed()) return cmd_stats(g, id);
    if (logs->parsed()) return cmd_logs(g, id, follow);
    if (attach->parsed()) return cmd_attach(g, id, no_stdin);
    if (inspect->parsed()) {
      DaemonClient client = client_for(g);
      std::cout << client.record(client.resolve(id)).dump(2) << std::endl;
      return 0;
    }
    if (ps->parsed()) return cmd_ps(g, ps_all);
  } catch (const Error& e) {
    std::cerr << "hydra: " << e.what() << " [" << to_string(e.code()) << "]" << std::endl;
    return exit_status_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "hydra: " << e.what() << std::endl;
    return 2;
  }
  std::cerr << app.help() << std::endl;
  return 1;
}

}  // namespace hydra
