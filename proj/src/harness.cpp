#include "hydra/harness.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <sys/prctl.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "hydra/io.hpp"
#include "hydra/sandbox.hpp"

namespace hydra::bench {

using namespace std::chrono_literals;
using Clock = std::chrono::steady_clock;

namespace {

std::mutex g_owned_mu;
std::set<int> g_owned;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string mode_name(SupervisionMode m) { return std::string(to_string(m)); }

// fork + exec with the given stdio; -1 leaves a descriptor at /dev/null.
int spawn_process(const std::vector<std::string>& argv, int in_fd, int out_fd, int err_fd) {
  std::vector<char*> cargv;
  for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
  cargv.push_back(nullptr);
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::spawn_error, std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    reset_signal_state();
    ::prctl(PR_SET_CHILD_SUBREAPER, 0);
    const int devnull = ::open("/dev/null", O_RDWR);
    ::dup2(in_fd >= 0 ? in_fd : devnull, 0);
    ::dup2(out_fd >= 0 ? out_fd : devnull, 1);
    ::dup2(err_fd >= 0 ? err_fd : devnull, 2);
    close_fds_except({});
    ::execv(cargv[0], cargv.data());
    ::_exit(127);
  }
  return pid;
}

// Waits for `pid` up to `timeout`; true when it was reaped.
bool wait_child(int pid, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  while (true) {
    int st = 0;
    pid_t r = ::waitpid(pid, &st, WNOHANG);
    if (r == pid || (r < 0 && errno == ECHILD)) return true;
    if (Clock::now() >= deadline) return false;
    std::this_thread::sleep_for(2ms);
  }
}

std::string read_status_field(int pid, const char* key) {
  std::ifstream in("/proc/" + std::to_string(pid) + "/status");
  std::string line;
  const std::string prefix = std::string(key) + ":";
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  }
  return {};
}

// One probe: connect, send a line, expect it back within `timeout`.
bool probe_once(const fs::path& socket, std::chrono::milliseconds timeout) {
  Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) return false;
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, socket.c_str(), sizeof(addr.sun_path) - 1);
  if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) return false;
  if (!try_write_all(fd.get(), "ping\n")) return false;
  std::string carry;
  auto line = read_line(fd.get(), carry, timeout);
  return line && *line == "ping";
}

std::vector<ContainerRecord> records_of(const DaemonProcess& d) { return d.client().ps(); }

ContainerSpec sleeper() {
  ContainerSpec s;
  s.command = {"sleep", "infinity"};
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------

void ChildReaper::become_subreaper() { ::prctl(PR_SET_CHILD_SUBREAPER, 1); }

void ChildReaper::own(int pid) {
  std::lock_guard lk(g_owned_mu);
  g_owned.insert(pid);
}

void ChildReaper::disown(int pid) {
  std::lock_guard lk(g_owned_mu);
  g_owned.erase(pid);
}

void ChildReaper::reap_orphans() {
  const int self = ::getpid();
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator("/proc", ec)) {
    const std::string name = entry.path().filename().string();
    if (name.empty() || !std::all_of(name.begin(), name.end(), ::isdigit)) continue;
    const int pid = std::stoi(name);
    auto st = read_proc_stat(pid);
    if (!st || st->ppid != self || st->state != 'Z') continue;
    {
      std::lock_guard lk(g_owned_mu);
      if (g_owned.count(pid)) continue;
    }
    int status = 0;
    ::waitpid(pid, &status, WNOHANG);
  }
}

DaemonProcess::DaemonProcess(const BenchEnv& env, fs::path state_dir, SupervisionMode mode,
                             std::vector<std::string> extra_args)
    : env_(env), state_dir_(std::move(state_dir)), mode_(mode), extra_(std::move(extra_args)) {}

DaemonProcess::~DaemonProcess() {
  if (pid_ > 0) {
    try {
      kill9();
    } catch (...) {
    }
  }
}

void DaemonProcess::start(std::chrono::milliseconds timeout) {
  if (pid_ > 0) throw Error(ErrorCode::already_running, "daemon already started");
  const StateDirLayout layout = resolve_layout(state_dir_);
  std::vector<std::string> argv = {env_.hydra_bin.string(), "--state-dir", state_dir_.string(),
                                   "daemon", "start", "--foreground", "--mode", mode_name(mode_)};
  if (env_.seed) {
    argv.push_back("--id-seed");
    argv.push_back(std::to_string(*env_.seed));
  }
  argv.insert(argv.end(), extra_.begin(), extra_.end());
  Fd log(::open(layout.daemon_log().c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0600));
  pid_ = spawn_process(argv, -1, log.get(), log.get());
  ChildReaper::own(pid_);
  const auto deadline = Clock::now() + timeout;
  DaemonClient c = client();
  while (Clock::now() < deadline) {
    if (c.reachable()) return;
    int st = 0;
    if (::waitpid(pid_, &st, WNOHANG) == pid_) {
      ChildReaper::disown(pid_);
      pid_ = 0;
      throw Error(ErrorCode::spawn_error,
                  "daemon exited during startup; see " + layout.daemon_log().string());
    }
    std::this_thread::sleep_for(5ms);
  }
  kill9();
  throw Error(ErrorCode::transport_error, "daemon did not come up in time");
}

void DaemonProcess::wait_gone(std::chrono::milliseconds timeout) {
  if (pid_ <= 0) return;
  if (!wait_child(pid_, timeout)) {
    ::kill(pid_, SIGKILL);
    wait_child(pid_, 10s);
  }
  ChildReaper::disown(pid_);
  pid_ = 0;
}

void DaemonProcess::kill9() {
  if (pid_ <= 0) return;
  ::kill(pid_, SIGKILL);
  wait_gone(10s);
}

void DaemonProcess::stop() {
  if (pid_ <= 0) return;
  try {
    client().call(json{{"op", "shutdown"}}, 5s);
  } catch (const Error& e) {
    spdlog::warn("daemon shutdown request failed: {}", e.what());
  }
  wait_gone(10s);
}

void cleanup_state_dir(const fs::path& state_dir) {
  std::error_code ec;
  if (!fs::exists(state_dir, ec)) return;
  StateDirLayout layout{state_dir};
  if (auto d = read_daemon_pid(layout); d && is_alive(*d)) ::kill(d->pid, SIGKILL);
  for (const auto& entry : fs::directory_iterator(layout.containers_dir(), ec)) {
    try {
      ContainerRecord rec = read_record(entry.path() / "record.json");
      if (rec.monitor && is_alive(*rec.monitor)) ::kill(rec.monitor->pid, SIGKILL);
      if (rec.container && is_alive(*rec.container)) ::kill(-rec.container->pid, SIGKILL);
    } catch (const Error&) {
    }
  }
  // Let the kills land before the files disappear.
  std::this_thread::sleep_for(20ms);
  ChildReaper::reap_orphans();
  fs::remove_all(state_dir, ec);
}

// ---------------------------------------------------------------------------
// Reports

Stats summarize(std::vector<double> v) {
  Stats s;
  s.n = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  const std::size_t mid = v.size() / 2;
  s.median = v.size() % 2 ? v[mid] : (v[mid - 1] + v[mid]) / 2;
  // Nearest rank.
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(v.size())));
  s.p95 = v[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

void ExperimentReport::add(const std::string& mode, int trial, const std::string& metric,
                           double value, const std::string& unit) {
  rows.push_back(Row{experiment, mode, trial, metric, value, unit});
}

std::vector<double> ExperimentReport::values(const std::string& mode,
                                             const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.mode == mode && r.metric == metric) out.push_back(r.value);
  }
  return out;
}

Stats ExperimentReport::stats(const std::string& mode, const std::string& metric) const {
  return summarize(values(mode, metric));
}

void write_csv(const ExperimentReport& report, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << kCsvHeader << "\n";
  for (const auto& r : report.rows) {
    out << fmt::format("{},{},{},{},{},{}\n", r.experiment, r.mode, r.trial, r.metric, r.value,
                       r.unit);
  }
  if (!out) throw Error(ErrorCode::io_error, "writing " + path.string());
}

std::vector<Row> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kCsvHeader) throw Error(ErrorCode::parse_error, "unexpected CSV header");
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw Error(ErrorCode::parse_error, "bad CSV row: " + line);
    rows.push_back(Row{f[0], f[1], std::stoi(f[2]), f[3], std::stod(f[4]), f[5]});
  }
  return rows;
}

std::string render_summary(const ExperimentReport& report) {
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::string> units;
  for (const auto& r : report.rows) {
    auto k = std::make_pair(r.mode, r.metric);
    if (!units.count(k)) {
      keys.push_back(k);
      units[k] = r.unit;
    }
  }
  std::string out = fmt::format("{}\n{:<12} {:<16} {:>5} {:>11} {:>11} {:>11} {:>11}  {}\n",
                                report.experiment, "mode", "metric", "n", "median", "p95", "min",
                                "max", "unit");
  for (const auto& k : keys) {
    const Stats s = report.stats(k.first, k.second);
    out += fmt::format("{:<12} {:<16} {:>5} {:>11.3f} {:>11.3f} {:>11.3f} {:>11.3f}  {}\n",
                       k.first, k.second, s.n, s.median, s.p95, s.min, s.max, units[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

ExperimentReport exp_daemon_restart(const BenchEnv& env, const std::vector<SupervisionMode>& modes,
                                    const DaemonRestartOptions& opts) {
  ExperimentReport rep;
  rep.experiment = "daemon-restart";
  for (const auto mode : modes) {
    for (int trial = 0; trial < opts.trials; ++trial) {
      const fs::path dir = env.work_dir / fmt::format("restart-{}-{}", mode_name(mode), trial);
      cleanup_state_dir(dir);
      {
        DaemonProcess d(env, dir, mode);
        d.start();
        DaemonClient c = d.client();
        std::map<ContainerId, ProcessIdentity> before;
        for (int i = 0; i < opts.containers; ++i) {
          json r = c.run(sleeper());
          const ContainerRecord rec = record_from_json(r.at("record"));
          before[rec.id] = *rec.container;
        }
        for (int k = 0; k < opts.restarts; ++k) {
          d.kill9();
          ChildReaper::reap_orphans();
          const auto t0 = Clock::now();
          d.start();
          const double restore = c.call(json{{"op", "status"}}).value("restore_ms", 0.0);
          // Wait for every container to be Running again.
          double recover = -1;
          std::vector<ContainerRecord> recs;
          const auto deadline = Clock::now() + 30s;
          while (Clock::now() < deadline) {
            recs = c.ps();
            const bool all_running =
                std::all_of(recs.begin(), recs.end(), [](const ContainerRecord& r) {
                  return r.state.kind() == StateKind::running && r.container &&
                         is_alive(*r.container);
                });
            if (all_running && recs.size() == before.size()) {
              recover = ms_since(t0);
              break;
            }
            std::this_thread::sleep_for(5ms);
          }
          int survived = 0;
          int restarts = 0;
          for (const auto& r : recs) {
            auto it = before.find(r.id);
            if (it != before.end() && r.container && *r.container == it->second &&
                is_alive(*r.container)) {
              ++survived;
            }
            restarts += r.restart_count;
          }
          const int row = trial * opts.restarts + k;
          rep.add(mode_name(mode), row, "survived", survived, "containers");
          rep.add(mode_name(mode), row, "total", static_cast<double>(before.size()), "containers");
          rep.add(mode_name(mode), row, "restarts", restarts, "count");
          rep.add(mode_name(mode), row, "restore_ms", restore, "ms");
          rep.add(mode_name(mode), row, "recover_ms", recover, "ms");
        }
        d.stop();
      }
      cleanup_state_dir(dir);
    }
  }
  return rep;
}

namespace {

struct ProbeResult {
  double max_gap_ms = 0;
  int probes = 0;
  int failures = 0;
};

class Prober {
 public:
  Prober(const BenchEnv& env, const fs::path& socket, int interval_ms) {
    Pipe in = make_pipe();
    Pipe out = make_pipe();
    pid_ = spawn_process({env.bench_bin.string(), "__probe", "--socket", socket.string(),
                          "--interval-ms", std::to_string(interval_ms)},
                         in.read.get(), out.write.get(), -1);
    ChildReaper::own(pid_);
    stdin_ = std::move(in.write);
    stdout_ = std::move(out.read);
  }
  ~Prober() {
    if (pid_ > 0) {
      ::kill(pid_, SIGKILL);
      wait_child(pid_, 5s);
      ChildReaper::disown(pid_);
    }
  }

  ProbeResult finish() {
    stdin_.reset();
    std::string carry;
    auto line = read_line(stdout_.get(), carry, 10s);
    wait_child(pid_, 5s);
    ChildReaper::disown(pid_);
    pid_ = 0;
    if (!line) throw Error(ErrorCode::transport_error, "prober produced no result");
    json j = json::parse(*line);
    return ProbeResult{j.at("max_gap_ms").get<double>(), j.at("probes").get<int>(),
                       j.at("failures").get<int>()};
  }

 private:
  int pid_ = 0;
  Fd stdin_;
  Fd stdout_;
};

bool wait_for_echo(const fs::path& socket, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  while (Clock::now() < deadline) {
    if (probe_once(socket, 100ms)) return true;
    std::this_thread::sleep_for(5ms);
  }
  return false;
}

}  // namespace

ExperimentReport exp_upgrade_outage(const BenchEnv& env, const std::vector<SupervisionMode>& modes,
                                    const OutageOptions& opts) {
  ExperimentReport rep;
  rep.experiment = "upgrade-outage";
  struct Variant {
    SupervisionMode mode;
    std::string label;
    bool upgrade;
  };
  std::vector<Variant> variants;
  for (auto m : modes) variants.push_back({m, mode_name(m), true});
  if (opts.control) variants.push_back({SupervisionMode::decoupled, "control", false});

  for (const auto& v : variants) {
    for (int trial = 0; trial < opts.trials; ++trial) {
      const fs::path dir = env.work_dir / fmt::format("outage-{}-{}", v.label, trial);
      cleanup_state_dir(dir);
      {
        DaemonProcess d(env, dir, v.mode);
        d.start();
        const fs::path sock = dir / "echo.sock";
        ContainerSpec spec;
        spec.command = {env.bench_bin.string(), "__echo-server", "--socket", sock.string(),
                        "--startup-ms", std::to_string(opts.startup_ms)};
        d.client().run(spec);
        if (!wait_for_echo(sock, 10s)) throw Error(ErrorCode::spawn_error, "echo server never answered");

        Prober prober(env, sock, opts.probe_interval_ms);
        std::this_thread::sleep_for(300ms);
        if (v.upgrade) {
          // Same binary stands in for the new version.
          d.stop();
          d.start();
          const auto deadline = Clock::now() + 15s;
          while (Clock::now() < deadline) {
            auto recs = records_of(d);
            if (!recs.empty() && recs.front().state.kind() == StateKind::running &&
                probe_once(sock, 100ms)) {
              break;
            }
            std::this_thread::sleep_for(10ms);
          }
          std::this_thread::sleep_for(300ms);
        } else {
          std::this_thread::sleep_for(700ms);
        }
        ProbeResult r = prober.finish();
        rep.add(v.label, trial, "max_gap_ms", r.max_gap_ms, "ms");
        rep.add(v.label, trial, "probes", r.probes, "count");
        rep.add(v.label, trial, "failures", r.failures, "count");
        d.stop();
      }
      cleanup_state_dir(dir);
    }
  }
  return rep;
}

ExperimentReport exp_spawn_latency(const BenchEnv& env, const SpawnOptions& opts) {
  ExperimentReport rep;
  rep.experiment = "spawn-latency";
  {
    std::ifstream in("/proc/loadavg");
    double load = 0;
    in >> load;
    rep.add("host", 0, "loadavg_1m", load, "load");
  }
  const std::vector<SupervisionMode> modes = {SupervisionMode::coupled, SupervisionMode::lazy,
                                              SupervisionMode::decoupled};
  std::vector<std::unique_ptr<DaemonProcess>> daemons;
  for (auto m : modes) {
    const fs::path dir = env.work_dir / fmt::format("spawn-{}", mode_name(m));
    cleanup_state_dir(dir);
    daemons.push_back(std::make_unique<DaemonProcess>(env, dir, m));
    daemons.back()->start();
  }
  ContainerSpec spec;
  spec.command = {"true"};
  std::mt19937 rng(env.seed.value_or(1));
  std::vector<std::size_t> order = {0, 1, 2};
  for (int trial = 0; trial < opts.trials; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    double lat[3] = {0, 0, 0};
    for (auto i : order) {
      DaemonClient c = daemons[i]->client();
      const auto t0 = Clock::now();
      json r = c.run(spec);
      lat[i] = ms_since(t0);
      const std::string id = r.at("id").get<std::string>();
      c.call(json{{"op", "wait"}, {"id", id}});
      c.call(json{{"op", "rm"}, {"id", id}});
    }
    for (std::size_t i = 0; i < modes.size(); ++i) {
      rep.add(mode_name(modes[i]), trial, "latency_ms", lat[i], "ms");
      rep.add(mode_name(modes[i]), trial, "delta_ms", lat[i] - lat[0], "ms");
    }
    ChildReaper::reap_orphans();
  }
  for (auto& d : daemons) {
    const fs::path dir = d->state_dir();
    d->stop();
    cleanup_state_dir(dir);
  }
  return rep;
}

ExperimentReport exp_scalability(const BenchEnv& env, const std::vector<SupervisionMode>& modes,
                                 const ScalabilityOptions& opts) {
  ExperimentReport rep;
  rep.experiment = "scalability";
  for (const auto mode : modes) {
    const fs::path dir = env.work_dir / fmt::format("scale-{}", mode_name(mode));
    cleanup_state_dir(dir);
    {
      DaemonProcess d(env, dir, mode);
      d.start();
      DaemonClient c = d.client();
      for (int n = 1; n <= opts.max_n; ++n) {
        const auto t0 = Clock::now();
        c.run(sleeper());
        const double launch = ms_since(t0);
        if (n == 1 || n % opts.step == 0) {
          // Let per-container bookkeeping settle before sampling.
          std::this_thread::sleep_for(20ms);
          rep.add(mode_name(mode), n, "launch_ms", launch, "ms");
          rep.add(mode_name(mode), n, "daemon_rss_kb", static_cast<double>(process_rss_kb(d.pid())),
                  "KiB");
          rep.add(mode_name(mode), n, "daemon_threads", process_threads(d.pid()), "count");
        }
      }
      d.stop();
    }
    cleanup_state_dir(dir);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Workloads

int echo_server_main(const fs::path& socket, int startup_ms) {
  ::signal(SIGPIPE, SIG_IGN);
  std::this_thread::sleep_for(std::chrono::milliseconds(startup_ms));
  Fd listener = listen_unix(socket, 64);
  while (true) {
    Fd conn(::accept4(listener.get(), nullptr, nullptr, SOCK_CLOEXEC));
    if (!conn) {
      if (errno == EINTR) continue;
      return 1;
    }
    std::string carry;
    while (auto line = read_line(conn.get(), carry, 1s)) {
      if (!try_write_all(conn.get(), *line + "\n")) break;
    }
  }
}

int probe_main(const fs::path& socket, int interval_ms) {
  ::signal(SIGPIPE, SIG_IGN);
  const auto start = Clock::now();
  auto last_ok = start;
  double max_gap = 0;
  int probes = 0;
  int failures = 0;
  const auto interval = std::chrono::milliseconds(interval_ms);
  auto next = start;
  while (true) {
    ++probes;
    if (probe_once(socket, 100ms)) {
      const auto now = Clock::now();
      max_gap = std::max(max_gap, std::chrono::duration<double, std::milli>(now - last_ok).count());
      last_ok = now;
    } else {
      ++failures;
    }
    next += interval;
    const auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(next - Clock::now());
    pollfd p{0, POLLIN, 0};
    if (::poll(&p, 1, static_cast<int>(std::max<long long>(wait.count(), 0))) > 0) break;
    if (next < Clock::now()) next = Clock::now();
  }
  max_gap = std::max(max_gap, ms_since(last_ok));
  json out{{"max_gap_ms", max_gap}, {"probes", probes}, {"failures", failures}};
  const std::string s = out.dump() + "\n";
  try_write_all(1, s);
  return 0;
}

std::int64_t process_rss_kb(int pid) {
  const std::string v = read_status_field(pid, "VmRSS");
  return v.empty() ? 0 : std::stoll(v);
}

int process_threads(int pid) {
  const std::string v = read_status_field(pid, "Threads");
  return v.empty() ? 0 : std::stoi(v);
}

}  // namespace hydra::bench
