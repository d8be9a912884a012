// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures.

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <unistd.h>

#include <fmt/core.h>

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <random>
#include <thread>

#include "hydra/client.hpp"
#include "hydra/harness.hpp"
#include "hydra/sandbox.hpp"
#include "support.hpp"

using namespace hydra;
using namespace hydra::bench;
using namespace std::chrono_literals;
using Clock = std::chrono::steady_clock;
using testsupport::wait_until;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

BenchEnv make_env(const fs::path& work) {
  BenchEnv env;
  env.hydra_bin = testsupport::hydra_bin();
  env.bench_bin = testsupport::bench_bin();
  env.work_dir = work;
  return env;
}

ContainerSpec shell(const std::string& script) {
  ContainerSpec s;
  s.command = {"/bin/sh", "-c", script};
  return s;
}

ContainerRecord run_rec(const DaemonClient& c, const ContainerSpec& s) {
  return record_from_json(c.run(s).at("record"));
}

ContainerRecord inspect(const DaemonClient& c, const ContainerId& id) {
  return record_from_json(c.record(id));
}

// ---- 1 ----
Outcome survival(const BenchEnv& env) {
  Outcome o{true, ""};
  for (auto mode : {SupervisionMode::decoupled, SupervisionMode::lazy, SupervisionMode::coupled}) {
    auto t0 = Clock::now();
    auto rep = exp_daemon_restart(env, {mode}, {.containers = 10, .trials = 1, .restarts = 1});
    double secs = ms_since(t0) / 1000;
    auto survived = rep.values(std::string(to_string(mode)), "survived");
    auto restarts = rep.values(std::string(to_string(mode)), "restarts");
    int s = survived.empty() ? -1 : static_cast<int>(survived[0]);
    int r = restarts.empty() ? -1 : static_cast<int>(restarts[0]);
    bool ok = mode == SupervisionMode::coupled ? s == 0 : (s == 10 && r == 0);
    ok = ok && secs < 30;
    o.pass = o.pass && ok;
    o.detail += fmt::format("{} {}/10 restarts={} {:.1f}s; ", to_string(mode), s, r, secs);
  }
  return o;
}

// ---- 2 ----
Outcome exit_across_downtime(const BenchEnv& env) {
  auto t0 = Clock::now();
  auto dir = env.work_dir / "downtime";
  cleanup_state_dir(dir);
  Outcome o;
  {
    DaemonProcess d(env, dir, SupervisionMode::decoupled);
    d.start();
    auto c = d.client();
    auto rec = run_rec(c, shell("sleep 1; exit 7"));
    d.kill9();
    // The container finishes while nobody is listening.
    bool exited = wait_until([&] { return !is_alive(*rec.container); }, 5s);
    std::this_thread::sleep_for(200ms);
    ChildReaper::reap_orphans();
    d.start();
    auto reply = c.call({{"op", "wait"}, {"id", rec.id.str()}});
    int code = reply.value("exit_code", -1);
    double secs = ms_since(t0) / 1000;
    o.pass = exited && code == 7 && !reply.value("exit_unknown", true) && secs < 15;
    o.detail = fmt::format("wait -> {} in {:.1f}s", code, secs);
    d.stop();
  }
  cleanup_state_dir(dir);
  return o;
}

// ---- 3 ----
Outcome outage(const BenchEnv& env) {
  auto rep = exp_upgrade_outage(env, {SupervisionMode::decoupled, SupervisionMode::coupled},
                                {.trials = 3, .startup_ms = 300, .probe_interval_ms = 10,
                                 .control = false});
  auto dec = rep.stats("decoupled", "max_gap_ms");
  auto cou = rep.stats("coupled", "max_gap_ms");
  Outcome o;
  o.pass = dec.n > 0 && cou.n > 0 && dec.max < 100 && cou.median >= 10 * dec.median;
  o.detail = fmt::format("decoupled gap median {:.1f} max {:.1f} ms; coupled median {:.1f} ms "
                         "({:.1f}x)",
                         dec.median, dec.max, cou.median,
                         dec.median > 0 ? cou.median / dec.median : 0.0);
  return o;
}

// ---- 4 ----
Outcome restore_speed(const BenchEnv& env) {
  auto rep = exp_daemon_restart(env, {SupervisionMode::decoupled},
                                {.containers = 10, .trials = 3, .restarts = 1});
  auto st = rep.stats("decoupled", "restore_ms");
  auto surv = rep.values("decoupled", "survived");
  bool all = std::all_of(surv.begin(), surv.end(), [](double v) { return v == 10; });
  Outcome o;
  o.pass = st.n == 3 && all && st.max < 500;
  o.detail = fmt::format("restore median {:.2f} ms, max {:.2f} ms (reference 40 ms)", st.median,
                         st.max);
  return o;
}

// ---- 5 ----
Outcome spawn_overhead(const BenchEnv& env) {
  auto rep = exp_spawn_latency(env, {.trials = 50});
  auto lazy = rep.stats("lazy", "delta_ms");
  auto dec = rep.stats("decoupled", "delta_ms");
  Outcome o;
  o.pass = lazy.n >= 50 && dec.n >= 50 && lazy.median <= dec.median && dec.median < 300;
  o.detail = fmt::format("median delta lazy {:.3f} ms <= decoupled {:.3f} ms, n={}", lazy.median,
                         dec.median, dec.n);
  return o;
}

// ---- 6 ----
Outcome scalability(const BenchEnv& env) {
  auto rep = exp_scalability(env, {SupervisionMode::decoupled, SupervisionMode::coupled},
                             {.max_n = 100, .step = 10});
  auto series = [&](const std::string& mode, const std::string& metric) {
    std::map<int, double> m;
    for (auto& r : rep.rows) {
      if (r.mode == mode && r.metric == metric) m[r.trial] = r.value;
    }
    return m;
  };
  auto dth = series("decoupled", "daemon_threads");
  auto drss = series("decoupled", "daemon_rss_kb");
  auto cth = series("coupled", "daemon_threads");
  auto crss = series("coupled", "daemon_rss_kb");
  auto strictly_increasing = [](const std::map<int, double>& m) {
    double prev = -1;
    for (auto& [n, v] : m) {
      if (v <= prev) return false;
      prev = v;
    }
    return m.size() >= 2;
  };
  bool have = dth.count(1) && dth.count(100) && drss.count(1) && drss.count(100);
  bool threads_const = have && std::all_of(dth.begin(), dth.end(),
                                           [&](auto& kv) { return kv.second == dth[1]; });
  double growth_kb = have ? drss[100] - drss[1] : 1e9;
  Outcome o;
  o.pass = threads_const && growth_kb < 10 * 1024 && strictly_increasing(cth) &&
           strictly_increasing(crss);
  o.detail = fmt::format(
      "decoupled threads {}..{}, rss +{:.0f} KiB; coupled threads {}..{}, rss {:.0f}..{:.0f} KiB",
      have ? dth[1] : -1, have ? dth[100] : -1, growth_kb, cth.empty() ? -1 : cth.begin()->second,
      cth.empty() ? -1 : cth.rbegin()->second, crss.empty() ? -1 : crss.begin()->second,
      crss.empty() ? -1 : crss.rbegin()->second);
  return o;
}

// ---- 7 ----
Outcome monitor_crash(const BenchEnv& env) {
  auto dir = env.work_dir / "monitor-crash";
  cleanup_state_dir(dir);
  Outcome o;
  {
    DaemonProcess d(env, dir, SupervisionMode::decoupled);  // default poll interval
    d.start();
    auto c = d.client();
    auto poll_ms = c.call({{"op", "status"}}).value("poll_interval_ms", 0);
    ContainerSpec s;
    s.command = {"sleep", "600"};
    auto rec = run_rec(c, s);
    auto t0 = Clock::now();
    ::kill(rec.monitor->pid, SIGKILL);
    ContainerRecord now;
    bool ok = wait_until([&] {
      ChildReaper::reap_orphans();
      now = inspect(c, rec.id);
      return now.state.kind() == StateKind::running && now.restart_count == 1 && now.container &&
             now.container->pid != rec.container->pid && is_alive(*now.container);
    }, std::chrono::milliseconds(2 * poll_ms + 1000), 20ms);
    double took = ms_since(t0);
    o.pass = ok && took <= 2.0 * poll_ms && poll_ms == 2000;
    o.detail = fmt::format("rebooted in {:.0f} ms (limit {} ms), restart_count={}, pid {} -> {}",
                           took, 2 * poll_ms, now.restart_count, rec.container->pid,
                           now.container ? now.container->pid : 0);
    d.stop();
  }
  cleanup_state_dir(dir);
  return o;
}

// ---- 8 ----
std::vector<int> fifo_readers(const fs::path& fifo, const std::vector<int>& pids) {
  std::vector<int> out;
  for (int pid : pids) {
    std::error_code ec;
    for (auto& e : fs::directory_iterator("/proc/" + std::to_string(pid) + "/fd", ec)) {
      std::error_code ec2;
      if (fs::read_symlink(e.path(), ec2) == fifo) {
        out.push_back(pid);
        break;
      }
    }
  }
  return out;
}

Outcome coalescing(const BenchEnv& env) {
  auto t0 = Clock::now();
  auto dir = env.work_dir / "coalesce";
  cleanup_state_dir(dir);
  fs::create_directories(env.work_dir);
  auto fifo = env.work_dir / "barrier.fifo";
  fs::remove(fifo);
  ::mkfifo(fifo.c_str(), 0600);
  Outcome o;
  {
    // Holding a write end keeps every reader blocked until we close it.
    int hold = ::open(fifo.c_str(), O_RDWR | O_CLOEXEC);
    DaemonProcess d(env, dir, SupervisionMode::decoupled);
    d.start();
    auto c = d.client();
    std::map<ContainerId, int> assigned;
    std::vector<int> pids;
    std::mt19937 rng(8);
    for (int i = 0; i < 50; ++i) {
      int code = static_cast<int>(rng() % 256);
      auto rec = run_rec(c, shell(fmt::format("read x < '{}'; exit {}", fifo.string(), code)));
      assigned[rec.id] = code;
      pids.push_back(rec.container->pid);
    }
    bool armed = wait_until([&] { return fifo_readers(fifo, pids).size() == 50; }, 20s);
    ::close(hold);  // all 50 see EOF at once
    std::map<ContainerId, int> got;
    bool settled = wait_until([&] {
      got.clear();
      for (auto& r : c.ps()) {
        if (r.state.is_exited() && r.state.exit_code()) got[r.id] = *r.state.exit_code();
      }
      return got.size() == 50;
    }, 40s, 50ms);
    int correct = 0;
    for (auto& [id, code] : assigned) correct += got.count(id) && got[id] == code;
    double secs = ms_since(t0) / 1000;
    o.pass = armed && settled && correct == 50 && secs < 60;
    o.detail = fmt::format("{}/50 correct codes, {} readers armed, {:.1f}s", correct,
                           armed ? 50 : static_cast<int>(fifo_readers(fifo, pids).size()), secs);
    d.stop();
  }
  cleanup_state_dir(dir);
  fs::remove(fifo);
  return o;
}

// ---- 9 ----
Outcome golden() {
  std::string detail;
  bool ok = true;
  auto id = ContainerId::parse("aabbccddeeff0011");
  ok &= encode_exit_line(ExitReport::with_code(id, 0, 1700000000000)) ==
        "aabbccddeeff0011 code 0 1700000000000\n";
  ok &= encode_exit_line(ExitReport::with_signal(id, 9, 5)) == "aabbccddeeff0011 signal 9 5\n";
  ok &= encode_frame(StreamTag::stdout_, "hi") == std::string("\x01\x00\x00\x00\x02hi", 7);
  ok &= encode_frame(StreamTag::exit_notice, "") == std::string("\x03\x00\x00\x00\x00", 5);
  detail += ok ? "golden vectors match; " : "golden vectors differ; ";

  std::mt19937_64 rng(9);
  int exit_ok = 0, frame_ok = 0;
  for (int i = 0; i < 1000; ++i) {
    auto r = rng() % 2 ? ExitReport::with_code(new_container_id(rng()), static_cast<int>(rng() % 256),
                                               static_cast<std::int64_t>(rng() >> 22))
                       : ExitReport::with_signal(new_container_id(rng()),
                                                 1 + static_cast<int>(rng() % 64),
                                                 static_cast<std::int64_t>(rng() >> 22));
    exit_ok += parse_exit_line(encode_exit_line(r)) == r;

    std::vector<Frame> frames(rng() % 101);
    std::string stream;
    for (auto& f : frames) {
      f.tag = static_cast<StreamTag>(rng() % 4);
      f.payload.resize(rng() % 48);
      for (auto& ch : f.payload) ch = static_cast<char>(rng());
      stream += encode_frame(f);
    }
    frame_ok += decode_frames(stream) == frames;
  }
  ok &= exit_ok == 1000 && frame_ok == 1000;
  detail += fmt::format("exit-line round trips {}/1000, frame streams {}/1000", exit_ok, frame_ok);
  return {ok, detail};
}

// ---- 10 ----
Outcome lifecycle(const BenchEnv& env) {
  auto dir = env.work_dir / "lifecycle";
  cleanup_state_dir(dir);
  Outcome o;
  {
    DaemonProcess d(env, dir, SupervisionMode::decoupled);
    d.start();
    auto c = d.client();
    auto rec = run_rec(c, shell("sleep 100 & sleep 100 & wait"));
    wait_until([&] { return testsupport::live_subtree(rec.container->pid).size() == 3; }, 3s);
    c.call({{"op", "pause"}, {"id", rec.id.str()}});
    std::vector<testsupport::RawProc> members;
    bool all_t = wait_until([&] {
      members = testsupport::live_subtree(rec.container->pid);
      return members.size() == 3 &&
             std::all_of(members.begin(), members.end(), [](auto& p) { return p.state == 'T'; });
    }, 1s);
    c.call({{"op", "unpause"}, {"id", rec.id.str()}});
    bool resumed = wait_until([&] {
      auto m = testsupport::live_subtree(rec.container->pid);
      return m.size() == 3 &&
             std::none_of(m.begin(), m.end(), [](auto& p) { return p.state == 'T'; });
    }, 2s);
    bool running = inspect(c, rec.id).state.kind() == StateKind::running;
    c.call({{"op", "kill"}, {"id", rec.id.str()}});

    auto stubborn = run_rec(c, shell("trap '' TERM; sleep 100"));
    std::this_thread::sleep_for(100ms);  // let the trap install
    auto t0 = Clock::now();
    c.call({{"op", "stop"}, {"id", stubborn.id.str()}, {"grace_ms", 500}});
    wait_until([&] { return inspect(c, stubborn.id).state.is_exited(); }, 5s, 5ms);
    double took = ms_since(t0);
    auto fin = inspect(c, stubborn.id);
    bool sig9 = fin.state.term_signal() == 9 && !fin.exit_unknown;
    o.pass = all_t && resumed && running && sig9 && took >= 300 && took <= 700;
    o.detail = fmt::format("paused {}/{} members T, resumed={}, stop -> {} after {:.0f} ms",
                           std::count_if(members.begin(), members.end(),
                                         [](auto& p) { return p.state == 'T'; }),
                           members.size(), resumed, fin.state.describe(), took);
    d.stop();
  }
  cleanup_state_dir(dir);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  ChildReaper::become_subreaper();
  ::signal(SIGPIPE, SIG_IGN);
  fs::path work = fs::temp_directory_path() / fmt::format("hydra-acceptance-{}", ::getpid());
  if (argc > 1) work = argv[1];
  fs::create_directories(work);
  auto env = make_env(work);

  std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"1 survival under daemon crash", [&] { return survival(env); }},
      {"2 exit status across downtime", [&] { return exit_across_downtime(env); }},
      {"3 upgrade outage ordering", [&] { return outage(env); }},
      {"4 daemon restore speed", [&] { return restore_speed(env); }},
      {"5 monitor-creation overhead ordering", [&] { return spawn_overhead(env); }},
      {"6 no per-container daemon bloat", [&] { return scalability(env); }},
      {"7 monitor-crash recovery", [&] { return monitor_crash(env); }},
      {"8 simultaneous exits", [&] { return coalescing(env); }},
      {"9 protocol golden bytes and round trips", [] { return golden(); }},
      {"10 lifecycle semantics", [&] { return lifecycle(env); }},
  };

  int failures = 0;
  for (auto& [name, fn] : checks) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    ChildReaper::reap_orphans();
    failures += !o.pass;
    fmt::print("{} criterion {}: {}\n", o.pass ? "PASS" : "FAIL", name, o.detail);
    std::fflush(stdout);
  }
  std::error_code ec;
  fs::remove_all(work, ec);
  return failures;
}
