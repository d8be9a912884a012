#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <signal.h>
#include <unistd.h>

#include <fstream>
#include <regex>
#include <set>
#include <thread>

#include "hydra/client.hpp"
#include "hydra/harness.hpp"
#include "hydra/sandbox.hpp"
#include "support.hpp"

using namespace hydra;
using namespace std::chrono_literals;
using testsupport::run_hydra;
using testsupport::TempDir;
using testsupport::wait_until;

namespace {

struct Init {
  Init() {
    bench::ChildReaper::become_subreaper();
    ::signal(SIGPIPE, SIG_IGN);
  }
} init;

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == ' ')) s.pop_back();
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// A daemon on a private state dir, torn down with everything it launched.
struct Fixture {
  TempDir dir{"e2e"};
  bench::BenchEnv env;
  std::unique_ptr<bench::DaemonProcess> daemon;

  explicit Fixture(SupervisionMode mode = SupervisionMode::decoupled,
                   std::vector<std::string> extra = {"--poll-interval-ms", "200"}) {
    env.hydra_bin = testsupport::hydra_bin();
    env.bench_bin = testsupport::bench_bin();
    env.work_dir = dir.path();
    daemon = std::make_unique<bench::DaemonProcess>(env, state(), mode, extra);
    daemon->start();
  }
  ~Fixture() {
    daemon.reset();
    bench::cleanup_state_dir(state());
    bench::ChildReaper::reap_orphans();
  }
  fs::path state() const { return dir.path() / "state"; }
  DaemonClient client() const { return DaemonClient(state()); }
  testsupport::CmdResult hydra(const std::vector<std::string>& args,
                               const std::string& input = {}) const {
    return run_hydra(state(), args, input);
  }
  ContainerId run_detached(const std::vector<std::string>& cmd,
                           std::vector<std::string> flags = {}) {
    std::vector<std::string> args{"run", "-d"};
    args.insert(args.end(), flags.begin(), flags.end());
    args.push_back("--");
    args.insert(args.end(), cmd.begin(), cmd.end());
    auto r = hydra(args);
    REQUIRE_MESSAGE(r.status == 0, r.err);
    return ContainerId::parse(trim(r.out));
  }
  ContainerRecord record(const ContainerId& id) const {
    return record_from_json(client().record(id));
  }
};

}  // namespace

TEST_CASE("fresh daemon lists nothing and refuses a second instance") {
  Fixture f;
  CHECK(f.client().ps().empty());
  auto r = f.hydra({"daemon", "start", "--foreground"});
  CHECK(r.status != 0);
  CHECK(r.err.find("already_running") != std::string::npos);
  auto st = f.client().call({{"op", "status"}});
  CHECK(st["pid"] == f.daemon->pid());
}

TEST_CASE("unknown ops and commands") {
  Fixture f;
  auto reply = request(f.client().layout().daemon_socket(), {{"op", "frobnicate"}});
  CHECK(reply["ok"] == false);
  CHECK(reply["error"] == "unknown_op");
  auto r = f.hydra({"frobnicate"});
  CHECK(r.status == 1);
}

TEST_CASE("unreachable daemon exits 2 naming the socket") {
  TempDir dir("nodaemon");
  auto r = run_hydra(dir.path() / "state", {"ps"});
  CHECK(r.status == 2);
  CHECK(r.err.find("daemon.sock") != std::string::npos);
}

TEST_CASE("detached run, ps, top, stats, rm") {
  Fixture f;
  auto id = f.run_detached({"sleep", "60"});
  CHECK(std::regex_match(id.str(), std::regex("^[0-9a-f]{16}$")));
  auto rec = f.record(id);
  CHECK(rec.state.kind() == StateKind::running);
  REQUIRE(rec.container.has_value());
  CHECK(is_alive(*rec.container));

  auto ps = f.hydra({"--json", "ps"});
  REQUIRE(ps.status == 0);
  auto pj = json::parse(ps.out);
  CHECK(pj.dump().find(id.str()) != std::string::npos);

  auto top = f.hydra({"--json", "top", id.str()});
  REQUIRE(top.status == 0);
  auto tj = json::parse(top.out);
  REQUIRE(tj.is_array());
  REQUIRE(tj.size() == 1);
  CHECK(tj[0]["pid"] == rec.container->pid);

  auto stats = f.hydra({"--json", "stats", id.str()});
  REQUIRE(stats.status == 0);
  auto sj = json::parse(stats.out);
  CHECK(sj.at("pids") == 1);
  CHECK(sj.at("rss_bytes").get<std::int64_t>() > 0);

  auto rm = f.hydra({"rm", id.str()});
  CHECK(rm.status == 1);
  CHECK(rm.err.find("rm_running") != std::string::npos);

  CHECK(f.hydra({"kill", id.str()}).status == 0);
  CHECK(f.hydra({"kill", id.str()}).status == 0);
  CHECK(f.hydra({"rm", id.str()}).status == 0);
  CHECK_FALSE(fs::exists(f.client().layout().container_dir(id)));

  auto gone = f.hydra({"inspect", id.str()});
  CHECK(gone.status == 1);
  CHECK(gone.err.find("not_found") != std::string::npos);
}

TEST_CASE("foreground run mirrors output and exit status") {
  Fixture f;
  auto r = f.hydra({"run", "--", "sh", "-c", "echo hi; echo err >&2; exit 5"});
  CHECK(r.status == 5);
  CHECK(r.out == "hi\n");
  CHECK(r.err == "err\n");
}

TEST_CASE("attach is a transparent stdio bridge") {
  Fixture f;
  std::string input;
  for (int i = 0; i < 200; ++i) input += "line " + std::to_string(i) + "\n";
  auto r = f.hydra({"run", "-i", "--", "cat"}, input);
  CHECK(r.status == 0);
  CHECK(r.out == input);

  auto ping = f.hydra({"run", "-i", "--", "cat"}, "ping\n");
  CHECK(ping.out == "ping\n");
}

TEST_CASE("wait prints the exit code") {
  Fixture f;
  auto id = f.run_detached({"sh", "-c", "sleep 0.2; exit 7"});
  auto r = f.hydra({"wait", id.str()});
  CHECK(r.status == 0);
  CHECK(trim(r.out) == "7");
  auto j = f.hydra({"--json", "wait", id.str()});
  auto wj = json::parse(j.out);
  CHECK(wj.at("exit_code") == 7);
}

TEST_CASE("missing binary fails cleanly") {
  Fixture f;
  auto before = testsupport::all_procs().size();
  auto r = f.hydra({"run", "-d", "--", "/nonexistent"});
  CHECK(r.status == 1);
  CHECK(r.err.find("exec_failure") != std::string::npos);
  auto recs = f.client().ps();
  REQUIRE(recs.size() == 1);
  auto k = recs[0].state.kind();
  CHECK((k == StateKind::lost || k == StateKind::exited));
  CHECK(wait_until([&] {
    bench::ChildReaper::reap_orphans();
    return testsupport::all_procs().size() <= before;
  }, 3s));
}

TEST_CASE("monitor writes log frames and the exit file") {
  Fixture f;
  auto id = f.run_detached({"sh", "-c", "echo hi; exit 3"});
  auto w = f.hydra({"wait", id.str()});
  CHECK(trim(w.out) == "3");
  auto layout = f.client().layout();
  auto frames = decode_frames(slurp(layout.log_file(id)));
  REQUIRE(frames.size() == 1);
  CHECK(frames[0].tag == StreamTag::stdout_);
  CHECK(frames[0].payload == "hi\n");
  auto line = slurp(layout.exit_file(id));
  CHECK(std::regex_match(line, std::regex("^" + id.str() + " code 3 [0-9]+\n$")));

  auto logs = f.hydra({"logs", id.str()});
  CHECK(logs.status == 0);
  CHECK(logs.out == "hi\n");
}

TEST_CASE("exec inside a running container") {
  Fixture f;
  auto id = f.run_detached({"sleep", "60"});
  auto r = f.hydra({"exec", id.str(), "--", "echo", "x"});
  CHECK(r.status == 0);
  CHECK(r.out == "x\n");
  auto e = f.hydra({"exec", id.str(), "--", "sh", "-c", "exit 3"});
  CHECK(e.status == 3);
  auto i = f.hydra({"exec", "-i", id.str(), "--", "cat"}, "abc\n");
  CHECK(i.out == "abc\n");
  f.hydra({"kill", id.str()});
  f.hydra({"wait", id.str()});
  auto late = f.hydra({"exec", id.str(), "--", "true"});
  CHECK(late.status == 1);
}

TEST_CASE("two attach clients see the same frames") {
  Fixture f;
  auto id = f.run_detached({"sh", "-c", "sleep 1; echo one; echo two >&2; echo three"});
  auto sock = f.client().layout().monitor_socket(id);
  json req{{"op", "attach"}, {"stdin", false}};
  auto a = open_stream(sock, req);
  auto b = open_stream(sock, req);
  REQUIRE(a.reply["ok"] == true);
  REQUIRE(b.reply["ok"] == true);
  std::vector<Frame> fa, fb;
  std::thread ta([&] {
    pump_frames(a.fd.get(), a.carry, [&](StreamTag t, std::string_view p) {
      fa.push_back({t, std::string(p)});
    });
  });
  pump_frames(b.fd.get(), b.carry, [&](StreamTag t, std::string_view p) {
    fb.push_back({t, std::string(p)});
  });
  ta.join();
  CHECK(fa == fb);
  std::string out;
  for (auto& fr : fa) {
    if (fr.tag == StreamTag::stdout_) out += fr.payload;
  }
  CHECK(out == "one\nthree\n");
}

TEST_CASE("lifecycle: pause, unpause, stop, restart, start") {
  Fixture f;
  auto id = f.run_detached({"sh", "-c", "sleep 100 & sleep 100 & wait"});
  auto rec = f.record(id);
  REQUIRE(wait_until([&] { return testsupport::live_subtree(rec.container->pid).size() == 3; },
                     3s));
  CHECK(f.hydra({"pause", id.str()}).status == 0);
  CHECK(f.record(id).state.kind() == StateKind::paused);
  for (auto& p : testsupport::live_subtree(rec.container->pid)) CHECK(p.state == 'T');
  CHECK(f.hydra({"pause", id.str()}).status == 1);
  CHECK(f.hydra({"unpause", id.str()}).status == 0);
  CHECK(wait_until([&] {
    for (auto& p : testsupport::live_subtree(rec.container->pid)) {
      if (p.state == 'T') return false;
    }
    return true;
  }, 2s));
  CHECK(f.record(id).state.kind() == StateKind::running);

  CHECK(f.hydra({"restart", "-t", "200", id.str()}).status == 0);
  auto after = f.record(id);
  CHECK(after.state.kind() == StateKind::running);
  CHECK(after.restart_count == 1);
  CHECK(after.container->pid != rec.container->pid);

  CHECK(f.hydra({"stop", "-t", "200", id.str()}).status == 0);
  auto stopped = f.record(id);
  CHECK(stopped.state.is_exited());
  CHECK(f.hydra({"pause", id.str()}).status == 1);

  CHECK(f.hydra({"start", id.str()}).status == 0);
  CHECK(f.record(id).state.kind() == StateKind::running);
  f.hydra({"kill", id.str()});
}

TEST_CASE("ids may be abbreviated") {
  Fixture f;
  auto id = f.run_detached({"sleep", "60"});
  auto r = f.hydra({"inspect", id.str().substr(0, 6)});
  CHECK(r.status == 0);
  CHECK(r.out.find(id.str()) != std::string::npos);
  f.hydra({"kill", id.str()});
}

TEST_CASE("process topology per mode") {
  SUBCASE("lazy monitors are daemon children") {
    Fixture f(SupervisionMode::lazy);
    auto id = f.run_detached({"sleep", "60"});
    auto rec = f.record(id);
    auto st = read_proc_stat(rec.monitor->pid);
    REQUIRE(st);
    CHECK(st->ppid == f.daemon->pid());
  }
  SUBCASE("decoupled monitors are not; 50 runs give 50 monitors") {
    Fixture f(SupervisionMode::decoupled);
    std::set<std::string> ids;
    for (int i = 0; i < 50; ++i) {
      auto rec = record_from_json(f.client().run([] {
        ContainerSpec s;
        s.command = {"sleep", "60"};
        return s;
      }()).at("record"));
      ids.insert(rec.id.str());
    }
    CHECK(ids.size() == 50);
    int live = 0;
    for (auto& rec : f.client().ps()) {
      REQUIRE(rec.monitor);
      if (!is_alive(*rec.monitor)) continue;
      ++live;
      auto st = read_proc_stat(rec.monitor->pid);
      REQUIRE(st);
      CHECK(st->ppid != f.daemon->pid());
    }
    CHECK(live == 50);
  }
}

TEST_CASE("monitor outlives a dead daemon and still records the exit") {
  Fixture f;
  auto id = f.run_detached({"sh", "-c", "sleep 0.5; exit 4"});
  auto rec = f.record(id);
  f.daemon->kill9();
  auto exit_file = f.client().layout().exit_file(id);
  CHECK(wait_until([&] { return fs::exists(exit_file); }, 5s));
  CHECK(parse_exit_line(slurp(exit_file)).exit_code == 4);
  CHECK(wait_until([&] {
    bench::ChildReaper::reap_orphans();
    return !is_alive(*rec.monitor);
  }, 3s));
}

TEST_CASE("monitor loss without restart leaves an unknown exit") {
  Fixture f;
  auto id = f.run_detached({"sleep", "60"}, {"--no-restart-on-monitor-loss"});
  auto rec = f.record(id);
  ::kill(rec.monitor->pid, SIGKILL);
  CHECK(wait_until([&] { return f.record(id).state.is_exited(); }, 3s));
  auto after = f.record(id);
  CHECK(after.exit_unknown);
  CHECK(after.state.term_signal() == 9);
  CHECK(after.restart_count == 0);
  CHECK(wait_until([&] { return !is_alive(*rec.container); }, 2s));
}

TEST_CASE("healthy containers are left alone by the poller") {
  Fixture f(SupervisionMode::decoupled, {"--poll-interval-ms", "10"});
  auto id = f.run_detached({"sleep", "60"});
  auto rec = f.record(id);
  std::this_thread::sleep_for(1000ms);  // ~100 ticks
  auto after = f.record(id);
  CHECK(after.container == rec.container);
  CHECK(after.monitor == rec.monitor);
  CHECK(after.restart_count == 0);
  f.hydra({"kill", id.str()});
}

TEST_CASE("daemon restart adopts live containers with original pids") {
  Fixture f;
  std::vector<ContainerRecord> before;
  for (int i = 0; i < 3; ++i) before.push_back(f.record(f.run_detached({"sleep", "60"})));
  f.daemon->kill9();
  f.daemon->start();
  for (auto& b : before) {
    auto a = f.record(b.id);
    CHECK(a.state.kind() == StateKind::running);
    CHECK(a.container == b.container);
    CHECK(a.restart_count == 0);
  }
  CHECK(f.hydra({"daemon", "status"}).status == 0);
}

TEST_CASE("json output of wait, ps, top, stats parses") {
  Fixture f;
  auto id = f.run_detached({"sleep", "60"});
  for (auto cmd : {"ps", "top", "stats"}) {
    std::vector<std::string> args{"--json", cmd};
    if (std::string(cmd) != "ps") args.push_back(id.str());
    auto r = f.hydra(args);
    INFO(cmd);
    CHECK(r.status == 0);
    CHECK(json::accept(r.out));
  }
  f.hydra({"kill", id.str()});
  auto w = f.hydra({"--json", "wait", id.str()});
  auto j = json::parse(w.out);
  CHECK(j.at("term_signal") == 9);
}
