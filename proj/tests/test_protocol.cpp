#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <signal.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <fstream>
#include <random>
#include <thread>

#include "hydra/protocol.hpp"
#include "support.hpp"

using namespace hydra;
using testsupport::TempDir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ContainerId rid(std::mt19937_64& rng) {
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (auto& c : s) c = hex[rng() % 16];
  return ContainerId::parse(s);
}

ExitReport random_report(std::mt19937_64& rng) {
  auto at = static_cast<std::int64_t>(rng() % 4000000000000ULL);
  if (rng() % 2) return ExitReport::with_code(rid(rng), static_cast<int>(rng() % 256), at);
  return ExitReport::with_signal(rid(rng), 1 + static_cast<int>(rng() % 64), at);
}

std::string bytes(std::initializer_list<int> b) {
  std::string s;
  for (int v : b) s.push_back(static_cast<char>(v));
  return s;
}

}  // namespace

TEST_CASE("exit line golden bytes") {
  auto id = ContainerId::parse("aabbccddeeff0011");
  CHECK(encode_exit_line(ExitReport::with_code(id, 0, 1700000000000)) ==
        "aabbccddeeff0011 code 0 1700000000000\n");
  CHECK(encode_exit_line(ExitReport::with_signal(id, 9, 1700000000123)) ==
        "aabbccddeeff0011 signal 9 1700000000123\n");
}

TEST_CASE("exit line parsing") {
  auto r = parse_exit_line("aabbccddeeff0011 code 7 12\n");
  CHECK(r.exit_code == 7);
  CHECK_FALSE(r.term_signal.has_value());
  CHECK(r.finished_at == 12);
  CHECK(parse_exit_line("aabbccddeeff0011 signal 15 12").term_signal == 15);

  auto expect_parse_error = [](std::string_view line) {
    try {
      parse_exit_line(line);
      FAIL("accepted: " << line);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::parse_error);
    }
  };
  expect_parse_error("aabbccddeeff0011 code 7");
  expect_parse_error("aabbccddeeff0011 code 7 12 extra");
  expect_parse_error("aabbccddeeff0011  code 7 12");
  expect_parse_error("aabbccddeeff0011 status 7 12");
  expect_parse_error("aabbccddeeff0011 code 256 12");
  expect_parse_error("aabbccddeeff0011 code x 12");
  expect_parse_error("nothex0000000000 code 1 12");
  expect_parse_error("");
}

TEST_CASE("exit reports round trip through lines, 1000 cases") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    auto r = random_report(rng);
    REQUIRE(parse_exit_line(encode_exit_line(r)) == r);
  }
}

TEST_CASE("exit files: round trip, idempotent rewrite, 3-field file") {
  TempDir dir("proto");
  auto layout = resolve_layout(dir.path() / "state");
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    auto r = random_report(rng);
    auto path = write_exit_report(layout, r);
    REQUIRE(path == layout.exit_file(r.container_id));
    REQUIRE(read_exit_report(path) == r);
  }

  auto id = ContainerId::parse("aabbccddeeff0011");
  auto r = ExitReport::with_code(id, 0, 1700000000000);
  auto p = write_exit_report(layout, r);
  auto first = slurp(p);
  write_exit_report(layout, r);
  CHECK(slurp(p) == first);
  CHECK(first == "aabbccddeeff0011 code 0 1700000000000\n");

  std::ofstream(p, std::ios::trunc) << "aabbccddeeff0011 code 0\n";
  try {
    read_exit_report(p);
    FAIL("3-field file accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::parse_error);
  }
}

TEST_CASE("concurrent exit-file writers never expose a partial file") {
  TempDir dir("atomic");
  auto layout = resolve_layout(dir.path() / "state");
  auto id = ContainerId::parse("0123456789abcdef");
  std::atomic<bool> done{false};
  std::atomic<int> bad{0}, seen{0};
  std::thread reader([&] {
    while (!done) {
      std::ifstream in(layout.exit_file(id), std::ios::binary);
      if (!in) continue;
      std::string s{std::istreambuf_iterator<char>(in), {}};
      ++seen;
      try {
        if (s.empty() || s.back() != '\n') throw Error(ErrorCode::parse_error, "partial");
        parse_exit_line(s);
      } catch (const Error&) {
        ++bad;
      }
    }
  });
  // Separate processes, as monitors would be.
  std::vector<int> pids;
  for (int w = 0; w < 4; ++w) {
    int pid = ::fork();
    if (pid == 0) {
      for (int i = 0; i < 250; ++i) {
        write_exit_report(layout, ExitReport::with_code(id, (w * 250 + i) % 256, 1000000 + i));
      }
      ::_exit(0);
    }
    pids.push_back(pid);
  }
  for (int pid : pids) {
    int st = 0;
    ::waitpid(pid, &st, 0);
    CHECK(WIFEXITED(st));
    CHECK(WEXITSTATUS(st) == 0);
  }
  done = true;
  reader.join();
  CHECK(bad == 0);
  CHECK(seen > 0);
  // No temp files left behind.
  int files = 0;
  for (auto& e : fs::directory_iterator(layout.exits_dir())) {
    (void)e;
    ++files;
  }
  CHECK(files == 1);
}

TEST_CASE("frame golden bytes") {
  CHECK(encode_frame(StreamTag::stdout_, "hi") == bytes({0x01, 0x00, 0x00, 0x00, 0x02, 0x68, 0x69}));
  auto empty = encode_frame(StreamTag::exit_notice, "");
  CHECK(empty == bytes({0x03, 0x00, 0x00, 0x00, 0x00}));
  CHECK(empty.size() == 5);
  std::string big(0x010203, 'a');
  auto f = encode_frame(StreamTag::stderr_, big);
  CHECK(f.substr(0, 5) == bytes({0x02, 0x00, 0x01, 0x02, 0x03}));
}

TEST_CASE("frame encode errors") {
  std::string too_big(kMaxFramePayload + 1, 'x');
  try {
    encode_frame(StreamTag::stdout_, too_big);
    FAIL("oversize frame encoded");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::frame_too_large);
  }
  CHECK_NOTHROW(encode_frame(StreamTag::stdout_, std::string(kMaxFramePayload, 'x')));
}

TEST_CASE("frame decode errors") {
  auto expect = [](std::string_view data, ErrorCode code) {
    try {
      decode_frames(data);
      FAIL("decoded");
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };
  expect(bytes({0x04, 0, 0, 0, 0}), ErrorCode::bad_tag);
  expect(bytes({0x01, 0x00, 0x10, 0x00, 0x01}), ErrorCode::frame_too_large);
  expect(bytes({0x01, 0, 0, 0, 2, 0x68}), ErrorCode::truncated_stream);
  expect(bytes({0x01, 0, 0}), ErrorCode::truncated_stream);

  auto full = encode_frame(StreamTag::stdout_, "abc");
  try {
    decode_frames(full + bytes({0x02, 0, 0}));
    FAIL("decoded");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::truncated_stream);
    CHECK(std::string(e.what()).find('3') != std::string::npos);
  }
}

TEST_CASE("frame sequences round trip, 1000 cases") {
  std::mt19937_64 rng(3);
  for (int c = 0; c < 1000; ++c) {
    std::vector<Frame> frames(rng() % 101);
    std::string stream;
    for (auto& f : frames) {
      f.tag = static_cast<StreamTag>(rng() % 4);
      f.payload.resize(rng() % 64);
      for (auto& ch : f.payload) ch = static_cast<char>(rng());
      stream += encode_frame(f);
    }
    REQUIRE(decode_frames(stream) == frames);

    // Same stream, fed to the incremental decoder in random chunks.
    FrameDecoder dec;
    std::vector<Frame> got;
    size_t pos = 0;
    while (pos < stream.size()) {
      size_t n = std::min<size_t>(1 + rng() % 17, stream.size() - pos);
      dec.feed(std::string_view(stream).substr(pos, n));
      pos += n;
      while (auto f = dec.next()) got.push_back(*f);
    }
    REQUIRE(got == frames);
    REQUIRE(dec.pending() == 0);
  }
}

TEST_CASE("resolve_layout") {
  TempDir dir("layout");
  auto root = dir.path() / "h";
  auto layout = resolve_layout(root);
  CHECK(layout.exits_dir() == root / "exits");
  CHECK(layout.daemon_socket() == root / "daemon.sock");
  auto id = ContainerId::parse("aabbccddeeff0011");
  CHECK(layout.record_file(id) == root / "containers/aabbccddeeff0011/record.json");
  CHECK(layout.monitor_socket(id) == root / "containers/aabbccddeeff0011/monitor.sock");
  CHECK(layout.exit_file(id) == root / "exits/aabbccddeeff0011.exit");
  CHECK(layout.log_file(id) == root / "logs/aabbccddeeff0011.log");
  for (auto& d : {root, layout.containers_dir(), layout.exits_dir(), layout.logs_dir()}) {
    struct stat st {};
    REQUIRE(::stat(d.c_str(), &st) == 0);
    CHECK((st.st_mode & 0777) == 0700);
  }
  auto again = resolve_layout(root);
  CHECK(again.root == layout.root);
  CHECK_THROWS_AS(resolve_layout("relative/dir"), Error);
}

TEST_CASE("signal plan") {
  auto d = SignalPlan::defaults();
#ifdef SIGRTMIN
  if (SIGRTMIN + 10 <= SIGRTMAX) CHECK(d.exit_notify == SIGRTMIN + 10);
#endif
  CHECK(d.stop == SIGTERM);
  CHECK(d.pause == SIGSTOP);
  CHECK(d.unpause == SIGCONT);
  CHECK(d.kill == SIGKILL);
  CHECK(d.disjoint());
  CHECK(SignalPlan::with_exit_notify(SIGUSR1).exit_notify == SIGUSR1);
  for (int s : {SIGTERM, SIGSTOP, SIGCONT, SIGKILL}) {
    CHECK_THROWS(SignalPlan::with_exit_notify(s));
  }
  for (int s = 1; s < 65; ++s) {
    if (s == SIGTERM || s == SIGSTOP || s == SIGCONT || s == SIGKILL) continue;
    CHECK(SignalPlan::with_exit_notify(s).disjoint());
  }
}

TEST_CASE("daemon.pid round trip") {
  TempDir dir("pid");
  auto layout = resolve_layout(dir.path() / "s");
  CHECK_FALSE(read_daemon_pid(layout).has_value());
  write_daemon_pid(layout, {1234, 5678});
  CHECK(slurp(layout.daemon_pid_file()) == "1234 5678\n");
  auto back = read_daemon_pid(layout);
  REQUIRE(back.has_value());
  CHECK(back->pid == 1234);
  CHECK(back->start_ticks == 5678);
}

TEST_CASE("records persist through the state dir") {
  TempDir dir("rec");
  auto layout = resolve_layout(dir.path() / "s");
  ContainerRecord rec;
  rec.id = ContainerId::parse("aabbccddeeff0011");
  rec.spec.command = {"sleep", "1"};
  rec.created_at = 5;
  write_record(layout, rec);
  CHECK(read_record(layout.record_file(rec.id)) == rec);
}

TEST_CASE("error replies") {
  auto e = make_error(ErrorCode::unknown_op, "frobnicate");
  CHECK(e["ok"] == false);
  CHECK(e["error"] == "unknown_op");
  CHECK(make_ok()["ok"] == true);
}
