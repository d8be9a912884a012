#include "hydra/protocol.hpp"

#include <atomic>
#include <cerrno>
#include <charconv>
#include <csignal>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

namespace hydra {

namespace {

[[noreturn]] void throw_io(const std::string& what, int err) {
  throw Error(ErrorCode::io_error, what + ": " + std::strerror(err));
}

void ensure_dir(const fs::path& p) {
  if (::mkdir(p.c_str(), 0700) == 0) return;
  if (errno != EEXIST) throw_io("mkdir " + p.string(), errno);
  struct stat st {};
  if (::stat(p.c_str(), &st) != 0) throw_io("stat " + p.string(), errno);
  if (!S_ISDIR(st.st_mode)) throw Error(ErrorCode::io_error, p.string() + " is not a directory");
}

template <typename Int>
std::optional<Int> parse_int(std::string_view s) {
  Int v{};
  if (s.empty()) return std::nullopt;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string read_small_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_io("open " + path.string(), errno ? errno : ENOENT);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

StateDirLayout resolve_layout(const fs::path& root) {
  if (!root.is_absolute()) {
    throw Error(ErrorCode::invalid_argument, "state dir must be absolute: " + root.string());
  }
  StateDirLayout layout{root.lexically_normal()};
  if (layout.root.has_filename() == false && layout.root != layout.root.root_path()) {
    layout.root = layout.root.parent_path();
  }
  // Parents of the root may be created with default permissions.
  std::error_code ec;
  fs::create_directories(layout.root.parent_path(), ec);
  ensure_dir(layout.root);
  ensure_dir(layout.containers_dir());
  ensure_dir(layout.exits_dir());
  ensure_dir(layout.logs_dir());
  return layout;
}

// ---- exit files ----

std::string encode_exit_line(const ExitReport& report) {
  report.validate();
  std::string out = report.container_id.str();
  if (report.exit_code) {
    out += " code " + std::to_string(*report.exit_code);
  } else {
    out += " signal " + std::to_string(*report.term_signal);
  }
  out += ' ';
  out += std::to_string(report.finished_at);
  out += '\n';
  return out;
}

ExitReport parse_exit_line(std::string_view line) {
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto sp = line.find(' ', start);
    fields.push_back(line.substr(start, sp == std::string_view::npos ? sp : sp - start));
    if (sp == std::string_view::npos) break;
    start = sp + 1;
  }
  auto fail = [&](const std::string& why) -> ExitReport {
    throw Error(ErrorCode::parse_error, "exit line '" + std::string(line) + "': " + why);
  };
  if (fields.size() != 4) return fail("expected 4 fields, got " + std::to_string(fields.size()));
  if (!ContainerId::is_valid(fields[0])) return fail("bad container id");
  auto value = parse_int<int>(fields[2]);
  auto at = parse_int<std::int64_t>(fields[3]);
  if (!value || !at) return fail("non-numeric field");

  ExitReport r;
  r.container_id = ContainerId::parse(fields[0]);
  r.finished_at = *at;
  if (fields[1] == "code") {
    r.exit_code = *value;
  } else if (fields[1] == "signal") {
    r.term_signal = *value;
  } else {
    return fail("unknown kind '" + std::string(fields[1]) + "'");
  }
  try {
    r.validate();
  } catch (const Error& e) {
    return fail(e.what());
  }
  return r;
}

void atomic_write_file(const fs::path& path, std::string_view content, bool sync) {
  static std::atomic<unsigned> counter{0};
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
  if (fd < 0) throw_io("open " + tmp.string(), errno);
  std::size_t off = 0;
  while (off < content.size()) {
    ssize_t n = ::write(fd, content.data() + off, content.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      int err = errno;
      ::close(fd);
      ::unlink(tmp.c_str());
      throw_io("write " + tmp.string(), err);
    }
    off += static_cast<std::size_t>(n);
  }
  if (sync && ::fsync(fd) != 0) {
    int err = errno;
    ::close(fd);
    ::unlink(tmp.c_str());
    throw_io("fsync " + tmp.string(), err);
  }
  ::close(fd);
  if (::rename(tmp.c_str(), path.c_str()) != 0) {
    int err = errno;
    ::unlink(tmp.c_str());
    throw_io("rename " + path.string(), err);
  }
}

fs::path write_exit_report(const StateDirLayout& layout, const ExitReport& report) {
  auto path = layout.exit_file(report.container_id);
  atomic_write_file(path, encode_exit_line(report), true);
  return path;
}

ExitReport read_exit_report(const fs::path& path) {
  return parse_exit_line(read_small_file(path));
}

// ---- frames ----

std::string encode_frame(StreamTag tag, std::string_view payload) {
  if (static_cast<unsigned>(tag) > 3) throw Error(ErrorCode::bad_tag, "bad frame tag");
  if (payload.size() > kMaxFramePayload) {
    throw Error(ErrorCode::frame_too_large,
                "frame payload of " + std::to_string(payload.size()) + " bytes");
  }
  const auto len = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.reserve(kFrameHeaderSize + payload.size());
  out.push_back(static_cast<char>(tag));
  out.push_back(static_cast<char>((len >> 24) & 0xff));
  out.push_back(static_cast<char>((len >> 16) & 0xff));
  out.push_back(static_cast<char>((len >> 8) & 0xff));
  out.push_back(static_cast<char>(len & 0xff));
  out.append(payload);
  return out;
}

std::string encode_frame(const Frame& frame) { return encode_frame(frame.tag, frame.payload); }

void FrameDecoder::feed(std::string_view bytes) {
  if (pos_ > 0 && pos_ >= buf_.size() / 2) {
    buf_.erase(0, pos_);
    pos_ = 0;
  }
  buf_.append(bytes);
}

std::optional<Frame> FrameDecoder::next() {
  if (pending() < kFrameHeaderSize) return std::nullopt;
  const auto* h = reinterpret_cast<const unsigned char*>(buf_.data() + pos_);
  if (h[0] > 3) throw Error(ErrorCode::bad_tag, "bad frame tag " + std::to_string(h[0]));
  const std::uint32_t len = (std::uint32_t{h[1]} << 24) | (std::uint32_t{h[2]} << 16) |
                            (std::uint32_t{h[3]} << 8) | std::uint32_t{h[4]};
  if (len > kMaxFramePayload) {
    throw Error(ErrorCode::frame_too_large, "frame length " + std::to_string(len));
  }
  if (pending() < kFrameHeaderSize + len) return std::nullopt;
  Frame f{static_cast<StreamTag>(h[0]), buf_.substr(pos_ + kFrameHeaderSize, len)};
  pos_ += kFrameHeaderSize + len;
  return f;
}

std::vector<Frame> decode_frames(std::string_view bytes) {
  FrameDecoder dec;
  dec.feed(bytes);
  std::vector<Frame> out;
  while (auto f = dec.next()) out.push_back(std::move(*f));
  if (dec.pending() != 0) {
    throw Error(ErrorCode::truncated_stream,
                "truncated frame stream: " + std::to_string(dec.pending()) + " trailing bytes");
  }
  return out;
}

// ---- signals ----

SignalPlan SignalPlan::defaults() {
  SignalPlan p;
  p.exit_notify = (SIGRTMIN + 10 <= SIGRTMAX) ? SIGRTMIN + 10 : SIGUSR1;
  return p;
}

SignalPlan SignalPlan::with_exit_notify(int signo) {
  SignalPlan p = defaults();
  p.exit_notify = signo;
  if (signo <= 0 || signo > SIGRTMAX || !p.disjoint()) {
    throw Error(ErrorCode::invalid_argument,
                "exit-notify signal " + std::to_string(signo) + " is not usable");
  }
  return p;
}

bool SignalPlan::disjoint() const noexcept {
  return exit_notify != stop && exit_notify != pause && exit_notify != unpause &&
         exit_notify != kill;
}

// ---- daemon.pid ----

void write_daemon_pid(const StateDirLayout& layout, const ProcessIdentity& self) {
  atomic_write_file(layout.daemon_pid_file(),
                    std::to_string(self.pid) + " " + std::to_string(self.start_ticks) + "\n",
                    false);
}

std::optional<ProcessIdentity> read_daemon_pid(const StateDirLayout& layout) {
  std::ifstream in(layout.daemon_pid_file());
  if (!in) return std::nullopt;
  ProcessIdentity id;
  if (!(in >> id.pid >> id.start_ticks) || id.pid <= 0) return std::nullopt;
  return id;
}

// ---- JSON ----

json to_json(const ContainerSpec& spec) {
  json j{{"command", spec.command},
         {"env", spec.env},
         {"isolation", to_string(spec.isolation)},
         {"restart_on_monitor_loss", spec.restart_on_monitor_loss},
         {"stop_grace_ms", spec.stop_grace_ms}};
  j["working_dir"] = spec.working_dir ? json(*spec.working_dir) : json(nullptr);
  return j;
}

ContainerSpec spec_from_json(const json& j) {
  try {
    ContainerSpec s;
    s.command = j.at("command").get<std::vector<std::string>>();
    s.env = j.value("env", std::vector<std::string>{});
    if (j.contains("working_dir") && !j["working_dir"].is_null()) {
      s.working_dir = j["working_dir"].get<std::string>();
    }
    s.isolation = isolation_from_string(j.value("isolation", std::string("none")));
    s.restart_on_monitor_loss = j.value("restart_on_monitor_loss", true);
    s.stop_grace_ms = j.value("stop_grace_ms", std::int64_t{10000});
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("container spec: ") + e.what());
  }
}

json to_json(const ProcessIdentity& id) {
  return json{{"pid", id.pid}, {"start_ticks", id.start_ticks}};
}

ProcessIdentity identity_from_json(const json& j) {
  try {
    return ProcessIdentity{j.at("pid").get<int>(), j.at("start_ticks").get<std::uint64_t>()};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("process identity: ") + e.what());
  }
}

json to_json(const ContainerState& state) {
  json j{{"status", to_string(state.kind())}};
  if (state.exit_code()) j["exit_code"] = *state.exit_code();
  if (state.term_signal()) j["term_signal"] = *state.term_signal();
  return j;
}

ContainerState state_from_json(const json& j) {
  try {
    auto kind = state_kind_from_string(j.at("status").get<std::string>());
    switch (kind) {
      case StateKind::created:
        return ContainerState::created();
      case StateKind::running:
        return ContainerState::running();
      case StateKind::paused:
        return ContainerState::paused();
      case StateKind::stopping:
        return ContainerState::stopping();
      case StateKind::lost:
        return ContainerState::lost();
      case StateKind::exited:
        break;
    }
    const bool has_code = j.contains("exit_code");
    const bool has_sig = j.contains("term_signal");
    if (has_code == has_sig) {
      throw Error(ErrorCode::parse_error, "exited state needs exactly one of code/signal");
    }
    return has_code ? ContainerState::exited_code(j["exit_code"].get<int>())
                    : ContainerState::exited_signal(j["term_signal"].get<int>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("container state: ") + e.what());
  }
}

namespace {

json opt_json(const std::optional<std::int64_t>& v) { return v ? json(*v) : json(nullptr); }

std::optional<std::int64_t> opt_i64(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<std::int64_t>();
}

std::optional<ProcessIdentity> opt_identity(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return identity_from_json(j[key]);
}

}  // namespace

json to_json(const ContainerRecord& rec) {
  json j{{"id", rec.id.str()},
         {"spec", to_json(rec.spec)},
         {"mode", to_string(rec.mode)},
         {"state", to_json(rec.state)},
         {"created_at", opt_json(rec.created_at)},
         {"started_at", opt_json(rec.started_at)},
         {"finished_at", opt_json(rec.finished_at)},
         {"restart_count", rec.restart_count},
         {"exit_unknown", rec.exit_unknown}};
  j["monitor"] = rec.monitor ? to_json(*rec.monitor) : json(nullptr);
  j["container"] = rec.container ? to_json(*rec.container) : json(nullptr);
  j["launch_error"] = rec.launch_error ? json(*rec.launch_error) : json(nullptr);
  return j;
}

ContainerRecord record_from_json(const json& j) {
  try {
    ContainerRecord r;
    r.id = ContainerId::parse(j.at("id").get<std::string>());
    r.spec = spec_from_json(j.at("spec"));
    r.mode = supervision_mode_from_string(j.at("mode").get<std::string>());
    r.state = state_from_json(j.at("state"));
    r.monitor = opt_identity(j, "monitor");
    r.container = opt_identity(j, "container");
    r.created_at = opt_i64(j, "created_at");
    r.started_at = opt_i64(j, "started_at");
    r.finished_at = opt_i64(j, "finished_at");
    r.restart_count = j.value("restart_count", 0);
    r.exit_unknown = j.value("exit_unknown", false);
    if (j.contains("launch_error") && !j["launch_error"].is_null()) {
      r.launch_error = j["launch_error"].get<std::string>();
    }
    r.validate();
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("container record: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::parse_error, std::string("container record: ") + e.what());
  }
}

void write_record(const StateDirLayout& layout, const ContainerRecord& rec) {
  ensure_dir(layout.container_dir(rec.id));
  atomic_write_file(layout.record_file(rec.id), to_json(rec).dump(2) + "\n", false);
}

ContainerRecord read_record(const fs::path& path) {
  std::string text = read_small_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::parse_error, "record " + path.string() + " is not JSON");
  return record_from_json(j);
}

json make_error(ErrorCode code, std::string_view detail) {
  json j{{"ok", false}, {"error", to_string(code)}};
  if (!detail.empty()) j["message"] = std::string(detail);
  return j;
}

json make_ok() { return json{{"ok", true}}; }

}  // namespace hydra
