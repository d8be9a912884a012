#pragma once

// Bit-exact encodings and rendezvous conventions:
//
//   <root>/daemon.sock                   daemon API socket (JSON lines)
//   <root>/daemon.pid                    "<pid> <start_ticks>\n"
//   <root>/daemon.lock                   flock'd by the live daemon
//   <root>/containers/<id>/record.json   ContainerRecord
//   <root>/containers/<id>/monitor.sock  per-container monitor socket
//   <root>/exits/<id>.exit               "<id> code|signal <value> <finished_at_ms>\n"
//   <root>/logs/<id>.log                 concatenated stdout/stderr Frames
//
// Frame: 1 byte tag (0 stdin, 1 stdout, 2 stderr, 3 exit-notice),
// 4 byte big-endian length, payload (<= 1 MiB).

#include "hydra/model.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace hydra {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct StateDirLayout {
  fs::path root;

  fs::path daemon_socket() const { return root / "daemon.sock"; }
  fs::path daemon_pid_file() const { return root / "daemon.pid"; }
  fs::path lock_file() const { return root / "daemon.lock"; }
  fs::path daemon_log() const { return root / "daemon.log"; }
  fs::path containers_dir() const { return root / "containers"; }
  fs::path exits_dir() const { return root / "exits"; }
  fs::path logs_dir() const { return root / "logs"; }

  fs::path container_dir(const ContainerId& id) const { return containers_dir() / id.str(); }
  fs::path record_file(const ContainerId& id) const { return container_dir(id) / "record.json"; }
  fs::path monitor_socket(const ContainerId& id) const {
    return container_dir(id) / "monitor.sock";
  }
  fs::path exit_file(const ContainerId& id) const { return exits_dir() / (id.str() + ".exit"); }
  fs::path log_file(const ContainerId& id) const { return logs_dir() / (id.str() + ".log"); }
};

// Requires an absolute root; creates missing directories with mode 0700.
StateDirLayout resolve_layout(const fs::path& root);

// ---- exit files ----

std::string encode_exit_line(const ExitReport& report);
// Accepts the line with or without its trailing newline.
ExitReport parse_exit_line(std::string_view line);

// Atomic (temp file + fsync + rename). Returns the final path.
fs::path write_exit_report(const StateDirLayout& layout, const ExitReport& report);
ExitReport read_exit_report(const fs::path& path);

// ---- frames ----

enum class StreamTag : std::uint8_t { stdin_ = 0, stdout_ = 1, stderr_ = 2, exit_notice = 3 };

inline constexpr std::size_t kMaxFramePayload = 1 << 20;
inline constexpr std::size_t kFrameHeaderSize = 5;

struct Frame {
  StreamTag tag = StreamTag::stdout_;
  std::string payload;

  friend bool operator==(const Frame&, const Frame&) = default;
};

std::string encode_frame(StreamTag tag, std::string_view payload);
std::string encode_frame(const Frame& frame);

// Incremental decoder for a byte stream. Bad tags and oversize lengths throw
// as soon as the header is visible.
class FrameDecoder {
 public:
  void feed(std::string_view bytes);
  std::optional<Frame> next();
  // Bytes of an incomplete frame still buffered.
  std::size_t pending() const noexcept { return buf_.size() - pos_; }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
};

// Whole-buffer decode. A partial trailing frame throws Error{truncated_stream};
// the message carries the tail length.
std::vector<Frame> decode_frames(std::string_view bytes);

// ---- signals ----

struct SignalPlan {
  int exit_notify = 0;
  int stop = 15;
  int pause = 19;
  int unpause = 18;
  int kill = 9;

  // SIGRTMIN+10, or SIGUSR1 when real-time signals do not reach that far.
  static SignalPlan defaults();
  // Overrides exit_notify; throws if it collides with a container-bound signal.
  static SignalPlan with_exit_notify(int signo);
  bool disjoint() const noexcept;
};

// ---- daemon.pid ----

void write_daemon_pid(const StateDirLayout& layout, const ProcessIdentity& self);
std::optional<ProcessIdentity> read_daemon_pid(const StateDirLayout& layout);

// ---- JSON record encodings ----

json to_json(const ContainerSpec& spec);
ContainerSpec spec_from_json(const json& j);
json to_json(const ProcessIdentity& id);
ProcessIdentity identity_from_json(const json& j);
json to_json(const ContainerState& state);
ContainerState state_from_json(const json& j);
json to_json(const ContainerRecord& rec);
ContainerRecord record_from_json(const json& j);

void write_record(const StateDirLayout& layout, const ContainerRecord& rec);
ContainerRecord read_record(const fs::path& path);

// Writes `content` to `path` via a sibling temp file and rename.
void atomic_write_file(const fs::path& path, std::string_view content, bool sync = true);

// ---- control messages ----

json make_error(ErrorCode code, std::string_view detail = {});
json make_ok();

}  // namespace hydra
