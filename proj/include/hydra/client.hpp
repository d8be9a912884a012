#pragma once

// Client side of the daemon and monitor sockets.

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hydra/io.hpp"
#include "hydra/protocol.hpp"

namespace hydra {

// Throws the Error carried by an {"ok":false} reply; returns the reply otherwise.
const json& check_reply(const json& reply);

class DaemonClient {
 public:
  explicit DaemonClient(const fs::path& state_dir) : layout_{state_dir} {}

  // Sends one request; an error reply is rethrown as Error with its code.
  json call(const json& req, std::chrono::milliseconds timeout = std::chrono::minutes(10)) const;

  json run(const ContainerSpec& spec) const;
  json record(const ContainerId& id) const;
  std::vector<ContainerRecord> ps() const;
  bool reachable() const;

  // Accepts a full id or a unique prefix of one.
  ContainerId resolve(const std::string& id_or_prefix) const;

  const StateDirLayout& layout() const { return layout_; }

 private:
  StateDirLayout layout_;
};

struct StreamEnd {
  // Present when an exit-notice frame was seen.
  std::optional<ExitReport> exit;
};

// Reads frames until an exit notice or EOF, starting with bytes already
// buffered in `carry`. stdin frames are ignored.
StreamEnd pump_frames(int fd, std::string carry,
                      const std::function<void(StreamTag, std::string_view)>& on_output);

// Interactive session over an attach or exec stream: copies `stdin_fd`
// (when >= 0) into stdin frames, a zero-length frame marking EOF, and output
// frames to the callback. `on_tick` runs at least every 100 ms.
StreamEnd run_session(StreamSession& session, int stdin_fd,
                      const std::function<void(StreamTag, std::string_view)>& on_output,
                      const std::function<void()>& on_tick = {});

// Default state directory: $HYDRA_STATE_DIR, else /run/hydra for root and
// $XDG_RUNTIME_DIR/hydra or /tmp/hydra-<uid> otherwise.
fs::path default_state_dir();

}  // namespace hydra
