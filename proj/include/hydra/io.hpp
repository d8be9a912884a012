#pragma once

// File-descriptor ownership and Unix-socket plumbing.

#include <chrono>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "hydra/protocol.hpp"

namespace hydra {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) noexcept : fd_(fd) {}
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) reset(std::exchange(o.fd_, -1));
    return *this;
  }
  ~Fd() { reset(); }

  int get() const noexcept { return fd_; }
  explicit operator bool() const noexcept { return fd_ >= 0; }
  int release() noexcept { return std::exchange(fd_, -1); }
  void reset(int fd = -1) noexcept;

 private:
  int fd_ = -1;
};

struct Pipe {
  Fd read;
  Fd write;
};

// O_CLOEXEC pipe.
Pipe make_pipe();

void set_nonblocking(int fd, bool on = true);
void set_cloexec(int fd, bool on = true);

// Writes everything or throws Error{io_error}; EINTR-safe. Sockets use
// MSG_NOSIGNAL so a vanished peer is an error, not a SIGPIPE.
void write_all(int fd, std::string_view data);
// Returns false instead of throwing.
bool try_write_all(int fd, std::string_view data) noexcept;

// Closes every descriptor >= 3 except those listed.
void close_fds_except(std::initializer_list<int> keep) noexcept;

// Listening SOCK_STREAM Unix socket, mode 0600, stale path removed first.
Fd listen_unix(const fs::path& path, int backlog = 128);
// Throws Error{transport_error} mentioning the path when nothing listens.
Fd connect_unix(const fs::path& path);

// Reads one '\n'-terminated line (newline stripped) from a blocking fd.
// Bytes after the newline are left in `carry`. Returns nullopt on EOF or
// timeout.
std::optional<std::string> read_line(int fd, std::string& carry,
                                     std::chrono::milliseconds timeout);

// One-shot request/response over a fresh connection to `socket`.
json request(const fs::path& socket, const json& req,
             std::chrono::milliseconds timeout = std::chrono::milliseconds(30000));

// A connected client that has sent a request and read its JSON reply line;
// anything after the reply is a Frame stream.
struct StreamSession {
  Fd fd;
  json reply;
  std::string carry;  // frame bytes read together with the reply line
};

StreamSession open_stream(const fs::path& socket, const json& req,
                          std::chrono::milliseconds timeout = std::chrono::milliseconds(30000));

}  // namespace hydra
