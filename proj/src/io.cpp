#include "hydra/io.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/un.h>
#include <unistd.h>

namespace hydra {

namespace {

[[noreturn]] void throw_errno(ErrorCode code, const std::string& what, int err) {
  throw Error(code, what + ": " + std::strerror(err));
}

sockaddr_un make_addr(const fs::path& path) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  const auto& s = path.native();
  if (s.size() >= sizeof(addr.sun_path)) {
    throw Error(ErrorCode::invalid_argument, "socket path too long: " + s);
  }
  std::memcpy(addr.sun_path, s.c_str(), s.size() + 1);
  return addr;
}

bool is_socket(int fd) {
  struct stat st {};
  return ::fstat(fd, &st) == 0 && S_ISSOCK(st.st_mode);
}

}  // namespace

void Fd::reset(int fd) noexcept {
  if (fd_ >= 0) ::close(fd_);
  fd_ = fd;
}

Pipe make_pipe() {
  int fds[2];
  if (::pipe2(fds, O_CLOEXEC) != 0) throw_errno(ErrorCode::io_error, "pipe2", errno);
  return Pipe{Fd(fds[0]), Fd(fds[1])};
}

void set_nonblocking(int fd, bool on) {
  int flags = ::fcntl(fd, F_GETFL);
  if (flags < 0) throw_errno(ErrorCode::io_error, "fcntl", errno);
  flags = on ? (flags | O_NONBLOCK) : (flags & ~O_NONBLOCK);
  if (::fcntl(fd, F_SETFL, flags) != 0) throw_errno(ErrorCode::io_error, "fcntl", errno);
}

void set_cloexec(int fd, bool on) {
  int flags = ::fcntl(fd, F_GETFD);
  if (flags < 0) throw_errno(ErrorCode::io_error, "fcntl", errno);
  flags = on ? (flags | FD_CLOEXEC) : (flags & ~FD_CLOEXEC);
  if (::fcntl(fd, F_SETFD, flags) != 0) throw_errno(ErrorCode::io_error, "fcntl", errno);
}

bool try_write_all(int fd, std::string_view data) noexcept {
  const bool sock = is_socket(fd);
  std::size_t off = 0;
  while (off < data.size()) {
    ssize_t n = sock ? ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL)
                     : ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN) {
        pollfd p{fd, POLLOUT, 0};
        ::poll(&p, 1, 1000);
        continue;
      }
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

void write_all(int fd, std::string_view data) {
  if (!try_write_all(fd, data)) throw_errno(ErrorCode::io_error, "write", errno);
}

void close_fds_except(std::initializer_list<int> keep) noexcept {
  // Async-signal-safe: used between fork and exec.
  int sorted[16];
  int n = 0;
  for (int k : keep) {
    if (k >= 3 && n < 16) sorted[n++] = k;
  }
  std::sort(sorted, sorted + n);
  unsigned lo = 3;
  for (int i = 0; i < n; ++i) {
    auto k = static_cast<unsigned>(sorted[i]);
    if (k > lo) ::close_range(lo, k - 1, 0);
    lo = std::max(lo, k + 1);
  }
  ::close_range(lo, ~0U, 0);
}

Fd listen_unix(const fs::path& path, int backlog) {
  auto addr = make_addr(path);
  Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) throw_errno(ErrorCode::io_error, "socket", errno);
  ::unlink(path.c_str());
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    throw_errno(ErrorCode::io_error, "bind " + path.string(), errno);
  }
  ::chmod(path.c_str(), 0600);
  if (::listen(fd.get(), backlog) != 0) throw_errno(ErrorCode::io_error, "listen", errno);
  return fd;
}

Fd connect_unix(const fs::path& path) {
  auto addr = make_addr(path);
  Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) throw_errno(ErrorCode::transport_error, "socket", errno);
  while (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    if (errno == EINTR) continue;
    throw_errno(ErrorCode::transport_error, "cannot connect to " + path.string(), errno);
  }
  return fd;
}

std::optional<std::string> read_line(int fd, std::string& carry,
                                     std::chrono::milliseconds timeout) {
  using clock = std::chrono::steady_clock;
  const auto deadline = clock::now() + timeout;
  while (true) {
    auto nl = carry.find('\n');
    if (nl != std::string::npos) {
      std::string line = carry.substr(0, nl);
      carry.erase(0, nl + 1);
      return line;
    }
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now());
    if (left.count() <= 0) return std::nullopt;
    pollfd p{fd, POLLIN, 0};
    int r = ::poll(&p, 1, static_cast<int>(left.count()));
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return std::nullopt;
    char buf[4096];
    ssize_t n = ::read(fd, buf, sizeof(buf));
    if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
    if (n <= 0) return std::nullopt;
    carry.append(buf, static_cast<std::size_t>(n));
  }
}

StreamSession open_stream(const fs::path& socket, const json& req,
                          std::chrono::milliseconds timeout) {
  StreamSession s;
  s.fd = connect_unix(socket);
  if (!try_write_all(s.fd.get(), req.dump() + "\n")) {
    throw_errno(ErrorCode::transport_error, "send to " + socket.string(), errno);
  }
  auto line = read_line(s.fd.get(), s.carry, timeout);
  if (!line) {
    throw Error(ErrorCode::transport_error, "no reply from " + socket.string());
  }
  s.reply = json::parse(*line, nullptr, false);
  if (s.reply.is_discarded()) {
    throw Error(ErrorCode::transport_error, "malformed reply from " + socket.string());
  }
  return s;
}

json request(const fs::path& socket, const json& req, std::chrono::milliseconds timeout) {
  return open_stream(socket, req, timeout).reply;
}

}  // namespace hydra
