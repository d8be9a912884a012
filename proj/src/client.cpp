#include "hydra/client.hpp"

#include <cerrno>
#include <cstdlib>

#include <poll.h>
#include <unistd.h>

namespace hydra {

const json& check_reply(const json& reply) {
  if (reply.value("ok", false)) return reply;
  const auto code =
      error_code_from_string(reply.value("error", "")).value_or(ErrorCode::transport_error);
  throw Error(code, reply.value("message", std::string(to_string(code))));
}

json DaemonClient::call(const json& req, std::chrono::milliseconds timeout) const {
  json reply = request(layout_.daemon_socket(), req, timeout);
  check_reply(reply);
  return reply;
}

json DaemonClient::run(const ContainerSpec& spec) const {
  return call(json{{"op", "run"}, {"spec", to_json(spec)}});
}

json DaemonClient::record(const ContainerId& id) const {
  return call(json{{"op", "inspect"}, {"id", id.str()}}).at("record");
}

std::vector<ContainerRecord> DaemonClient::ps() const {
  std::vector<ContainerRecord> out;
  const json reply = call(json{{"op", "ps"}});
  for (const auto& j : reply.at("containers")) out.push_back(record_from_json(j));
  return out;
}

bool DaemonClient::reachable() const {
  try {
    call(json{{"op", "status"}}, std::chrono::seconds(2));
    return true;
  } catch (const Error&) {
    return false;
  }
}

ContainerId DaemonClient::resolve(const std::string& s) const {
  if (ContainerId::is_valid(s)) return ContainerId::parse(s);
  if (s.empty()) throw Error(ErrorCode::invalid_argument, "empty container id");
  std::optional<ContainerId> match;
  for (const auto& rec : ps()) {
    if (rec.id.str().rfind(s, 0) != 0) continue;
    if (match) throw Error(ErrorCode::invalid_argument, "ambiguous container id prefix " + s);
    match = rec.id;
  }
  if (!match) throw Error(ErrorCode::not_found, "no such container " + s);
  return *match;
}

StreamEnd pump_frames(int fd, std::string carry,
                      const std::function<void(StreamTag, std::string_view)>& on_output) {
  FrameDecoder dec;
  dec.feed(carry);
  StreamEnd end;
  char buf[65536];
  while (true) {
    while (auto f = dec.next()) {
      if (f->tag == StreamTag::exit_notice) {
        end.exit = parse_exit_line(f->payload);
        return end;
      }
      if (f->tag != StreamTag::stdin_) on_output(f->tag, f->payload);
    }
    ssize_t n = ::read(fd, buf, sizeof(buf));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return end;
    dec.feed(std::string_view(buf, static_cast<std::size_t>(n)));
  }
}

StreamEnd run_session(StreamSession& session, int stdin_fd,
                      const std::function<void(StreamTag, std::string_view)>& on_output,
                      const std::function<void()>& on_tick) {
  FrameDecoder dec;
  dec.feed(session.carry);
  session.carry.clear();
  StreamEnd end;
  bool stdin_open = stdin_fd >= 0;
  char buf[65536];
  while (true) {
    while (auto f = dec.next()) {
      if (f->tag == StreamTag::exit_notice) {
        end.exit = parse_exit_line(f->payload);
        return end;
      }
      if (f->tag != StreamTag::stdin_) on_output(f->tag, f->payload);
    }
    pollfd fds[2] = {{session.fd.get(), POLLIN, 0}, {stdin_fd, POLLIN, 0}};
    int r = ::poll(fds, stdin_open ? 2 : 1, 100);
    if (on_tick) on_tick();
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) continue;
    if (fds[0].revents) {
      ssize_t n = ::read(session.fd.get(), buf, sizeof(buf));
      if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
      if (n <= 0) return end;
      dec.feed(std::string_view(buf, static_cast<std::size_t>(n)));
    }
    if (stdin_open && fds[1].revents) {
      ssize_t n = ::read(stdin_fd, buf, sizeof(buf));
      if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
      const std::string_view chunk(buf, n > 0 ? static_cast<std::size_t>(n) : 0);
      if (!try_write_all(session.fd.get(), encode_frame(StreamTag::stdin_, chunk))) return end;
      if (n <= 0) stdin_open = false;
    }
  }
}

fs::path default_state_dir() {
  if (const char* env = std::getenv("HYDRA_STATE_DIR"); env && *env) return env;
  if (::geteuid() == 0) return "/run/hydra";
  if (const char* xdg = std::getenv("XDG_RUNTIME_DIR"); xdg && *xdg) return fs::path(xdg) / "hydra";
  return "/tmp/hydra-" + std::to_string(::geteuid());
}

}  // namespace hydra
