#include "hydra/event_loop.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace hydra {

namespace {

int g_signal_write_fd = -1;

extern "C" void forward_signal(int signo) {
  const int saved = errno;
  const auto byte = static_cast<unsigned char>(signo);
  if (g_signal_write_fd >= 0) {
    [[maybe_unused]] auto n = ::write(g_signal_write_fd, &byte, 1);
  }
  errno = saved;
}

}  // namespace

EventLoop::EventLoop() : signal_pipe_(make_pipe()) {
  set_nonblocking(signal_pipe_.read.get());
  set_nonblocking(signal_pipe_.write.get());
  watch(signal_pipe_.read.get(), POLLIN, [this](short) { drain_signals(); });
}

EventLoop::~EventLoop() {
  for (const auto& [signo, task] : signal_tasks_) {
    struct sigaction sa {};
    sa.sa_handler = SIG_DFL;
    ::sigaction(signo, &sa, nullptr);
  }
  if (!signal_tasks_.empty()) g_signal_write_fd = -1;
}

void EventLoop::watch(int fd, short events, FdCallback cb) {
  watches_[fd] = Watch{events, std::make_shared<FdCallback>(std::move(cb))};
}

void EventLoop::set_events(int fd, short events) {
  auto it = watches_.find(fd);
  if (it != watches_.end()) it->second.events = events;
}

void EventLoop::unwatch(int fd) { watches_.erase(fd); }

EventLoop::TimerId EventLoop::after(std::chrono::milliseconds delay, Task task) {
  TimerId id = next_timer_++;
  timers_[id] = Timer{Clock::now() + delay, std::chrono::milliseconds(0),
                      std::make_shared<Task>(std::move(task))};
  return id;
}

EventLoop::TimerId EventLoop::every(std::chrono::milliseconds period, Task task) {
  TimerId id = next_timer_++;
  timers_[id] = Timer{Clock::now() + period, period, std::make_shared<Task>(std::move(task))};
  return id;
}

void EventLoop::cancel(TimerId id) { timers_.erase(id); }

void EventLoop::post(Task task) { posted_.push_back(std::move(task)); }

void EventLoop::on_signal(int signo, Task task) {
  g_signal_write_fd = signal_pipe_.write.get();
  signal_tasks_[signo] = std::move(task);
  struct sigaction sa {};
  sa.sa_handler = forward_signal;
  sigemptyset(&sa.sa_mask);
  sa.sa_flags = SA_RESTART;
  if (::sigaction(signo, &sa, nullptr) != 0) {
    throw Error(ErrorCode::io_error, std::string("sigaction: ") + std::strerror(errno));
  }
}

void EventLoop::drain_signals() {
  unsigned char buf[256];
  while (true) {
    ssize_t n = ::read(signal_pipe_.read.get(), buf, sizeof(buf));
    if (n <= 0) break;
    // Coalesce: one callback per distinct signal per drain.
    bool seen[256] = {};
    for (ssize_t i = 0; i < n; ++i) seen[buf[i]] = true;
    for (int s = 0; s < 256; ++s) {
      if (!seen[s]) continue;
      auto it = signal_tasks_.find(s);
      if (it != signal_tasks_.end()) {
        Task t = it->second;
        t();
      }
    }
  }
}

void EventLoop::run_due_timers() {
  const auto now = Clock::now();
  std::vector<std::pair<TimerId, std::shared_ptr<Task>>> due;
  for (auto& [id, t] : timers_) {
    if (t.due <= now) due.emplace_back(id, t.task);
  }
  for (auto& [id, task] : due) {
    auto it = timers_.find(id);
    if (it == timers_.end()) continue;  // cancelled by an earlier timer
    if (it->second.period.count() > 0) {
      it->second.due = now + it->second.period;
    } else {
      timers_.erase(it);
    }
    (*task)();
  }
}

int EventLoop::poll_timeout_ms() const {
  if (!posted_.empty()) return 0;
  if (timers_.empty()) return 1000;
  auto next = Clock::time_point::max();
  for (const auto& [id, t] : timers_) next = std::min(next, t.due);
  auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(next - Clock::now()).count();
  if (ms < 0) return 0;
  return static_cast<int>(std::min<long long>(ms + 1, 1000));
}

void EventLoop::run() {
  running_ = true;
  std::vector<pollfd> fds;
  while (running_) {
    auto posted = std::move(posted_);
    posted_.clear();
    for (auto& t : posted) {
      t();
      if (!running_) return;
    }

    fds.clear();
    for (const auto& [fd, w] : watches_) fds.push_back(pollfd{fd, w.events, 0});
    int r = ::poll(fds.data(), fds.size(), poll_timeout_ms());
    if (r < 0 && errno != EINTR) {
      throw Error(ErrorCode::io_error, std::string("poll: ") + std::strerror(errno));
    }
    if (r > 0) {
      for (const auto& p : fds) {
        if (p.revents == 0) continue;
        auto it = watches_.find(p.fd);
        if (it == watches_.end()) continue;
        auto cb = it->second.cb;  // keep alive across unwatch
        (*cb)(p.revents);
        if (!running_) return;
      }
    }
    run_due_timers();
  }
}

Connection::Connection(EventLoop& loop, Fd fd) : loop_(loop), fd_(std::move(fd)) {
  set_nonblocking(fd_.get());
}

Connection::~Connection() {
  if (fd_) loop_.unwatch(fd_.get());
}

void Connection::start(DataCallback on_data, CloseCallback on_close) {
  on_data_ = std::move(on_data);
  on_close_ = std::move(on_close);
  std::weak_ptr<Connection> weak = shared_from_this();
  loop_.watch(fd_.get(), POLLIN, [weak](short revents) {
    if (auto self = weak.lock()) self->on_ready(revents);
  });
}

void Connection::pause_reading() {
  reading_ = false;
  update_interest();
}

void Connection::update_interest() {
  if (!fd_) return;
  short ev = 0;
  if (reading_) ev |= POLLIN;
  if (!out_.empty()) ev |= POLLOUT;
  loop_.set_events(fd_.get(), ev);
}

void Connection::send(std::string_view bytes) {
  if (!fd_) return;
  out_.append(bytes);
  if (out_.size() > kMaxQueued) {
    close();
    return;
  }
  flush();
}

void Connection::flush() {
  while (fd_ && !out_.empty()) {
    ssize_t n = ::send(fd_.get(), out_.data(), out_.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN) break;
      close();
      return;
    }
    out_.erase(0, static_cast<std::size_t>(n));
  }
  if (!fd_) return;
  if (out_.empty() && close_when_flushed_) {
    close();
    return;
  }
  update_interest();
}

void Connection::close_after_flush() {
  close_when_flushed_ = true;
  reading_ = false;
  flush();
}

void Connection::close() {
  if (!fd_) return;
  loop_.unwatch(fd_.get());
  fd_.reset();
  out_.clear();
  auto cb = std::move(on_close_);
  on_close_ = nullptr;
  on_data_ = nullptr;
  if (cb) cb();
}

void Connection::on_ready(short revents) {
  auto self = shared_from_this();
  if (revents & POLLOUT) flush();
  if (!fd_) return;
  if (revents & (POLLIN | POLLHUP | POLLERR)) {
    if (!reading_) {
      // Peer hung up while we only write: stop polling once drained.
      if (revents & (POLLHUP | POLLERR)) close();
      return;
    }
    char buf[65536];
    ssize_t n = ::recv(fd_.get(), buf, sizeof(buf), 0);
    if (n < 0 && (errno == EINTR || errno == EAGAIN)) return;
    if (n <= 0) {
      close();
      return;
    }
    if (on_data_) {
      auto cb = on_data_;
      cb(std::string_view(buf, static_cast<std::size_t>(n)));
    }
  }
}

}  // namespace hydra
