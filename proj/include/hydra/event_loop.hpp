#pragma once

// Single-threaded poll(2) reactor shared by the daemon and the monitor.
// Signals are turned into loop events through a self-pipe: the handler only
// writes the signal number, every callback runs on the loop thread.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "hydra/io.hpp"

namespace hydra {

class EventLoop {
 public:
  using FdCallback = std::function<void(short revents)>;
  using Task = std::function<void()>;
  using TimerId = std::uint64_t;
  using Clock = std::chrono::steady_clock;

  EventLoop();
  ~EventLoop();
  EventLoop(const EventLoop&) = delete;
  EventLoop& operator=(const EventLoop&) = delete;

  void watch(int fd, short events, FdCallback cb);
  void set_events(int fd, short events);
  void unwatch(int fd);

  TimerId after(std::chrono::milliseconds delay, Task task);
  TimerId every(std::chrono::milliseconds period, Task task);
  void cancel(TimerId id);

  // Runs `task` on the next iteration.
  void post(Task task);

  // At most one loop per process may own signal handlers.
  void on_signal(int signo, Task task);

  void run();
  void stop() { running_ = false; }

 private:
  struct Watch {
    short events;
    std::shared_ptr<FdCallback> cb;
  };
  struct Timer {
    Clock::time_point due;
    std::chrono::milliseconds period{0};
    std::shared_ptr<Task> task;
  };

  void drain_signals();
  void run_due_timers();
  int poll_timeout_ms() const;

  std::map<int, Watch> watches_;
  std::map<TimerId, Timer> timers_;
  TimerId next_timer_ = 1;
  std::vector<Task> posted_;
  std::map<int, Task> signal_tasks_;
  Pipe signal_pipe_;
  bool running_ = false;
};

// Non-blocking stream connection with an output queue.
class Connection : public std::enable_shared_from_this<Connection> {
 public:
  using DataCallback = std::function<void(std::string_view bytes)>;
  using CloseCallback = std::function<void()>;

  static constexpr std::size_t kMaxQueued = 16u << 20;

  Connection(EventLoop& loop, Fd fd);
  ~Connection();

  void start(DataCallback on_data, CloseCallback on_close);
  // Queues bytes; a peer that stops reading past kMaxQueued is dropped.
  void send(std::string_view bytes);
  void send_json(const json& j) { send(j.dump() + "\n"); }
  void close_after_flush();
  void close();
  // Stop delivering input (the request has been read).
  void pause_reading();

  bool closed() const noexcept { return !fd_; }
  int fd() const noexcept { return fd_.get(); }

 private:
  void on_ready(short revents);
  void flush();
  void update_interest();

  EventLoop& loop_;
  Fd fd_;
  std::string out_;
  bool reading_ = true;
  bool close_when_flushed_ = false;
  DataCallback on_data_;
  CloseCallback on_close_;
};

}  // namespace hydra
