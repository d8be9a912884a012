#include "hydra/sandbox.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <dirent.h>
#include <fcntl.h>
#include <sched.h>
#include <sys/mount.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

namespace hydra {

namespace {

constexpr const char* kDefaultPath = "PATH=/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

struct ChildFailure {
  int stage;  // 0 exec, 1 chdir, 2 namespace setup, 3 dup2
  int err;
};

[[noreturn]] void child_fail(int fd, int stage) {
  ChildFailure f{stage, errno};
  [[maybe_unused]] auto n = ::write(fd, &f, sizeof(f));
  ::_exit(127);
}

void reset_signals_in_child() {
  sigset_t all;
  sigemptyset(&all);
  ::sigprocmask(SIG_SETMASK, &all, nullptr);
  struct sigaction dfl {};
  dfl.sa_handler = SIG_DFL;
  for (int s = 1; s < NSIG; ++s) {
    if (s == SIGKILL || s == SIGSTOP) continue;
    ::sigaction(s, &dfl, nullptr);
  }
}

const char* stage_name(int stage) {
  switch (stage) {
    case 0:
      return "exec";
    case 1:
      return "chdir";
    case 2:
      return "namespace setup";
    default:
      return "stdio setup";
  }
}

}  // namespace

void reset_signal_state() noexcept { reset_signals_in_child(); }

std::optional<ProcStat> read_proc_stat(int pid) {
  if (pid <= 0) return std::nullopt;
  std::ifstream in("/proc/" + std::to_string(pid) + "/stat");
  if (!in) return std::nullopt;
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto open = text.find('(');
  auto close = text.rfind(')');
  if (open == std::string::npos || close == std::string::npos || close < open) return std::nullopt;

  ProcStat st;
  st.pid = pid;
  st.comm = text.substr(open + 1, close - open - 1);
  std::istringstream rest(text.substr(close + 2));
  std::vector<std::string> f;
  std::string tok;
  while (rest >> tok) f.push_back(tok);
  // f[0] is field 3 (state) of proc(5).
  if (f.size() < 22) return std::nullopt;
  try {
    st.state = f[0].empty() ? '?' : f[0][0];
    st.ppid = std::stoi(f[1]);
    st.pgid = std::stoi(f[2]);
    st.utime = std::stoull(f[11]);
    st.stime = std::stoull(f[12]);
    st.start_ticks = std::stoull(f[19]);
    st.rss_pages = std::stoll(f[21]);
  } catch (const std::exception&) {
    return std::nullopt;
  }
  return st;
}

std::optional<ProcessIdentity> identity_of(int pid) {
  auto st = read_proc_stat(pid);
  if (!st || st->state == 'Z' || st->state == 'X') return std::nullopt;
  return ProcessIdentity{pid, st->start_ticks};
}

bool is_alive(const ProcessIdentity& identity) {
  auto st = read_proc_stat(identity.pid);
  return st && st->state != 'Z' && st->state != 'X' && st->start_ticks == identity.start_ticks;
}

ProcSample sample_proc(int pgid) {
  ProcSample sample;
  sample.sampled_at = now_epoch_ms();
  if (pgid <= 1) return sample;

  std::map<int, ProcStat> procs;
  if (DIR* d = ::opendir("/proc")) {
    while (dirent* e = ::readdir(d)) {
      if (e->d_name[0] < '0' || e->d_name[0] > '9') continue;
      int pid = std::atoi(e->d_name);
      if (auto st = read_proc_stat(pid)) procs.emplace(pid, std::move(*st));
    }
    ::closedir(d);
  }

  const long page = ::sysconf(_SC_PAGESIZE);
  for (const auto& [pid, st] : procs) {
    if (st.state == 'Z' || st.state == 'X') continue;
    bool member = st.pgid == pgid || pid == pgid;
    // Walk the ancestry; bounded to guard against a racy cycle.
    int cur = st.ppid;
    for (int hops = 0; !member && cur > 1 && hops < 4096; ++hops) {
      if (cur == pgid) member = true;
      auto it = procs.find(cur);
      if (it == procs.end()) break;
      cur = it->second.ppid;
    }
    if (!member) continue;
    sample.rows.push_back(ProcRow{pid, st.ppid, st.comm, st.utime + st.stime,
                                  st.rss_pages * page, st.state});
  }
  return sample;
}

std::vector<std::string> container_environment(const ContainerSpec& spec) {
  std::vector<std::string> env = spec.env;
  bool has_path = false;
  for (const auto& e : env) has_path = has_path || e.rfind("PATH=", 0) == 0;
  if (!has_path) env.emplace_back(kDefaultPath);
  return env;
}

SandboxHandle spawn(const ContainerSpec& spec, const SandboxOptions& opts) {
  spec.validate();

  // Everything the child touches is prepared before fork.
  std::vector<std::string> env_storage = container_environment(spec);
  std::vector<char*> argv;
  for (const auto& a : spec.command) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  std::vector<char*> envp;
  for (const auto& e : env_storage) envp.push_back(const_cast<char*>(e.c_str()));
  envp.push_back(nullptr);
  const char* workdir = spec.working_dir ? spec.working_dir->c_str() : nullptr;
  const char* hostname = opts.hostname ? opts.hostname->c_str() : nullptr;
  const bool isolate = spec.isolation == Isolation::namespaces;
  const pid_t parent = ::getpid();

  Pipe in = make_pipe();
  Pipe out = make_pipe();
  Pipe err = make_pipe();
  Pipe status = make_pipe();

  pid_t pid;
  if (isolate) {
    pid = static_cast<pid_t>(::syscall(SYS_clone, CLONE_NEWPID | CLONE_NEWNS | CLONE_NEWUTS | SIGCHLD,
                                       nullptr, nullptr, nullptr, nullptr));
  } else {
    pid = ::fork();
  }
  if (pid < 0) {
    int e = errno;
    if (isolate && (e == EPERM || e == EINVAL || e == ENOSPC || e == EUSERS)) {
      throw Error(ErrorCode::isolation_unsupported,
                  std::string("cannot create namespaces: ") + std::strerror(e));
    }
    throw Error(ErrorCode::spawn_error, std::string("fork: ") + std::strerror(e));
  }

  if (pid == 0) {
    const int report = status.write.get();
    reset_signals_in_child();
    if (opts.die_with_parent) {
      ::prctl(PR_SET_PDEATHSIG, SIGKILL);
      if (!isolate && ::getppid() != parent) ::_exit(127);
    }
    ::setpgid(0, 0);
    if (isolate) {
      if (::mount(nullptr, "/", nullptr, MS_REC | MS_PRIVATE, nullptr) != 0) child_fail(report, 2);
      if (::mount("proc", "/proc", "proc", MS_NOSUID | MS_NODEV | MS_NOEXEC, nullptr) != 0) {
        child_fail(report, 2);
      }
      if (hostname && ::sethostname(hostname, std::strlen(hostname)) != 0) child_fail(report, 2);
    }
    if (::dup2(in.read.get(), 0) < 0 || ::dup2(out.write.get(), 1) < 0 ||
        ::dup2(err.write.get(), 2) < 0) {
      child_fail(report, 3);
    }
    close_fds_except({report});
    if (workdir && ::chdir(workdir) != 0) child_fail(report, 1);
    ::execvpe(argv[0], argv.data(), envp.data());
    child_fail(report, 0);
  }

  in.read.reset();
  out.write.reset();
  err.write.reset();
  status.write.reset();

  ChildFailure failure{};
  ssize_t got;
  do {
    got = ::read(status.read.get(), &failure, sizeof(failure));
  } while (got < 0 && errno == EINTR);

  if (got == static_cast<ssize_t>(sizeof(failure))) {
    int st = 0;
    while (::waitpid(pid, &st, 0) < 0 && errno == EINTR) {
    }
    ErrorCode code = failure.stage == 0 ? ErrorCode::exec_failure : ErrorCode::spawn_error;
    throw Error(code, std::string(stage_name(failure.stage)) + " '" + spec.command.front() +
                          "': " + std::strerror(failure.err));
  }

  SandboxHandle h;
  h.started_at = now_epoch_ms();
  auto st = read_proc_stat(pid);
  h.container = ProcessIdentity{pid, st ? st->start_ticks : 0};
  h.pgid = pid;
  h.isolation = spec.isolation;
  h.stdin_w = std::move(in.write);
  h.stdout_r = std::move(out.read);
  h.stderr_r = std::move(err.read);
  return h;
}

ExecHandle spawn_in_sandbox(const SandboxHandle& target, const std::vector<std::string>& argv_in,
                            const std::vector<std::string>& env_in) {
  if (argv_in.empty() || argv_in.front().empty()) {
    throw Error(ErrorCode::invalid_argument, "exec needs a command");
  }
  std::vector<char*> argv;
  for (const auto& a : argv_in) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  std::vector<char*> envp;
  for (const auto& e : env_in) envp.push_back(const_cast<char*>(e.c_str()));
  envp.push_back(nullptr);

  const bool isolate = target.isolation == Isolation::namespaces;
  Fd ns_uts, ns_mnt, ns_pid;
  if (isolate) {
    const std::string base = "/proc/" + std::to_string(target.container.pid) + "/ns/";
    ns_uts.reset(::open((base + "uts").c_str(), O_RDONLY | O_CLOEXEC));
    ns_mnt.reset(::open((base + "mnt").c_str(), O_RDONLY | O_CLOEXEC));
    ns_pid.reset(::open((base + "pid").c_str(), O_RDONLY | O_CLOEXEC));
    if (!ns_uts || !ns_mnt || !ns_pid) {
      throw Error(ErrorCode::not_running, "container namespaces are gone");
    }
  }
  const int pgid = target.pgid;

  Pipe in = make_pipe();
  Pipe out = make_pipe();
  Pipe err = make_pipe();
  Pipe status = make_pipe();

  pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::spawn_error, std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    const int report = status.write.get();
    reset_signals_in_child();
    if (isolate) {
      if (::setns(ns_uts.get(), CLONE_NEWUTS) != 0 || ::setns(ns_mnt.get(), CLONE_NEWNS) != 0 ||
          ::setns(ns_pid.get(), CLONE_NEWPID) != 0) {
        child_fail(report, 2);
      }
      // Only children of a setns(CLONE_NEWPID) caller enter the namespace.
      pid_t inner = ::fork();
      if (inner < 0) child_fail(report, 2);
      if (inner > 0) {
        ::close(report);
        ::close(in.read.get());
        ::close(out.write.get());
        ::close(err.write.get());
        int st = 0;
        while (::waitpid(inner, &st, 0) < 0 && errno == EINTR) {
        }
        if (WIFSIGNALED(st)) {
          ::signal(WTERMSIG(st), SIG_DFL);
          ::kill(::getpid(), WTERMSIG(st));
          ::_exit(128 + WTERMSIG(st));
        }
        ::_exit(WEXITSTATUS(st));
      }
      [[maybe_unused]] int rc = ::chdir("/");
    } else {
      ::setpgid(0, pgid);
    }
    if (::dup2(in.read.get(), 0) < 0 || ::dup2(out.write.get(), 1) < 0 ||
        ::dup2(err.write.get(), 2) < 0) {
      child_fail(report, 3);
    }
    close_fds_except({report});
    ::execvpe(argv[0], argv.data(), envp.data());
    child_fail(report, 0);
  }

  in.read.reset();
  out.write.reset();
  err.write.reset();
  status.write.reset();

  ChildFailure failure{};
  ssize_t got;
  do {
    got = ::read(status.read.get(), &failure, sizeof(failure));
  } while (got < 0 && errno == EINTR);
  if (got == static_cast<ssize_t>(sizeof(failure))) {
    int st = 0;
    while (::waitpid(pid, &st, 0) < 0 && errno == EINTR) {
    }
    ErrorCode code = failure.stage == 0 ? ErrorCode::exec_failure : ErrorCode::spawn_error;
    throw Error(code, std::string(stage_name(failure.stage)) + " '" + argv_in.front() +
                          "': " + std::strerror(failure.err));
  }
  ExecHandle h;
  h.pid = pid;
  h.stdin_w = std::move(in.write);
  h.stdout_r = std::move(out.read);
  h.stderr_r = std::move(err.read);
  return h;
}

void signal_group(int pgid, int signo) {
  // kill(-1) and kill(0) would hit far more than one container.
  if (pgid <= 1) throw Error(ErrorCode::invalid_argument, "refusing to signal pgid " + std::to_string(pgid));
  if (::kill(-pgid, signo) == 0) return;
  if (errno == ESRCH) return;
  if (errno == EPERM) {
    throw Error(ErrorCode::permission_denied, "signal group " + std::to_string(pgid));
  }
  throw Error(ErrorCode::signal_failure,
              "signal group " + std::to_string(pgid) + ": " + std::strerror(errno));
}

ExitReport report_from_status(const ContainerId& id, int status, std::int64_t at) {
  if (WIFSIGNALED(status)) return ExitReport::with_signal(id, WTERMSIG(status), at);
  return ExitReport::with_code(id, WEXITSTATUS(status), at);
}

ExitReport wait_exit(const SandboxHandle& h, const ContainerId& id) {
  int status = 0;
  while (true) {
    pid_t r = ::waitpid(h.container.pid, &status, 0);
    if (r == h.container.pid) break;
    if (r < 0 && errno == EINTR) continue;
    if (r < 0 && errno == ECHILD) {
      throw Error(ErrorCode::not_parent,
                  "pid " + std::to_string(h.container.pid) + " is not a child of this process");
    }
    throw Error(ErrorCode::io_error, std::string("waitpid: ") + std::strerror(errno));
  }
  return report_from_status(id, status, now_epoch_ms());
}

std::optional<ExitReport> try_wait_exit(const SandboxHandle& h, const ContainerId& id) {
  int status = 0;
  pid_t r;
  do {
    r = ::waitpid(h.container.pid, &status, WNOHANG);
  } while (r < 0 && errno == EINTR);
  if (r == 0) return std::nullopt;
  if (r < 0) {
    if (errno == ECHILD) {
      throw Error(ErrorCode::not_parent,
                  "pid " + std::to_string(h.container.pid) + " is not a child of this process");
    }
    throw Error(ErrorCode::io_error, std::string("waitpid: ") + std::strerror(errno));
  }
  return report_from_status(id, status, now_epoch_ms());
}

}  // namespace hydra
