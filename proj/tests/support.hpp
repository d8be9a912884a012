#pragma once

// Helpers shared by the test binaries.

#include <dirent.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hydra/protocol.hpp"

namespace testsupport {

namespace fs = std::filesystem;

inline fs::path hydra_bin() { return HYDRA_BIN; }
inline fs::path bench_bin() { return HYDRA_BENCH_BIN; }

// Fresh absolute directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    std::string tmpl = (fs::temp_directory_path() / ("hydra-" + tag + "-XXXXXX")).string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline bool wait_until(const std::function<bool()>& pred, std::chrono::milliseconds timeout,
                       std::chrono::milliseconds step = std::chrono::milliseconds(10)) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    if (pred()) return true;
    if (std::chrono::steady_clock::now() >= deadline) return false;
    std::this_thread::sleep_for(step);
  }
}

// Minimal /proc reader written separately from the sandbox module so the
// tests do not check the code with itself.
struct RawProc {
  int pid = 0;
  int ppid = 0;
  int pgid = 0;
  char state = '?';
  std::string comm;
  long rss_pages = 0;
};

inline bool read_raw_proc(int pid, RawProc& out) {
  std::ifstream in("/proc/" + std::to_string(pid) + "/stat");
  std::string line;
  if (!std::getline(in, line)) return false;
  auto open = line.find('(');
  auto close = line.rfind(')');
  if (open == std::string::npos || close == std::string::npos) return false;
  out.pid = pid;
  out.comm = line.substr(open + 1, close - open - 1);
  std::istringstream rest(line.substr(close + 2));
  std::vector<std::string> f;
  std::string tok;
  while (rest >> tok) f.push_back(tok);
  // f[0] = state (field 3), f[1] = ppid, f[2] = pgrp, f[21] = rss (field 24)
  if (f.size() < 22) return false;
  out.state = f[0][0];
  out.ppid = std::stoi(f[1]);
  out.pgid = std::stoi(f[2]);
  out.rss_pages = std::stol(f[21]);
  return true;
}

inline std::vector<RawProc> all_procs() {
  std::vector<RawProc> out;
  DIR* d = ::opendir("/proc");
  if (!d) return out;
  while (dirent* e = ::readdir(d)) {
    char* end = nullptr;
    long pid = std::strtol(e->d_name, &end, 10);
    if (*end != '\0' || pid <= 0) continue;
    RawProc p;
    if (read_raw_proc(static_cast<int>(pid), p)) out.push_back(p);
  }
  ::closedir(d);
  return out;
}

// Non-zombie processes in the subtree rooted at `root` (root included).
inline std::vector<RawProc> live_subtree(int root) {
  auto procs = all_procs();
  std::map<int, std::vector<int>> kids;
  std::map<int, RawProc> by_pid;
  for (auto& p : procs) {
    kids[p.ppid].push_back(p.pid);
    by_pid[p.pid] = p;
  }
  std::vector<RawProc> out;
  std::vector<int> stack{root};
  std::set<int> seen;
  while (!stack.empty()) {
    int pid = stack.back();
    stack.pop_back();
    if (!seen.insert(pid).second) continue;
    auto it = by_pid.find(pid);
    if (it == by_pid.end()) continue;
    if (it->second.state != 'Z' && it->second.state != 'X') out.push_back(it->second);
    for (int k : kids[pid]) stack.push_back(k);
  }
  return out;
}

inline char proc_state(int pid) {
  RawProc p;
  return read_raw_proc(pid, p) ? p.state : '\0';
}

// Monitors orphaned by a killed daemon re-parent to us; reap them.
inline void become_subreaper() { ::prctl(PR_SET_CHILD_SUBREAPER, 1); }

inline void reap_zombie_children() {
  int self = ::getpid();
  for (auto& p : all_procs()) {
    if (p.ppid == self && p.state == 'Z') ::waitpid(p.pid, nullptr, WNOHANG);
  }
}

struct CmdResult {
  int status = -1;
  std::string out;
  std::string err;
};

// Runs the hydra CLI with `args`, capturing stdout and stderr. `input` is fed
// on stdin (closed afterwards).
CmdResult run_hydra(const fs::path& state_dir, const std::vector<std::string>& args,
                    const std::string& input = {});

}  // namespace testsupport
