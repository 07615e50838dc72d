#pragma once

// HTTP control surface for a running simulation: snapshots as a server-sent
// event stream, commands as POSTs applied between ticks.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <future>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "otbed/simulation.hpp"

namespace httplib {
class Server;
}

namespace otbed::server {

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;                // 0 picks a free port
  double ticks_per_second = 0.0;  // 0 runs unpaced
  std::size_t queue_capacity = 64;
  std::size_t ring_capacity = 256;  // snapshots kept for late stream readers
  bool start_paused = false;
  bool exit_when_finished = true;
};

struct Submitted {
  int status = 200;  // 200 applied, 422 rejected, 503 queue full or loop gone
  nlohmann::json reply;
};

// GET /health, GET /snapshot, GET /stream[?since=seq], POST /command.
// Commands besides the simulation's own: pause, resume, step {ticks}.
class ControlServer {
 public:
  ControlServer(sim::Simulation& sim, ServerOptions opt);
  ~ControlServer();
  ControlServer(const ControlServer&) = delete;
  ControlServer& operator=(const ControlServer&) = delete;

  // Binds and starts serving HTTP on a background thread. Returns the port.
  // Throws std::runtime_error when the address cannot be bound.
  int start();
  // Drives the simulation in the calling thread until it finishes (and
  // exit_when_finished) or stop() is called. Calls sim.finish() at the end.
  void run();
  void stop();

  // Thread-safe; blocks until the loop has applied (or refused) the command.
  Submitted submit(const nlohmann::json& cmd);

  // Latest published snapshot and its sequence number (0 before the first).
  [[nodiscard]] std::pair<std::uint64_t, std::string> latest() const;
  [[nodiscard]] int port() const { return port_; }

 private:
  struct Pending {
    nlohmann::json cmd;
    std::promise<Submitted> reply;
  };

  void routes();
  void drain();
  Submitted apply(const nlohmann::json& cmd);
  void publish();
  // Events after `after`, oldest first; sets `gap` when some were evicted.
  std::vector<std::pair<std::uint64_t, std::string>> since(std::uint64_t after, bool& gap) const;

  sim::Simulation& sim_;
  ServerOptions opt_;
  std::unique_ptr<httplib::Server> http_;
  std::thread http_thread_;
  int port_ = 0;

  mutable std::mutex mu_;
  std::condition_variable wake_;       // loop: commands arrived or stop
  std::condition_variable published_;  // stream readers: new snapshot
  std::deque<Pending> queue_;
  std::deque<std::pair<std::uint64_t, std::string>> ring_;
  std::uint64_t seq_ = 0;
  bool stopping_ = false;
  bool done_ = false;

  // loop thread only
  bool paused_ = false;
  std::uint64_t step_budget_ = 0;
};

}  // namespace otbed::server
