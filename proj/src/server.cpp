#include "otbed/server.hpp"

#include <chrono>
#include <stdexcept>

#include <httplib.h>

namespace otbed::server {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

json fail(const std::string& why) { return {{"ok", false}, {"error", why}}; }

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

}  // namespace

ControlServer::ControlServer(sim::Simulation& sim, ServerOptions opt) : sim_(sim), opt_(std::move(opt)) {
  if (opt_.queue_capacity == 0) opt_.queue_capacity = 1;
  if (opt_.ring_capacity == 0) opt_.ring_capacity = 1;
}

ControlServer::~ControlServer() { stop(); }

int ControlServer::start() {
  http_ = std::make_unique<httplib::Server>();
  routes();
  if (opt_.port == 0) {
    port_ = http_->bind_to_any_port(opt_.host);
    if (port_ <= 0) throw std::runtime_error("cannot bind " + opt_.host);
  } else {
    if (!http_->bind_to_port(opt_.host, opt_.port))
      throw std::runtime_error("cannot bind " + opt_.host + ":" + std::to_string(opt_.port));
    port_ = opt_.port;
  }
  http_thread_ = std::thread([this] { http_->listen_after_bind(); });
  return port_;
}

void ControlServer::stop() {
  {
    std::lock_guard lk(mu_);
    stopping_ = true;
  }
  wake_.notify_all();
  published_.notify_all();
  if (http_) http_->stop();
  if (http_thread_.joinable()) http_thread_.join();
}

void ControlServer::routes() {
  auto& s = *http_;
  s.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

  s.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    std::lock_guard lk(mu_);
    send_json(res, 200, {{"ok", true}, {"seq", seq_}, {"finished", done_}, {"queued", queue_.size()}});
  });

  s.Get("/snapshot", [this](const httplib::Request&, httplib::Response& res) {
    const auto [seq, body] = latest();
    if (seq == 0) return send_json(res, 503, fail("no snapshot yet"));
    res.set_content(body, "application/json");
  });

  s.Get("/stream", [this](const httplib::Request& req, httplib::Response& res) {
    std::uint64_t after = 0;
    if (req.has_param("since")) {
      try {
        std::size_t used = 0;
        const auto v = req.get_param_value("since");
        after = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        return send_json(res, 400, fail("since must be a snapshot sequence number"));
      }
    } else {
      // start from the current snapshot
      const auto seq = latest().first;
      after = seq > 0 ? seq - 1 : 0;
    }
    auto last = std::make_shared<std::uint64_t>(after);
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [this, last](std::size_t, httplib::DataSink& sink) {
      bool finished = false;
      {
        std::unique_lock lk(mu_);
        published_.wait_for(lk, std::chrono::seconds(1), [&] { return seq_ > *last || done_ || stopping_; });
        finished = done_ || stopping_;
      }
      bool gap = false;
      const auto events = since(*last, gap);
      std::string out;
      if (gap) out += "event: gap\ndata: {}\n\n";
      for (const auto& [seq, body] : events) {
        out += "id: " + std::to_string(seq) + "\nevent: snapshot\ndata: " + body + "\n\n";
        *last = seq;
      }
      if (out.empty() && !finished) out = ": idle\n\n";
      if (!out.empty() && !sink.write(out.data(), out.size())) return false;
      if (finished && events.empty()) {
        const std::string end = "event: end\ndata: {}\n\n";
        sink.write(end.data(), end.size());
        sink.done();
      }
      return true;
    });
  });

  s.Post("/command", [this](const httplib::Request& req, httplib::Response& res) {
    json cmd;
    try {
      cmd = json::parse(req.body);
    } catch (const json::parse_error& e) {
      return send_json(res, 400, fail(std::string("body is not JSON: ") + e.what()));
    }
    if (!cmd.is_object() || !cmd.contains("cmd") || !cmd["cmd"].is_string())
      return send_json(res, 400, fail("command must be an object with a string 'cmd'"));
    const auto r = submit(cmd);
    send_json(res, r.status, r.reply);
  });
}

Submitted ControlServer::submit(const json& cmd) {
  Pending p{cmd, {}};
  auto fut = p.reply.get_future();
  {
    std::lock_guard lk(mu_);
    if (done_ || stopping_) return {503, fail("simulation loop has stopped")};
    if (queue_.size() >= opt_.queue_capacity) return {503, fail("command queue full")};
    queue_.push_back(std::move(p));
  }
  wake_.notify_all();
  if (fut.wait_for(std::chrono::seconds(30)) != std::future_status::ready)
    return {503, fail("simulation loop did not answer")};
  return fut.get();
}

std::pair<std::uint64_t, std::string> ControlServer::latest() const {
  std::lock_guard lk(mu_);
  if (ring_.empty()) return {0, {}};
  return ring_.back();
}

std::vector<std::pair<std::uint64_t, std::string>> ControlServer::since(std::uint64_t after, bool& gap) const {
  std::lock_guard lk(mu_);
  std::vector<std::pair<std::uint64_t, std::string>> out;
  gap = !ring_.empty() && ring_.front().first > after + 1;
  for (const auto& e : ring_)
    if (e.first > after) out.push_back(e);
  return out;
}

void ControlServer::publish() {
  json snap = sim_.snapshot();
  snap["paused"] = paused_;
  snap["finished"] = sim_.finished();
  std::lock_guard lk(mu_);
  snap["seq"] = ++seq_;
  ring_.emplace_back(seq_, snap.dump());
  while (ring_.size() > opt_.ring_capacity) ring_.pop_front();
  published_.notify_all();
}

Submitted ControlServer::apply(const json& cmd) {
  const std::string name = cmd.value("cmd", "");
  auto only = [&](std::initializer_list<const char*> keys) {
    for (const auto& [k, v] : cmd.items()) {
      bool known = k == "cmd";
      for (const char* a : keys) known = known || k == a;
      if (!known) return false;
    }
    return true;
  };
  json ok{{"ok", true}, {"tick", sim_.now()}};
  if (name == "pause" || name == "resume") {
    if (!only({})) return {422, fail("unknown field for " + name)};
    paused_ = name == "pause";
    step_budget_ = 0;
    publish();
    return {200, ok};
  }
  if (name == "step") {
    if (!only({"ticks"})) return {422, fail("unknown field for step")};
    std::int64_t n = 1;
    if (cmd.contains("ticks")) {
      if (!cmd["ticks"].is_number_integer() || cmd["ticks"].get<std::int64_t>() < 1)
        return {422, fail("step needs a positive integer 'ticks'")};
      n = cmd["ticks"].get<std::int64_t>();
    }
    paused_ = true;
    step_budget_ = static_cast<std::uint64_t>(n);
    ok["ticks"] = n;
    return {200, ok};
  }
  auto r = sim_.command(cmd);
  const bool accepted = r.value("ok", false);
  if (accepted) publish();
  return {accepted ? 200 : 422, r};
}

void ControlServer::drain() {
  for (;;) {
    Pending p;
    {
      std::lock_guard lk(mu_);
      if (queue_.empty()) return;
      p = std::move(queue_.front());
      queue_.pop_front();
    }
    p.reply.set_value(apply(p.cmd));
  }
}

void ControlServer::run() {
  paused_ = opt_.start_paused;
  publish();
  const bool paced = opt_.ticks_per_second > 0;
  const auto dt = std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(paced ? 1.0 / opt_.ticks_per_second : 0.0));
  auto next = Clock::now();
  const auto ready = [&] { return stopping_ || !queue_.empty(); };
  const auto wait = [&] {
    std::unique_lock lk(mu_);
    wake_.wait(lk, ready);
  };
  // true when woken by a command or stop before the deadline
  const auto wait_until = [&](Clock::time_point t) {
    std::unique_lock lk(mu_);
    return wake_.wait_until(lk, t, ready);
  };

  for (;;) {
    drain();
    {
      std::lock_guard lk(mu_);
      if (stopping_) break;
    }
    if (sim_.finished()) {
      if (opt_.exit_when_finished) break;
      wait();
      continue;
    }
    if (paused_ && step_budget_ == 0) {
      wait();
      next = Clock::now();
      continue;
    }
    if (paced && Clock::now() < next && wait_until(next)) continue;  // a command came in first

    sim_.step();
    if (step_budget_ > 0) --step_budget_;
    if (paced) next = std::max(next + dt, Clock::now() - dt);
    const bool boundary = sim_.now() % sim_.config().snapshot_period == 0;
    if (boundary || sim_.finished() || (paused_ && step_budget_ == 0)) publish();
  }

  sim_.finish();
  publish();
  std::deque<Pending> left;
  {
    std::lock_guard lk(mu_);
    done_ = true;
    left.swap(queue_);
  }
  for (auto& p : left) p.reply.set_value({503, fail("simulation loop has stopped")});
  published_.notify_all();
}

}  // namespace otbed::server
