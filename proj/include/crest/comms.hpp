#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <queue>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "crest/config.hpp"
#include "crest/error.hpp"

namespace crest {

namespace comms_detail {

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  // splitmix64 finalizer applied to a running combination.
  std::uint64_t z = h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix(std::uint64_t h, const std::string& s) {
  // FNV-1a over the bytes, so keys do not depend on std::hash.
  std::uint64_t f = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) f = (f ^ c) * 0x100000001b3ULL;
  return mix(h, f);
}

// Uniform in (0, 1) from the top 53 bits; never returns 0.
inline double unit(std::mt19937_64& g) { return (static_cast<double>(g() >> 11) + 0.5) * 0x1.0p-53; }

}  // namespace comms_detail

// Per-frame random stream. Seeding from the frame's identity rather than a
// shared generator keeps each draw independent of how many other frames
// were sent, so scaling one latency never reshuffles the others.
class FrameRng {
 public:
  explicit FrameRng(std::uint64_t key) : gen_(key) {}
  double uniform() { return comms_detail::unit(gen_); }
  double normal() {
    // Box-Muller; written out because std::normal_distribution output is
    // not specified across standard libraries.
    const double u1 = uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 gen_;
};

// One-way propagation latency. Lognormal draws use mu = ln(mean) - sigma^2/2
// so the distribution mean equals mean_s.
inline double sample_latency(const LatencyModel& m, FrameRng& rng) {
  if (m.distribution == LatencyDistribution::constant || m.sigma == 0) return m.mean_s;
  const double mu = std::log(m.mean_s) - 0.5 * m.sigma * m.sigma;
  return std::exp(mu + m.sigma * rng.normal());
}

inline double transmission_delay(const LatencyModel& m, int wire_bytes) {
  return std::isinf(m.bandwidth_bps) ? 0.0 : wire_bytes * 8.0 / m.bandwidth_bps;
}

struct Frame {
  std::uint64_t id = 0;
  std::string src;
  std::string dst;
  PayloadKind kind = PayloadKind::op_request;
  int payload_bytes = 0;
  int wire_bytes = 0;
  LinkPath path = LinkPath::ems_to_dms;
  int interval = 0;
  int attempt = 0;
  double sent_at = 0;
  double tx_delay = 0;
  std::optional<double> delivered_at;  // empty when lost
  std::string payload;
};

enum class SimEventKind { frame_delivery, timer, solve_complete, loss_timeout };

inline std::string_view to_string(SimEventKind k) {
  switch (k) {
    case SimEventKind::frame_delivery: return "deliver";
    case SimEventKind::timer: return "timer";
    case SimEventKind::solve_complete: return "solve_complete";
    case SimEventKind::loss_timeout: return "loss_timeout";
  }
  return "?";
}

struct SimEvent {
  double at = 0;
  std::uint64_t seq = 0;
  SimEventKind kind = SimEventKind::timer;
  std::string target;
  std::optional<std::uint64_t> frame;  // delivery and loss events
  std::string tag;                     // timers and solve completions
};

struct SendRequest {
  std::string src;
  std::string dst;
  PayloadKind kind = PayloadKind::op_request;
  int interval = 0;
  int attempt = 0;
  std::string payload;
  int payload_bytes = 0;  // 0: configured size for the kind
};

// Discrete-event transport. The event queue is the simulated clock; all
// sends happen at the current time and every link serializes its frames in
// FIFO order before propagation.
class CommsNetwork {
 public:
  explicit CommsNetwork(SimConfig cfg) : cfg_(std::move(cfg)) { validate(cfg_); }

  const SimConfig& config() const { return cfg_; }
  double now() const { return now_; }

  void add_endpoint(const std::string& name) { endpoints_.insert(name); }
  bool has_endpoint(const std::string& name) const { return endpoints_.contains(name); }

  // Routes are directional; a missing route is a configuration error.
  void add_route(const std::string& src, const std::string& dst, LinkPath path) {
    add_endpoint(src);
    add_endpoint(dst);
    routes_[{src, dst}] = path;
  }

  const Frame& send(const SendRequest& r) {
    require(r.src);
    require(r.dst);
    const auto route = routes_.find({r.src, r.dst});
    if (route == routes_.end()) throw UnknownEndpointError("no route from '" + r.src + "' to '" + r.dst + "'");
    const LatencyModel& model = cfg_.link(route->second);

    Frame f;
    f.id = frames_.size();
    f.src = r.src;
    f.dst = r.dst;
    f.kind = r.kind;
    f.payload_bytes = r.payload_bytes > 0 ? r.payload_bytes : cfg_.payload_bytes.of(r.kind);
    f.wire_bytes = cfg_.framing.wire_bytes(f.payload_bytes);
    f.path = route->second;
    f.interval = r.interval;
    f.attempt = r.attempt;
    f.sent_at = now_;
    f.payload = r.payload;
    f.tx_delay = transmission_delay(model, f.wire_bytes);

    auto rng = frame_rng(f);
    const bool lost = rng.uniform() < model.loss_prob;
    const double latency = sample_latency(model, rng) * cfg_.latency_scale;
    double& busy = link_busy_[{r.src, r.dst}];
    const double start = std::max(now_, busy);
    busy = start + f.tx_delay;
    if (lost) {
      push(now_ + cfg_.loss_timeout_s, SimEventKind::loss_timeout, f.src, f.id, {});
    } else {
      f.delivered_at = start + f.tx_delay + latency;
      push(*f.delivered_at, SimEventKind::frame_delivery, f.dst, f.id, {});
    }
    frames_.push_back(std::move(f));
    const Frame& out = frames_.back();
    trace_frame(now_, "send", out);
    return out;
  }

  std::uint64_t schedule(double at, SimEventKind kind, const std::string& target, std::string tag = {}) {
    if (at < now_) throw OutOfRangeError("cannot schedule an event in the past");
    return push(at, kind, target, std::nullopt, std::move(tag));
  }

  // Background poll/reply pairs from `master` to each endpoint at
  // t0 + k*period for k = 1 .. floor(span / period).
  void inject_scada_poll(const std::string& master, const std::vector<std::string>& endpoints, double period_s,
                         double t0, double span_s, int interval) {
    if (endpoints.empty()) return;
    if (period_s < 1 || period_s > 10) throw ValidationError("scada poll period must lie within [1, 10] s");
    const auto n = static_cast<long long>(std::floor(span_s / period_s + 1e-9));
    for (long long k = 1; k <= n; ++k)
      for (const auto& e : endpoints) {
        const auto seq = push(t0 + k * period_s, SimEventKind::timer, master, std::nullopt, "scada:" + e);
        polls_[seq] = {e, interval, static_cast<int>(k)};
      }
  }

  bool empty() const { return queue_.empty(); }
  std::optional<double> next_time() const {
    if (queue_.empty()) return std::nullopt;
    return queue_.top().at;
  }

  // Processes the next event at or before t_end and returns it if it is
  // visible to the caller. Poll ticks and automatic SCADA replies are
  // handled internally (returned as nullopt with progress made).
  std::optional<SimEvent> step(double t_end, bool* progressed = nullptr) {
    if (progressed) *progressed = false;
    if (queue_.empty() || queue_.top().at > t_end) return std::nullopt;
    SimEvent e = queue_.top();
    queue_.pop();
    if (progressed) *progressed = true;
    now_ = std::max(now_, e.at);

    if (const auto p = polls_.find(e.seq); p != polls_.end()) {
      const auto [dst, interval, k] = p->second;
      polls_.erase(p);
      send({e.target, dst, PayloadKind::scada_poll, interval, k, {}, 0});
      return std::nullopt;
    }
    trace_event(e);
    if (e.kind == SimEventKind::frame_delivery) {
      const Frame& f = frames_[*e.frame];
      if (f.kind == PayloadKind::scada_poll) {
        send({f.dst, f.src, PayloadKind::scada_reply, f.interval, f.attempt, {}, 0});
        return std::nullopt;
      }
      if (f.kind == PayloadKind::scada_reply) return std::nullopt;
    }
    if (e.kind == SimEventKind::loss_timeout) {
      const auto k = frames_[*e.frame].kind;
      if (k == PayloadKind::scada_poll || k == PayloadKind::scada_reply) return std::nullopt;
    }
    return e;
  }

  std::vector<SimEvent> run_until(double t_end) {
    if (t_end < now_) throw OutOfRangeError("run_until target lies before the current time");
    std::vector<SimEvent> out;
    bool progressed = true;
    while (progressed) {
      if (auto e = step(t_end, &progressed)) out.push_back(std::move(*e));
    }
    now_ = t_end;
    return out;
  }

  // Advances the clock without processing anything.
  void advance_to(double t) { now_ = std::max(now_, t); }

  // Drops every pending event, including background polls.
  void cancel_pending() {
    while (!queue_.empty()) queue_.pop();
    polls_.clear();
  }

  // Extra trace line for coordinator milestones.
  void note(const std::string& kind, const std::string& target) {
    nlohmann::ordered_json j;
    j["at"] = now_;
    j["kind"] = kind;
    j["src"] = target;
    j["dst"] = target;
    j["payload_kind"] = nullptr;
    j["bytes"] = 0;
    trace_.push_back(j.dump());
  }

  const std::vector<Frame>& frames() const { return frames_; }
  const Frame& frame(std::uint64_t id) const { return frames_.at(id); }
  const std::vector<std::string>& trace() const { return trace_; }

  void write_trace(std::ostream& os) const {
    for (const auto& line : trace_) os << line << '\n';
  }

 private:
  struct Later {
    bool operator()(const SimEvent& a, const SimEvent& b) const {
      return a.at != b.at ? a.at > b.at : a.seq > b.seq;
    }
  };
  struct Poll {
    std::string dst;
    int interval;
    int k;
  };

  void require(const std::string& name) const {
    if (!endpoints_.contains(name)) throw UnknownEndpointError("unknown endpoint '" + name + "'");
  }

  std::uint64_t push(double at, SimEventKind kind, const std::string& target, std::optional<std::uint64_t> frame,
                     std::string tag) {
    SimEvent e{at, next_seq_++, kind, target, frame, std::move(tag)};
    queue_.push(e);
    return e.seq;
  }

  FrameRng frame_rng(const Frame& f) const {
    using comms_detail::mix;
    std::uint64_t h = mix(cfg_.seed, static_cast<std::uint64_t>(f.interval));
    h = mix(h, f.src);
    h = mix(h, f.dst);
    h = mix(h, static_cast<std::uint64_t>(f.kind));
    h = mix(h, static_cast<std::uint64_t>(f.attempt));
    return FrameRng(h);
  }

  void trace_frame(double at, std::string_view kind, const Frame& f) {
    nlohmann::ordered_json j;
    j["at"] = at;
    j["kind"] = kind;
    j["src"] = f.src;
    j["dst"] = f.dst;
    j["payload_kind"] = to_string(f.kind);
    j["bytes"] = f.wire_bytes;
    j["frame"] = f.id;
    trace_.push_back(j.dump());
  }

  void trace_event(const SimEvent& e) {
    if (e.frame) {
      trace_frame(e.at, to_string(e.kind), frames_[*e.frame]);
      return;
    }
    nlohmann::ordered_json j;
    j["at"] = e.at;
    j["kind"] = to_string(e.kind);
    j["src"] = e.target;
    j["dst"] = e.target;
    j["payload_kind"] = nullptr;
    j["bytes"] = 0;
    if (!e.tag.empty()) j["tag"] = e.tag;
    trace_.push_back(j.dump());
  }

  SimConfig cfg_;
  double now_ = 0;
  std::uint64_t next_seq_ = 0;
  std::priority_queue<SimEvent, std::vector<SimEvent>, Later> queue_;
  std::set<std::string> endpoints_;
  std::map<std::pair<std::string, std::string>, LinkPath> routes_;
  std::map<std::pair<std::string, std::string>, double> link_busy_;
  std::map<std::uint64_t, Poll> polls_;
  std::vector<Frame> frames_;
  std::vector<std::string> trace_;
};

}  // namespace crest
