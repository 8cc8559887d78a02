#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crest/comms.hpp"
#include "crest/config.hpp"
#include "crest/dms.hpp"
#include "crest/ems.hpp"
#include "crest/model.hpp"
#include "crest/powerflow.hpp"
#include "crest/vlsm.hpp"

namespace crest {

struct IntervalRecord {
  int interval = 0;
  double start = 0;
  std::optional<double> ems_done, requests_delivered, dms_done, ders_acked, reports_delivered;
  bool deadline_met = false;
  double x_elapsed_s = 0;
  double slack_s = 0;
  double losses = 0;
  int violations = 0;  // buses outside limits after the interval's controls
  double worst_deviation = 0;
  bool carried_over = false;
  std::string missed_phase;  // first phase not finished by the deadline
  int retransmits = 0;
  int lost_frames = 0;
  int failed_devices = 0;  // dispatches abandoned after the retransmit
  int stale_reports = 0;
  int infeasible_plans = 0;
  bool ems_feasible = true;
  std::string error;

  bool operator==(const IntervalRecord&) const = default;
};

struct MetricsSummary {
  int intervals = 0;
  double total_losses = 0;
  int violation_intervals = 0;
  long total_violations = 0;
  int deadline_misses = 0;
  double deadline_miss_rate = 0;
  double mean_x = 0;
  double max_x = 0;
  int carried_over = 0;
  int retransmits = 0;
  int lost_frames = 0;

  bool operator==(const MetricsSummary&) const = default;
};

struct RunResult {
  std::vector<IntervalRecord> records;
  MetricsSummary summary;
  std::vector<std::string> trace;
  ControlVector final_controls;
};

inline MetricsSummary summarize(const std::vector<IntervalRecord>& recs) {
  MetricsSummary s;
  s.intervals = static_cast<int>(recs.size());
  for (const auto& r : recs) {
    s.total_losses += r.losses;
    s.violation_intervals += r.violations > 0;
    s.total_violations += r.violations;
    s.deadline_misses += !r.deadline_met;
    s.carried_over += r.carried_over;
    s.mean_x += r.x_elapsed_s;
    s.max_x = std::max(s.max_x, r.x_elapsed_s);
    s.retransmits += r.retransmits;
    s.lost_frames += r.lost_frames;
  }
  if (s.intervals > 0) {
    s.mean_x /= s.intervals;
    s.deadline_miss_rate = static_cast<double>(s.deadline_misses) / s.intervals;
  }
  return s;
}

inline nlohmann::ordered_json to_json(const IntervalRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  nlohmann::ordered_json j;
  j["interval"] = r.interval;
  j["start"] = r.start;
  j["ems_done"] = opt(r.ems_done);
  j["requests_delivered"] = opt(r.requests_delivered);
  j["dms_done"] = opt(r.dms_done);
  j["ders_acked"] = opt(r.ders_acked);
  j["reports_delivered"] = opt(r.reports_delivered);
  j["deadline_met"] = r.deadline_met;
  j["x_elapsed_s"] = r.x_elapsed_s;
  j["slack_s"] = r.slack_s;
  j["losses"] = r.losses;
  j["violations"] = r.violations;
  j["worst_deviation"] = r.worst_deviation;
  j["carried_over"] = r.carried_over;
  j["missed_phase"] = r.missed_phase;
  j["retransmits"] = r.retransmits;
  j["lost_frames"] = r.lost_frames;
  j["failed_devices"] = r.failed_devices;
  j["stale_reports"] = r.stale_reports;
  j["infeasible_plans"] = r.infeasible_plans;
  j["ems_feasible"] = r.ems_feasible;
  j["error"] = r.error;
  return j;
}

inline IntervalRecord record_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j[k].is_null()) return std::nullopt;
    return j[k].get<double>();
  };
  IntervalRecord r;
  try {
    r.interval = j.at("interval").get<int>();
    r.start = j.at("start").get<double>();
    r.ems_done = opt("ems_done");
    r.requests_delivered = opt("requests_delivered");
    r.dms_done = opt("dms_done");
    r.ders_acked = opt("ders_acked");
    r.reports_delivered = opt("reports_delivered");
    r.deadline_met = j.at("deadline_met").get<bool>();
    r.x_elapsed_s = j.at("x_elapsed_s").get<double>();
    r.slack_s = j.at("slack_s").get<double>();
    r.losses = j.at("losses").get<double>();
    r.violations = j.at("violations").get<int>();
    r.worst_deviation = j.value("worst_deviation", 0.0);
    r.carried_over = j.at("carried_over").get<bool>();
    r.missed_phase = j.value("missed_phase", "");
    r.retransmits = j.value("retransmits", 0);
    r.lost_frames = j.value("lost_frames", 0);
    r.failed_devices = j.value("failed_devices", 0);
    r.stale_reports = j.value("stale_reports", 0);
    r.infeasible_plans = j.value("infeasible_plans", 0);
    r.ems_feasible = j.value("ems_feasible", true);
    r.error = j.value("error", "");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("interval record: ") + e.what());
  }
  return r;
}

inline nlohmann::ordered_json to_json(const MetricsSummary& s) {
  nlohmann::ordered_json j;
  j["intervals"] = s.intervals;
  j["total_losses"] = s.total_losses;
  j["violation_intervals"] = s.violation_intervals;
  j["total_violations"] = s.total_violations;
  j["deadline_misses"] = s.deadline_misses;
  j["deadline_miss_rate"] = s.deadline_miss_rate;
  j["mean_x"] = s.mean_x;
  j["max_x"] = s.max_x;
  j["carried_over"] = s.carried_over;
  j["retransmits"] = s.retransmits;
  j["lost_frames"] = s.lost_frames;
  return j;
}

namespace coord_detail {

inline std::string dms_name(const FeederModel& f) { return "dms:" + f.id; }
inline std::string der_name(const Der& d) { return "der:" + d.id; }
inline std::string cap_name(const ShuntCapacitor& c) { return "cap:" + c.id; }

struct Group {
  std::string id;
  EmsScope scope;
};

// Resolves group specs into EMS scopes. Empty specs mean one scope over the
// whole system.
inline std::vector<Group> resolve_groups(const GridModel& m, const std::vector<GroupSpec>& specs) {
  if (specs.empty()) return {{"system", whole_system(m)}};
  std::vector<int> feeder_owner(m.feeders.size(), -1);
  std::vector<int> bus_owner(m.buses.size(), -1);
  std::vector<Group> out;
  for (std::size_t g = 0; g < specs.size(); ++g) {
    const auto& spec = specs[g];
    Group grp{spec.id, {}};
    for (const auto& fid : spec.feeders) {
      std::size_t f = 0;
      try {
        f = m.feeder_index(fid);
      } catch (const ValidationError&) {
        throw PartitionError("group '" + spec.id + "' names unknown feeder '" + fid + "'");
      }
      if (feeder_owner[f] >= 0)
        throw PartitionError("feeder '" + fid + "' belongs to groups '" + specs[feeder_owner[f]].id + "' and '" +
                             spec.id + "'");
      feeder_owner[f] = static_cast<int>(g);
      grp.scope.feeders.push_back(f);
    }
    std::vector<std::string> bus_ids = spec.buses;
    if (bus_ids.empty())
      for (auto f : grp.scope.feeders) bus_ids.push_back(m.buses[m.feeders[f].head_bus].id);
    for (const auto& bid : bus_ids) {
      const auto b = m.find_bus(bid);
      if (!b || m.is_feeder_bus(*b))
        throw PartitionError("group '" + spec.id + "' names '" + bid + "', which is not a sub-transmission bus");
      if (bus_owner[*b] >= 0 && bus_owner[*b] != static_cast<int>(g))
        throw PartitionError("bus '" + bid + "' belongs to groups '" + specs[bus_owner[*b]].id + "' and '" + spec.id +
                             "'");
      if (bus_owner[*b] < 0) grp.scope.buses.push_back(*b);
      bus_owner[*b] = static_cast<int>(g);
    }
    std::sort(grp.scope.buses.begin(), grp.scope.buses.end());
    std::sort(grp.scope.feeders.begin(), grp.scope.feeders.end());
    for (auto f : grp.scope.feeders)
      if (bus_owner[m.feeders[f].head_bus] != static_cast<int>(g))
        throw PartitionError("head bus of feeder '" + m.feeders[f].id + "' lies outside group '" + spec.id + "'");
    out.push_back(std::move(grp));
  }
  for (std::size_t f = 0; f < m.feeders.size(); ++f)
    if (feeder_owner[f] < 0) throw PartitionError("feeder '" + m.feeders[f].id + "' is not in any group");
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace coord_detail

// Runs the EMS/DMS exchange interval by interval on the comms clock.
// Setpoints are staged while an interval runs and only become the applied
// controls once its reports are all back before the deadline.
class Coordinator {
 public:
  Coordinator(const GridModel& model, SimConfig cfg, std::vector<GroupSpec> groups)
      : m_(model),
        cfg_(std::move(cfg)),
        groups_(coord_detail::resolve_groups(model, groups)),
        net_(cfg_),
        controls_(initial_controls(model)),
        reports_(model.feeders.size()) {
    validate(cfg_);
    dms_opt_.margin = cfg_.dms_voltage_margin;
    ems_opt_.margin = cfg_.ems_voltage_margin;
    for (const auto& f : m_.feeders) {
      const auto dms = coord_detail::dms_name(f);
      net_.add_route("ems", dms, LinkPath::ems_to_dms);
      net_.add_route(dms, "ems", LinkPath::dms_to_ems);
      for (auto d : f.ders) {
        const auto path = path_for(m_.ders[d].network_tier);
        net_.add_route(dms, coord_detail::der_name(m_.ders[d]), path);
        net_.add_route(coord_detail::der_name(m_.ders[d]), dms, path);
      }
      for (auto c : f.capacitors) {
        net_.add_route(dms, coord_detail::cap_name(m_.capacitors[c]), LinkPath::fan);
        net_.add_route(coord_detail::cap_name(m_.capacitors[c]), dms, LinkPath::fan);
      }
    }
  }
  Coordinator(const GridModel& model, SimConfig cfg) : Coordinator(model, cfg, cfg.groups) {}

  const ControlVector& controls() const { return controls_; }
  const CommsNetwork& network() const { return net_; }
  const std::vector<std::optional<FlexibilityReport>>& reports() const { return reports_; }

  // Processes background traffic left over once the last interval is done.
  void drain_to(double t) { net_.run_until(std::max(t, net_.now())); }

  IntervalRecord run_interval(int t) {
    IntervalRecord rec;
    rec.interval = t;
    rec.start = interval_start_seconds(t, cfg_.budget.interval_s);
    net_.run_until(rec.start);
    const auto state = snapshot_at(m_, t);
    if (!cfg_.control_enabled) {
      rec.deadline_met = true;
      rec.slack_s = cfg_.budget.interval_s;
      evaluate(state, rec);
      return rec;
    }

    Run run(*this, t, state, rec);
    run.execute();
    evaluate(state, rec);
    return rec;
  }

 private:
  // One interval's protocol state.
  struct Run {
    Coordinator& c;
    int t;
    const NetworkState& state;
    IntervalRecord& rec;
    double deadline;
    ControlVector prev;
    PowerFlowSolution base_sol;

    EmsDecision decision;  // merged across groups
    std::vector<OperatingPointRequest> requests;
    std::vector<std::size_t> request_feeder;

    struct FeederRun {
      bool requested = false;
      std::optional<OperatingPointRequest> req;
      std::optional<DispatchPlan> plan;
      std::map<std::string, std::size_t> outstanding;  // endpoint -> plan slot (ders first, then caps)
      std::set<std::string> acked;
      std::set<std::string> failed;
      bool solved = false;
      bool finished = false;
      bool reported = false;
      double v_set = 1.0;
    };
    std::vector<FeederRun> feeders;
    // Setpoints that reached their device this interval.
    std::map<std::size_t, DerSetpoint> staged_der;
    std::map<std::size_t, int> staged_cap;
    std::vector<std::optional<FlexibilityReport>> new_reports;
    std::size_t requests_seen = 0, solved = 0, finished = 0, reported = 0;
    double t_requests = 0, t_solved = 0, t_finished = 0, t_reported = 0;

    Run(Coordinator& co, int t_, const NetworkState& s, IntervalRecord& r)
        : c(co), t(t_), state(s), rec(r), prev(co.controls_) {
      deadline = rec.start + c.cfg_.budget.interval_s;
      feeders.resize(c.m_.feeders.size());
      new_reports.resize(c.m_.feeders.size());
    }

    const GridModel& m() const { return c.m_; }
    CommsNetwork& net() { return c.net_; }
    bool wall() const { return c.cfg_.timing_mode == TimingMode::wall_clock; }

    void execute() {
      if (c.cfg_.scada_poll_period_s > 0) {
        std::vector<std::string> eps;
        for (const auto& f : m().feeders) eps.push_back(coord_detail::dms_name(f));
        net().inject_scada_poll("ems", eps, c.cfg_.scada_poll_period_s, rec.start, c.cfg_.budget.interval_s, t);
      }
      double ems_s = c.cfg_.budget.ems_solve_s;
      try {
        ems_s = solve_ems();
      } catch (const Error& e) {
        rec.error = std::string("ems: ") + e.what();
        rec.ems_feasible = false;
      }
      if (rec.error.empty()) net().schedule(rec.start + ems_s, SimEventKind::solve_complete, "ems", "ems");

      bool progressed = true;
      while (!complete() && progressed) {
        if (auto e = net().step(deadline, &progressed)) handle(*e);
      }
      if (complete()) {
        finish_ok();
      } else {
        net().advance_to(deadline);
        net().note("deadline_miss", "ems");
        net().cancel_pending();
        rec.deadline_met = false;
        rec.carried_over = true;
        rec.x_elapsed_s = c.cfg_.budget.interval_s;
        rec.slack_s = 0;
        rec.missed_phase = !rec.ems_done             ? "ems_solve"
                           : !rec.requests_delivered ? "ems_to_dms"
                           : !rec.dms_done           ? "dms_solve"
                           : !rec.ders_acked         ? "dms_der_roundtrip"
                                                     : "dms_to_ems";
      }
      for (std::size_t f = 0; f < new_reports.size(); ++f)
        if (new_reports[f]) c.reports_[f] = new_reports[f];
    }

    bool complete() const { return !requests.empty() && reported == requests.size(); }

    double solve_ems() {
      base_sol = solve_meshed(m(), state, prev);
      if (!base_sol.converged) throw ConvergenceError("system power flow at interval start: " + base_sol.diagnostic);
      std::vector<FlexibilityReport> reps(m().feeders.size());
      for (std::size_t f = 0; f < m().feeders.size(); ++f) {
        if (c.reports_[f]) {
          reps[f] = *c.reports_[f];
          reps[f].stale = reps[f].interval != t;
          rec.stale_reports += reps[f].stale;
        } else {
          reps[f] = cold_start_report(m(), f, state, prev, base_sol.v_mag[m().feeders[f].head_bus]);
        }
      }
      std::vector<std::complex<double>> boundary(m().buses.size());
      for (std::size_t b = 0; b < m().buses.size(); ++b) boundary[b] = std::polar(base_sol.v_mag[b], base_sol.v_ang[b]);

      const auto t0 = std::chrono::steady_clock::now();
      std::vector<EmsDecision> parts(c.groups_.size());
      std::vector<double> secs(c.groups_.size(), 0.0);
      auto solve = [&](std::size_t g) {
        const auto g0 = std::chrono::steady_clock::now();
        auto scope = c.groups_[g].scope;
        if (c.groups_.size() > 1) scope.boundary = boundary;
        parts[g] = ems_optimize(m(), state, prev, reps, scope, c.ems_opt_);
        secs[g] = coord_detail::seconds_since(g0);
      };
      if (c.groups_.size() == 1) {
        solve(0);
      } else {
        std::vector<std::future<void>> jobs;
        for (std::size_t g = 0; g < c.groups_.size(); ++g) jobs.push_back(std::async(std::launch::async, solve, g));
        for (auto& j : jobs) j.get();
      }
      const double measured = coord_detail::seconds_since(t0);

      // Merge in group order; a tie-branch tap optimized by two groups keeps
      // the first group's change.
      decision.cap_state = prev.cap_state;
      decision.tap_position = prev.tap_position;
      for (const auto& d : parts) {
        for (std::size_t k = 0; k < d.cap_state.size(); ++k)
          if (d.cap_state[k] != prev.cap_state[k] && decision.cap_state[k] == prev.cap_state[k])
            decision.cap_state[k] = d.cap_state[k];
        for (std::size_t k = 0; k < d.tap_position.size(); ++k)
          if (d.tap_position[k] != prev.tap_position[k] && decision.tap_position[k] == prev.tap_position[k])
            decision.tap_position[k] = d.tap_position[k];
        rec.ems_feasible = rec.ems_feasible && d.feasible;
        for (const auto& r : d.requests) {
          requests.push_back(r);
          request_feeder.push_back(m().feeder_index(r.feeder_id));
        }
      }
      std::vector<std::size_t> order(requests.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](auto a, auto b) { return request_feeder[a] < request_feeder[b]; });
      std::vector<OperatingPointRequest> sorted;
      std::vector<std::size_t> sorted_f;
      for (auto i : order) {
        sorted.push_back(requests[i]);
        sorted_f.push_back(request_feeder[i]);
      }
      requests = std::move(sorted);
      request_feeder = std::move(sorted_f);
      if (requests.size() != m().feeders.size())
        throw ConvergenceError("no operating point found for " + std::to_string(m().feeders.size() - requests.size()) +
                               " feeder(s)");
      if (wall()) {
        double longest = 0;
        for (double s : secs) longest = std::max(longest, s);
        return std::max(c.groups_.size() > 1 ? longest : measured, 1e-9);
      }
      return c.cfg_.budget.ems_solve_s;
    }

    void handle(const SimEvent& e) {
      switch (e.kind) {
        case SimEventKind::solve_complete:
          if (e.target == "ems") on_ems_done(e.at);
          else on_dms_done(feeder_of(e.target), e.at);
          break;
        case SimEventKind::timer:
          if (e.tag.starts_with("req:")) send_request(std::stoul(e.tag.substr(4)), 0);
          break;
        case SimEventKind::frame_delivery: on_delivery(net().frame(*e.frame), e.at); break;
        case SimEventKind::loss_timeout: on_loss(net().frame(*e.frame)); break;
      }
    }

    std::size_t feeder_of(const std::string& dms) const { return m().feeder_index(dms.substr(4)); }

    void on_ems_done(double at) {
      rec.ems_done = at;
      const double spacing = c.cfg_.budget.ems_to_dms_s / static_cast<double>(requests.size());
      for (std::size_t i = 0; i < requests.size(); ++i)
        net().schedule(at + static_cast<double>(i) * spacing, SimEventKind::timer, "ems", "req:" + std::to_string(i));
    }

    void send_request(std::size_t i, int attempt) {
      const auto f = request_feeder[i];
      net().send({"ems", coord_detail::dms_name(m().feeders[f]), PayloadKind::op_request, t, attempt,
                  to_json(requests[i]).dump()});
    }

    void on_delivery(const Frame& fr, double at) {
      if (fr.interval != t) return;  // late frame from an earlier interval
      switch (fr.kind) {
        case PayloadKind::op_request: on_request(feeder_of(fr.dst), fr, at); break;
        case PayloadKind::der_dispatch: on_dispatch(fr); break;
        case PayloadKind::der_ack: on_ack(feeder_of(fr.dst), fr.src, at); break;
        case PayloadKind::flexibility_report: on_report(feeder_of(fr.src), fr, at); break;
        default: break;
      }
    }

    void on_request(std::size_t f, const Frame& fr, double at) {
      auto& fs = feeders[f];
      if (fs.requested) return;
      fs.requested = true;
      if (++requests_seen == requests.size()) {
        t_requests = at;
        rec.requests_delivered = at;
      }
      fs.req = request_from_json(nlohmann::json::parse(fr.payload));
      fs.v_set = fs.req->substation_voltage_setpoint;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto vl = compute_vlsm(m(), f, state, prev, fs.v_set);
        fs.plan = disaggregate(m(), f, state, prev, vl, *fs.req, c.dms_opt_);
        apply_plan(m(), prev, *fs.plan);  // capability guard
        if (!fs.plan->feasible) ++rec.infeasible_plans;
      } catch (const Error& e) {
        fs.plan = null_plan(m(), f, prev);
        ++rec.infeasible_plans;
        if (rec.error.empty()) rec.error = "dms " + m().feeders[f].id + ": " + e.what();
      }
      const double dur = wall() ? std::max(coord_detail::seconds_since(t0), 1e-9) : c.cfg_.budget.dms_solve_s;
      net().schedule(at + dur, SimEventKind::solve_complete, coord_detail::dms_name(m().feeders[f]), "dms");
    }

    void on_dms_done(std::size_t f, double at) {
      auto& fs = feeders[f];
      fs.solved = true;
      if (++solved == requests.size()) {
        t_solved = at;
        rec.dms_done = at;
      }
      const auto& plan = *fs.plan;
      for (std::size_t k = 0; k < plan.ders.size(); ++k) fs.outstanding[coord_detail::der_name(m().ders[plan.ders[k]])] = k;
      for (std::size_t k = 0; k < plan.capacitors.size(); ++k)
        fs.outstanding[coord_detail::cap_name(m().capacitors[plan.capacitors[k]])] = plan.ders.size() + k;
      if (fs.outstanding.empty()) {
        finish_feeder(f, at);
        return;
      }
      for (const auto& [ep, slot] : fs.outstanding) send_dispatch(f, ep, slot, 0);
    }

    void send_dispatch(std::size_t f, const std::string& ep, std::size_t slot, int attempt) {
      const auto& plan = *feeders[f].plan;
      nlohmann::ordered_json j;
      if (slot < plan.ders.size()) {
        j["der"] = m().ders[plan.ders[slot]].id;
        j["p"] = plan.setpoints[slot].p;
        j["q"] = plan.setpoints[slot].q;
      } else {
        const auto k = slot - plan.ders.size();
        j["capacitor"] = m().capacitors[plan.capacitors[k]].id;
        j["state"] = plan.cap_state[k];
      }
      net().send({coord_detail::dms_name(m().feeders[f]), ep, PayloadKind::der_dispatch, t, attempt, j.dump()});
    }

    void on_dispatch(const Frame& fr) {
      // The device takes the setpoint on receipt and acknowledges.
      const auto j = nlohmann::json::parse(fr.payload);
      if (j.contains("der"))
        staged_der[m().der_index(j["der"].get<std::string>())] = {j["p"].get<double>(), j["q"].get<double>()};
      else
        for (std::size_t k = 0; k < m().capacitors.size(); ++k)
          if (m().capacitors[k].id == j["capacitor"].get<std::string>()) staged_cap[k] = j["state"].get<int>();
      net().send({fr.dst, fr.src, PayloadKind::der_ack, t, fr.attempt});
    }

    void on_ack(std::size_t f, const std::string& ep, double at) {
      auto& fs = feeders[f];
      if (fs.finished || fs.acked.contains(ep) || fs.failed.contains(ep)) return;
      fs.acked.insert(ep);
      maybe_finish(f, at);
    }

    void maybe_finish(std::size_t f, double at) {
      auto& fs = feeders[f];
      if (!fs.finished && fs.acked.size() + fs.failed.size() == fs.outstanding.size()) finish_feeder(f, at);
    }

    void finish_feeder(std::size_t f, double at) {
      auto& fs = feeders[f];
      fs.finished = true;
      if (++finished == requests.size()) {
        t_finished = at;
        rec.ders_acked = at;
      }
      // Limits for the next interval from what the DMS knows was applied.
      ControlVector believed = prev;
      const auto& plan = *fs.plan;
      for (std::size_t k = 0; k < plan.ders.size(); ++k)
        if (fs.acked.contains(coord_detail::der_name(m().ders[plan.ders[k]])))
          believed.der[plan.ders[k]] = plan.setpoints[k];
      for (std::size_t k = 0; k < plan.capacitors.size(); ++k)
        if (fs.acked.contains(coord_detail::cap_name(m().capacitors[plan.capacitors[k]])))
          believed.cap_state[plan.capacitors[k]] = plan.cap_state[k];
      FlexibilityReport rep;
      try {
        auto forecast = state;
        if (t + 1 < m().horizon) {
          const auto next = snapshot_at(m(), t + 1);
          forecast.load_p = next.load_p;
          forecast.load_q = next.load_q;
        }
        forecast.interval = t + 1;
        const auto vl = compute_vlsm(m(), f, forecast, believed, fs.v_set);
        rep = compute_flexibility(m(), f, forecast, believed, vl, c.dms_opt_);
      } catch (const Error& e) {
        rep = cold_start_report(m(), f, state, believed, fs.v_set);
        rep.interval = t + 1;
        if (rec.error.empty()) rec.error = "flexibility " + m().feeders[f].id + ": " + e.what();
      }
      new_reports_pending[f] = rep;
      send_report(f, 0);
    }

    std::map<std::size_t, FlexibilityReport> new_reports_pending;

    void send_report(std::size_t f, int attempt) {
      net().send({coord_detail::dms_name(m().feeders[f]), "ems", PayloadKind::flexibility_report, t, attempt,
                  to_json(new_reports_pending.at(f)).dump()});
    }

    void on_report(std::size_t f, const Frame& fr, double at) {
      auto& fs = feeders[f];
      if (fs.reported) return;
      fs.reported = true;
      new_reports[f] = report_from_json(nlohmann::json::parse(fr.payload));
      if (++reported == requests.size()) {
        t_reported = at;
        rec.reports_delivered = at;
      }
    }

    void on_loss(const Frame& fr) {
      if (fr.interval != t) return;
      ++rec.lost_frames;
      const bool retry = fr.attempt == 0;
      switch (fr.kind) {
        case PayloadKind::op_request:
          if (retry) {
            ++rec.retransmits;
            for (std::size_t i = 0; i < requests.size(); ++i)
              if (coord_detail::dms_name(m().feeders[request_feeder[i]]) == fr.dst) send_request(i, 1);
          }
          break;
        case PayloadKind::flexibility_report:
          if (retry) {
            ++rec.retransmits;
            send_report(feeder_of(fr.src), 1);
          }
          break;
        case PayloadKind::der_dispatch:
        case PayloadKind::der_ack: {
          // The DMS repeats the dispatch once; a second loss abandons the device.
          const bool dispatch = fr.kind == PayloadKind::der_dispatch;
          const auto f = feeder_of(dispatch ? fr.src : fr.dst);
          const auto& ep = dispatch ? fr.dst : fr.src;
          auto& fs = feeders[f];
          if (fs.finished || fs.acked.contains(ep) || fs.failed.contains(ep)) break;
          if (retry) {
            ++rec.retransmits;
            send_dispatch(f, ep, fs.outstanding.at(ep), 1);
          } else {
            fs.failed.insert(ep);
            ++rec.failed_devices;
            maybe_finish(f, net().now());
          }
          break;
        }
        default: break;
      }
    }

    void finish_ok() {
      rec.deadline_met = true;
      // Phase durations summed in order; this is also what a trace reader gets.
      const double d1 = *rec.ems_done - rec.start;
      const double d2 = t_requests - *rec.ems_done;
      const double d3 = t_solved - t_requests;
      const double d4 = t_finished - t_solved;
      const double d5 = t_reported - t_finished;
      rec.x_elapsed_s = d1 + d2 + d3 + d4 + d5;
      rec.slack_s = c.cfg_.budget.interval_s - rec.x_elapsed_s;

      ControlVector next = prev;
      next.cap_state = decision.cap_state;
      next.tap_position = decision.tap_position;
      for (std::size_t k = 0; k < prev.cap_state.size(); ++k)
        if (m().is_feeder_bus(m().bus_index(m().capacitors[k].bus))) next.cap_state[k] = prev.cap_state[k];
      for (const auto& [d, sp] : staged_der) next.der[d] = sp;
      for (const auto& [k, st] : staged_cap) next.cap_state[k] = st;
      c.controls_ = std::move(next);
    }
  };

  void evaluate(const NetworkState& state, IntervalRecord& rec) const {
    const auto sol = solve_meshed(m_, state, controls_);
    if (!sol.converged) {
      rec.losses = std::numeric_limits<double>::quiet_NaN();
      rec.violations = static_cast<int>(m_.buses.size());
      if (rec.error.empty()) rec.error = "system power flow: " + sol.diagnostic;
      return;
    }
    rec.losses = sol.losses_total;
    const auto v = total_violations(sol, m_);
    rec.violations = static_cast<int>(v.count());
    rec.worst_deviation = v.worst_deviation();
  }

  const GridModel& m_;
  SimConfig cfg_;
  std::vector<coord_detail::Group> groups_;
  CommsNetwork net_;
  ControlVector controls_;
  std::vector<std::optional<FlexibilityReport>> reports_;
  DmsOptions dms_opt_;
  EmsOptions ems_opt_;
};

inline RunResult run_grouped(const GridModel& m, const SimConfig& cfg, const std::vector<GroupSpec>& groups) {
  validate(cfg);
  if (cfg.horizon > m.horizon)
    throw ValidationError("horizon of " + std::to_string(cfg.horizon) + " intervals exceeds the " +
                          std::to_string(m.horizon) + " intervals of series data");
  Coordinator co(m, cfg, groups);
  RunResult out;
  for (int t = 0; t < cfg.horizon; ++t) out.records.push_back(co.run_interval(t));
  co.drain_to(interval_start_seconds(cfg.horizon, cfg.budget.interval_s));
  out.summary = summarize(out.records);
  out.trace = co.network().trace();
  out.final_controls = co.controls();
  return out;
}

inline RunResult run_horizon(const GridModel& m, const SimConfig& cfg) { return run_grouped(m, cfg, cfg.groups); }

// Uncontrolled reference: initial setpoints held for the whole horizon.
inline RunResult run_baseline(const GridModel& m, SimConfig cfg) {
  cfg.control_enabled = false;
  return run_horizon(m, cfg);
}

struct DecompositionGap {
  double whole_losses = 0;
  double grouped_losses = 0;
  double gap = 0;  // grouped minus whole
};

inline DecompositionGap decomposition_gap(const RunResult& whole, const RunResult& grouped) {
  return {whole.summary.total_losses, grouped.summary.total_losses,
          grouped.summary.total_losses - whole.summary.total_losses};
}

}  // namespace crest
