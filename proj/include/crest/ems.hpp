#pragma once

// Sub-transmission volt-var optimizer.
//
// Minimizes real-power losses of the sub-transmission network over
//   - transformer tap positions and shunt capacitor states (discrete,
//     coordinate descent over every step, each candidate a full Newton solve)
//   - feeder-head import (p, q) inside each feeder's flexibility box
//     (continuous, projected gradient with central finite differences)
// Feeders appear as constant-power loads at their head buses. Voltage
// bounds (tightened by a small margin) and branch ratings enter as a
// quadratic penalty, so an infeasible start still moves toward the point
// of least aggregate violation.
//
// The problem splits into connected components of the buses being
// optimized; each is solved on its own, so electrically separate parts
// never influence each other's result.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "crest/dms.hpp"
#include "crest/error.hpp"
#include "crest/model.hpp"
#include "crest/powerflow.hpp"

namespace crest {

struct EmsOptions {
  double margin = 0.001;
  double penalty = 1e6;
  double fd_step = 1e-4;
  int max_iterations = 300;
  double tolerance = 1e-7;
  int max_rounds = 20;
};

// Part of the system an EMS instance controls. Buses outside `buses` that
// share a branch with it are held at `boundary` voltages.
struct EmsScope {
  std::vector<std::size_t> buses;    // sub-transmission bus indices
  std::vector<std::size_t> feeders;  // feeder indices
  std::vector<std::complex<double>> boundary;  // per model bus; used for outside neighbours
};

struct EmsDecision {
  std::vector<int> cap_state;     // per model capacitor (feeder entries untouched)
  std::vector<int> tap_position;  // per model branch, -1 without tap
  std::vector<std::size_t> feeders;
  std::vector<double> feeder_p, feeder_q;  // chosen head import
  std::vector<double> head_voltage;        // solved head-bus magnitude
  std::vector<OperatingPointRequest> requests;
  double predicted_losses = 0.0;
  double base_losses = 0.0;
  ViolationReport predicted_violations;
  bool feasible = true;
  bool status_quo = false;
  std::vector<std::string> stale_feeders;
  int power_flows = 0;
  int skipped_candidates = 0;
};

namespace ems_detail {

struct Device {
  enum class Kind { tap, cap } kind;
  std::size_t model = 0;  // branch or capacitor index
  std::size_t slot = 0;   // network branch or bus
  int lo = 0, hi = 0;
  double q_step = 0.0;
  std::string id;
};

struct Component {
  PfNetwork base;  // loads applied; capacitors off; unity taps
  std::vector<std::size_t> model_of;  // network bus -> model bus
  std::vector<bool> interior;         // false for boundary buses
  std::vector<std::size_t> branch_model;  // network branch -> model branch
  std::vector<Device> devices;        // sorted by id
  std::vector<std::size_t> feeders;   // feeder indices with head here
  std::vector<std::size_t> head_slot;
  std::vector<double> p_lo, p_hi, q_lo, q_hi;
};

struct Eval {
  bool converged = false;
  double losses = 0.0;
  double violation = 0.0;  // sum of squared bound / rating excess
  double merit = std::numeric_limits<double>::infinity();
  PowerFlowSolution sol;
};

class Problem {
 public:
  Problem(const GridModel& m, const Component& c, const EmsOptions& o, int& counter)
      : model_(m), comp_(c), opt_(o), counter_(counter) {}

  // z = [p_0..p_{k-1}, q_0..q_{k-1}] head imports; states per device.
  Eval evaluate(const std::vector<double>& z, const std::vector<int>& states, bool keep = false) const {
    PfNetwork net = comp_.base;
    const std::size_t k = comp_.feeders.size();
    for (std::size_t i = 0; i < k; ++i) {
      net.p_inj[comp_.head_slot[i]] -= z[i];
      net.q_inj[comp_.head_slot[i]] -= z[k + i];
    }
    for (std::size_t d = 0; d < comp_.devices.size(); ++d) {
      const auto& dev = comp_.devices[d];
      if (dev.kind == Device::Kind::tap) net.branches[dev.slot].ratio = tap_ratio(states[d]);
      else net.b_shunt[dev.slot] += dev.q_step * states[d];
    }
    ++counter_;
    Eval e;
    e.sol = solve_meshed(net);
    if (!e.sol.converged) return e;
    e.converged = true;
    e.losses = e.sol.losses_total;
    for (std::size_t i = 0; i < net.size(); ++i) {
      if (!comp_.interior[i]) continue;
      const auto& b = model_.buses[comp_.model_of[i]];
      const double v = e.sol.v_mag[i];
      const double over = std::max(v - (b.v_max - opt_.margin), 0.0) + std::max((b.v_min + opt_.margin) - v, 0.0);
      e.violation += over * over;
    }
    for (std::size_t br = 0; br < net.branches.size(); ++br) {
      const auto& f = e.sol.branch_flows[br];
      const double rating = model_.branches[comp_.branch_model[br]].rating;
      const double s = std::max(std::hypot(f.p_from, f.q_from), std::hypot(f.p_to, f.q_to));
      const double over = std::max(s - rating, 0.0);
      e.violation += over * over;
    }
    e.merit = e.losses + opt_.penalty * e.violation;
    if (!keep) e.sol = {};
    return e;
  }

  void project(std::vector<double>& z) const {
    const std::size_t k = comp_.feeders.size();
    for (std::size_t i = 0; i < k; ++i) {
      z[i] = std::clamp(z[i], comp_.p_lo[i], comp_.p_hi[i]);
      z[k + i] = std::clamp(z[k + i], comp_.q_lo[i], comp_.q_hi[i]);
    }
  }

  // Projected gradient over the feeder boxes with Armijo step halving.
  Eval descend(std::vector<double>& z, const std::vector<int>& states) const {
    project(z);
    Eval cur = evaluate(z, states);
    if (!cur.converged || z.empty()) return cur;
    const std::size_t n = z.size();
    std::vector<double> g(n), trial(n);
    double step = 1.0;
    for (int it = 0; it < opt_.max_iterations; ++it) {
      bool ok = true;
      for (std::size_t i = 0; i < n; ++i) {
        const double width = i < n / 2 ? comp_.p_hi[i] - comp_.p_lo[i] : comp_.q_hi[i - n / 2] - comp_.q_lo[i - n / 2];
        if (width <= 0) {
          g[i] = 0.0;
          continue;
        }
        auto zp = z, zm = z;
        zp[i] += opt_.fd_step;
        zm[i] -= opt_.fd_step;
        const auto ep = evaluate(zp, states), em = evaluate(zm, states);
        if (!ep.converged || !em.converged) {
          ok = false;
          break;
        }
        g[i] = (ep.merit - em.merit) / (2 * opt_.fd_step);
      }
      if (!ok) break;
      bool moved = false;
      step = std::min(step * 4, 1e3);
      for (int h = 0; h < 50; ++h, step *= 0.5) {
        for (std::size_t i = 0; i < n; ++i) trial[i] = z[i] - step * g[i];
        project(trial);
        double dist2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) dist2 += (trial[i] - z[i]) * (trial[i] - z[i]);
        if (dist2 == 0.0) break;
        const auto e = evaluate(trial, states);
        if (e.converged && e.merit <= cur.merit - 1e-4 * dist2 / step) {
          const double gain = cur.merit - e.merit;
          z = trial;
          cur = e;
          moved = gain > opt_.tolerance * std::max(1.0, std::abs(cur.merit));
          break;
        }
      }
      if (!moved) break;
    }
    return cur;
  }

 private:
  const GridModel& model_;
  const Component& comp_;
  EmsOptions opt_;
  int& counter_;
};

inline std::vector<Component> build_components(const GridModel& m, const NetworkState& s, const EmsScope& scope,
                                               const std::vector<FlexibilityReport>& reports) {
  const std::size_t nb = m.buses.size();
  std::vector<bool> in_scope(nb, false);
  for (auto b : scope.buses) in_scope[b] = true;
  std::vector<bool> feeder_branch(m.branches.size(), false);
  for (const auto& f : m.feeders)
    for (auto b : f.branches) feeder_branch[b] = true;

  // Components over scope buses via scope-internal branches.
  std::vector<std::size_t> parent(nb);
  for (std::size_t i = 0; i < nb; ++i) parent[i] = i;
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t k = 0; k < m.branches.size(); ++k) {
    if (feeder_branch[k]) continue;
    const auto a = m.from_index(m.branches[k]), b = m.to_index(m.branches[k]);
    if (in_scope[a] && in_scope[b]) {
      const auto ra = find(a), rb = find(b);
      if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
    }
  }
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (auto b : scope.buses) groups[find(b)].push_back(b);

  std::vector<Component> out;
  for (auto& [root, buses] : groups) {
    std::sort(buses.begin(), buses.end());
    Component c;
    std::vector<std::size_t> slot(nb, SIZE_MAX);
    for (auto b : buses) {
      const auto& bus = m.buses[b];
      slot[b] = c.base.add_bus(bus.id, bus.kind, bus.v_set, b);
      c.model_of.push_back(b);
      c.interior.push_back(true);
      c.base.p_inj[slot[b]] -= s.load_p[b];
      c.base.q_inj[slot[b]] -= s.load_q[b];
    }
    std::vector<std::size_t> boundary;
    for (std::size_t k = 0; k < m.branches.size(); ++k) {
      if (feeder_branch[k]) continue;
      const auto a = m.from_index(m.branches[k]), b = m.to_index(m.branches[k]);
      const bool ia = slot[a] != SIZE_MAX && in_scope[a], ib = slot[b] != SIZE_MAX && in_scope[b];
      if (!ia && !ib) continue;
      for (auto x : {a, b})
        if (!in_scope[x] && std::find(boundary.begin(), boundary.end(), x) == boundary.end()) boundary.push_back(x);
    }
    std::sort(boundary.begin(), boundary.end());
    for (auto b : boundary) {
      if (scope.boundary.size() != nb)
        throw PartitionError("bus '" + m.buses[b].id + "' borders the group but no boundary voltage is known");
      const auto v = scope.boundary[b];
      slot[b] = c.base.add_bus(m.buses[b].id, BusKind::slack, std::abs(v), b);
      c.base.ang_set[slot[b]] = std::arg(v);
      c.model_of.push_back(b);
      c.interior.push_back(false);
    }
    for (std::size_t k = 0; k < m.branches.size(); ++k) {
      if (feeder_branch[k]) continue;
      const auto& br = m.branches[k];
      const auto a = m.from_index(br), b = m.to_index(br);
      if (slot[a] == SIZE_MAX || slot[b] == SIZE_MAX || (!in_scope[a] && !in_scope[b])) continue;
      if (find(in_scope[a] ? a : b) != root) continue;
      const std::size_t net_branch = c.base.branches.size();
      c.base.add_branch(slot[a], slot[b], br.r, br.x, br.b_shunt, 1.0);
      c.branch_model.push_back(k);
      if (br.tap)
        c.devices.push_back({Device::Kind::tap, k, net_branch, br.tap->min_position, br.tap->max_position, 0.0, br.id});
    }
    for (std::size_t k = 0; k < m.capacitors.size(); ++k) {
      const auto b = m.bus_index(m.capacitors[k].bus);
      if (slot[b] == SIZE_MAX || !in_scope[b] || m.is_feeder_bus(b)) continue;
      c.devices.push_back({Device::Kind::cap, k, slot[b], 0, m.capacitors[k].n_steps, m.capacitors[k].q_step,
                           m.capacitors[k].id});
    }
    std::sort(c.devices.begin(), c.devices.end(), [](const Device& x, const Device& y) { return x.id < y.id; });
    for (auto f : scope.feeders) {
      const auto head = m.feeders[f].head_bus;
      if (slot[head] == SIZE_MAX || !in_scope[head]) continue;
      const auto& r = reports.at(f);
      c.feeders.push_back(f);
      c.head_slot.push_back(slot[head]);
      c.p_lo.push_back(r.p_min);
      c.p_hi.push_back(r.p_max);
      c.q_lo.push_back(r.q_min);
      c.q_hi.push_back(r.q_max);
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace ems_detail

// Whole system as one scope.
inline EmsScope whole_system(const GridModel& m) {
  EmsScope s;
  for (std::size_t b = 0; b < m.buses.size(); ++b)
    if (!m.is_feeder_bus(b)) s.buses.push_back(b);
  for (std::size_t f = 0; f < m.feeders.size(); ++f) s.feeders.push_back(f);
  return s;
}

// Zero-width report at a feeder's current head import; used before any
// DMS has reported.
inline FlexibilityReport cold_start_report(const GridModel& m, std::size_t feeder, const NetworkState& s,
                                           const ControlVector& c, double head_voltage) {
  FlexibilityReport r;
  r.feeder_id = m.feeders[feeder].id;
  r.interval = s.interval;
  const auto sol = solve_radial(m, feeder, s, c, head_voltage);
  if (!sol.converged) throw ConvergenceError("cold start of feeder '" + r.feeder_id + "': " + sol.diagnostic);
  const auto h = feeder_head_import(sol);
  r.p_min = r.p_max = r.p_forecast = h.p;
  r.q_min = r.q_max = r.q_forecast = h.q;
  return r;
}

// Splits |dp| between curtailment and DR in proportion to the headroom
// the feeder reported in each category.
inline std::pair<double, double> split_delta_p(double dp, double curtail_room, double dr_room) {
  const double mag = std::abs(dp);
  const double total = curtail_room + dr_room;
  if (mag == 0.0 || total <= 0.0) return {0.0, 0.0};
  return {mag * curtail_room / total, mag * dr_room / total};
}

// One request per feeder in the decision, clipped into its report box.
inline std::vector<OperatingPointRequest> decision_to_requests(const GridModel& m, const EmsDecision& d,
                                                               const std::vector<FlexibilityReport>& reports,
                                                               int interval) {
  std::vector<OperatingPointRequest> out;
  for (std::size_t i = 0; i < d.feeders.size(); ++i) {
    const auto f = d.feeders[i];
    const auto& r = reports.at(f);
    OperatingPointRequest req;
    req.feeder_id = m.feeders[f].id;
    req.interval = interval;
    req.substation_voltage_setpoint = d.head_voltage[i];
    req.p_request = std::clamp(d.feeder_p[i], r.p_min, r.p_max);
    req.q_request = std::clamp(d.feeder_q[i], r.q_min, r.q_max);
    std::tie(req.pv_curtailment_request, req.dr_request) =
        split_delta_p(req.p_request - r.p_forecast, r.curtailment_headroom, r.dr_headroom);
    out.push_back(req);
  }
  return out;
}

// `reports` is indexed by feeder; entries outside scope.feeders are ignored.
inline EmsDecision ems_optimize(const GridModel& m, const NetworkState& s, const ControlVector& controls,
                                const std::vector<FlexibilityReport>& reports, const EmsScope& scope,
                                const EmsOptions& opt = {}) {
  using namespace ems_detail;
  if (reports.size() != m.feeders.size())
    throw DimensionError("ems_optimize: expected one flexibility report per feeder");
  EmsDecision d;
  d.cap_state = controls.cap_state;
  d.tap_position = controls.tap_position;
  for (auto f : scope.feeders)
    if (reports[f].stale) d.stale_feeders.push_back(m.feeders[f].id);

  const auto comps = build_components(m, s, scope, reports);
  for (const auto& comp : comps) {
    Problem prob(m, comp, opt, d.power_flows);
    const std::size_t k = comp.feeders.size();
    std::vector<double> z(2 * k);
    for (std::size_t i = 0; i < k; ++i) {
      z[i] = reports[comp.feeders[i]].p_forecast;
      z[k + i] = reports[comp.feeders[i]].q_forecast;
    }
    prob.project(z);
    std::vector<int> states;
    for (const auto& dev : comp.devices)
      states.push_back(dev.kind == Device::Kind::tap ? controls.tap_position[dev.model] : controls.cap_state[dev.model]);

    const auto quo_z = z;
    const auto quo_states = states;
    const Eval quo = prob.evaluate(quo_z, quo_states);

    Eval cur = prob.descend(z, states);
    for (int round = 0; round < opt.max_rounds; ++round) {
      bool changed = false;
      for (std::size_t dv = 0; dv < comp.devices.size(); ++dv) {
        const auto& dev = comp.devices[dv];
        int best_state = states[dv];
        double best = cur.merit;
        for (int pos = dev.lo; pos <= dev.hi; ++pos) {
          if (pos == states[dv]) continue;
          auto trial = states;
          trial[dv] = pos;
          const auto e = prob.evaluate(z, trial);
          if (!e.converged) {
            ++d.skipped_candidates;
            continue;
          }
          if (e.merit < best) {
            best = e.merit;
            best_state = pos;
          }
        }
        if (best_state != states[dv]) {
          states[dv] = best_state;
          cur = prob.evaluate(z, states);
          changed = true;
        }
      }
      if (!changed) break;
      cur = prob.descend(z, states);
    }

    // Never hand back something worse than leaving the devices alone.
    const bool quo_better = quo.converged && (!cur.converged || quo.merit <= cur.merit);
    if (quo_better) {
      z = quo_z;
      states = quo_states;
    }
    const Eval fin = prob.evaluate(z, states, true);
    if (quo.converged) d.base_losses += quo.losses;
    d.status_quo = d.status_quo || quo_better;

    for (std::size_t dv = 0; dv < comp.devices.size(); ++dv) {
      const auto& dev = comp.devices[dv];
      (dev.kind == Device::Kind::tap ? d.tap_position : d.cap_state)[dev.model] = states[dv];
    }
    if (!fin.converged) {
      d.feasible = false;
      continue;
    }
    d.predicted_losses += fin.losses;
    for (std::size_t i = 0; i < fin.sol.v_mag.size(); ++i) {
      if (!comp.interior[i]) continue;
      const auto mb = comp.model_of[i];
      const auto& b = m.buses[mb];
      const double v = fin.sol.v_mag[i];
      if (v > b.v_max) d.predicted_violations.entries.push_back({mb, b.id, v, Bound::over, v - b.v_max});
      else if (v < b.v_min) d.predicted_violations.entries.push_back({mb, b.id, v, Bound::under, b.v_min - v});
    }
    for (std::size_t i = 0; i < k; ++i) {
      d.feeders.push_back(comp.feeders[i]);
      d.feeder_p.push_back(z[i]);
      d.feeder_q.push_back(z[k + i]);
      d.head_voltage.push_back(fin.sol.v_mag[comp.head_slot[i]]);
    }
  }
  if (!d.predicted_violations.empty()) d.feasible = false;

  // Feeder order follows the scope's feeder list.
  std::vector<std::size_t> order(d.feeders.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.feeders[a] < d.feeders[b]; });
  auto permute = [&](auto& v) {
    auto copy = v;
    for (std::size_t i = 0; i < order.size(); ++i) v[i] = copy[order[i]];
  };
  permute(d.feeders);
  permute(d.feeder_p);
  permute(d.feeder_q);
  permute(d.head_voltage);
  d.requests = decision_to_requests(m, d, reports, s.interval);
  return d;
}

}  // namespace crest
