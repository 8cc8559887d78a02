#pragma once

// Distribution-side controller: request disaggregation, flexibility limits
// and setpoint application for one radial feeder.
//
// Decision variables are absolute DER setpoints (p, q) plus capacitor
// states. Voltages and head power are predicted with the feeder's VLSM:
//   V  = V0 + S_p dp + S_q dq
//   Ph = P0 + dPh/dp dp + dPh/dq dq
// where a capacitor step adds q_step * V0^2 of reactive injection at its bus.
//
// Objective (cost units):
//   sum_d c_d |p_d - natural_d|          DR / curtailment cost
// + w_v sum_i (V_i - v_ref)^2            voltage deviation
// + w_t ((Ph - P*)^2 + (Qh - Q*)^2)      head tracking penalty
// + w_b sum_i dist(V_i, [v_min + m, v_max - m])^2
// natural_d is the available PV output for inverters and zero otherwise.
// The continuous part is minimized by accelerated projected gradient with
// step halving. A few outer rounds re-solve the full radial power flow and
// correct the tracking target and per-bus margins for linearization error.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "crest/error.hpp"
#include "crest/model.hpp"
#include "crest/powerflow.hpp"
#include "crest/vlsm.hpp"

namespace crest {

struct OperatingPointRequest {
  std::string feeder_id;
  int interval = 0;
  double substation_voltage_setpoint = 1.0;
  double p_request = 0.0;  // head import target
  double q_request = 0.0;
  double pv_curtailment_request = 0.0;
  double dr_request = 0.0;

  bool operator==(const OperatingPointRequest&) const = default;
};

struct DispatchPlan {
  std::string feeder_id;
  std::vector<std::size_t> ders;  // model DER indices
  std::vector<DerSetpoint> setpoints;
  std::vector<std::size_t> capacitors;  // model capacitor indices
  std::vector<int> cap_state;
  double objective_value = 0.0;
  bool feasible = false;
  double achieved_p = 0.0;
  double achieved_q = 0.0;
  int iterations = 0;
  int rounds = 0;

  bool operator==(const DispatchPlan&) const = default;
};

struct FlexibilityReport {
  std::string feeder_id;
  int interval = 0;  // interval the limits apply to
  double p_min = 0.0;
  double p_max = 0.0;
  double q_min = 0.0;
  double q_max = 0.0;
  double p_forecast = 0.0;
  double q_forecast = 0.0;
  double curtailment_headroom = 0.0;  // PV output that could still be curtailed
  double dr_headroom = 0.0;           // controllable load not yet shed
  bool stale = false;

  bool operator==(const FlexibilityReport&) const = default;
};

struct DmsOptions {
  double w_v = 100.0;
  double v_ref = 1.0;
  double w_track = 1e4;
  double w_bound = 1e5;
  double margin = 0.002;
  double eps_track = 1e-3;
  int max_iterations = 500;
  double tolerance = 1e-7;
  int enumeration_limit = 64;
  int correction_rounds = 5;
  // >0 restricts every DER to this many evenly spaced q levels at its
  // current p and solves by enumeration (no continuous refinement).
  int q_levels = 0;
};

namespace dms_detail {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct DerVar {
  std::size_t model = 0;
  std::size_t row = 0;  // feeder-local bus position
  DerKind kind = DerKind::pv_inverter;
  double s = 0.0;
  double p_lo = 0.0, p_hi = 0.0;
  double natural = 0.0;
  double cost = 0.0;
  double p0 = 0.0, q0 = 0.0;
};

struct CapVar {
  std::size_t model = 0;
  std::size_t row = 0;
  double q_step = 0.0;
  int n_steps = 1;
  int s0 = 0;
};

// Linearized feeder around a VLSM base point.
struct LinearFeeder {
  std::vector<DerVar> ders;
  std::vector<CapVar> caps;
  Vec v0, v_lo, v_hi;
  double p0 = 0.0, q0 = 0.0;
  Mat ap, aq;                        // voltage sensitivity to DER p / q
  Vec hpp, hpq, hqp, hqq;            // head P/Q sensitivity to DER p / q
  Mat cap_v;                         // voltage change per capacitor step
  Vec cap_hp, cap_hq;                // head change per capacitor step
};

inline double der_upper_p(const Der& d, double avail) {
  switch (d.kind) {
    case DerKind::pv_inverter: return std::min(std::max(avail, 0.0), d.s_rating);
    case DerKind::storage: return d.s_rating;
    case DerKind::controllable_load: return std::min(std::max(avail, 0.0), d.s_rating);
  }
  return 0.0;
}

inline LinearFeeder linearize(const GridModel& model, std::size_t feeder, const NetworkState& state,
                              const ControlVector& controls, const VlsMatrix& m, double margin) {
  const auto& f = model.feeders[feeder];
  LinearFeeder lf;
  std::vector<std::size_t> row(model.buses.size(), SIZE_MAX);
  for (std::size_t i = 0; i < f.buses.size(); ++i) row[f.buses[i]] = i;
  const auto n = static_cast<Eigen::Index>(f.buses.size());
  lf.v0 = m.base_voltages();
  lf.v_lo.resize(n);
  lf.v_hi.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& b = model.buses[f.buses[static_cast<std::size_t>(i)]];
    lf.v_lo(i) = b.v_min + margin;
    lf.v_hi(i) = b.v_max - margin;
  }
  const auto head = m.base_head();
  lf.p0 = head.p;
  lf.q0 = head.q;

  for (auto d : f.ders) {
    const auto& der = model.ders[d];
    DerVar v;
    v.model = d;
    v.row = row[model.bus_index(der.bus)];
    v.kind = der.kind;
    v.s = der.s_rating;
    v.p_lo = der.kind == DerKind::storage ? -der.s_rating : 0.0;
    v.p_hi = der_upper_p(der, state.der_avail[d]);
    v.natural = natural_der_p(der, state.der_avail[d]);
    v.cost = der.dr_cost;
    v.p0 = effective_der_p(der, controls.der[d], state.der_avail[d]);
    v.q0 = controls.der[d].q;
    lf.ders.push_back(v);
  }
  std::vector<std::size_t> caps = f.capacitors;
  std::sort(caps.begin(), caps.end(),
            [&](std::size_t a, std::size_t b) { return model.capacitors[a].id < model.capacitors[b].id; });
  for (auto c : caps) {
    const auto& cap = model.capacitors[c];
    lf.caps.push_back({c, row[model.bus_index(cap.bus)], cap.q_step, cap.n_steps, controls.cap_state[c]});
  }

  const auto nd = static_cast<Eigen::Index>(lf.ders.size());
  lf.ap.resize(n, nd);
  lf.aq.resize(n, nd);
  lf.hpp.resize(nd);
  lf.hpq.resize(nd);
  lf.hqp.resize(nd);
  lf.hqq.resize(nd);
  for (Eigen::Index k = 0; k < nd; ++k) {
    const auto r = static_cast<Eigen::Index>(lf.ders[static_cast<std::size_t>(k)].row);
    lf.ap.col(k) = m.s_p.col(r);
    lf.aq.col(k) = m.s_q.col(r);
    lf.hpp(k) = m.head_p_dp(r);
    lf.hpq(k) = m.head_p_dq(r);
    lf.hqp(k) = m.head_q_dp(r);
    lf.hqq(k) = m.head_q_dq(r);
  }
  const auto nc = static_cast<Eigen::Index>(lf.caps.size());
  lf.cap_v.resize(n, nc);
  lf.cap_hp.resize(nc);
  lf.cap_hq.resize(nc);
  for (Eigen::Index k = 0; k < nc; ++k) {
    const auto& c = lf.caps[static_cast<std::size_t>(k)];
    const auto r = static_cast<Eigen::Index>(c.row);
    const double dq = c.q_step * lf.v0(r) * lf.v0(r);
    lf.cap_v.col(k) = m.s_q.col(r) * dq;
    lf.cap_hp(k) = m.head_p_dq(r) * dq;
    lf.cap_hq(k) = m.head_q_dq(r) * dq;
  }
  return lf;
}

// Projection of (p, q) onto {p_lo <= p <= p_hi} intersected with the disc
// of radius s. If the disc projection already lies in the slab it is the
// answer; otherwise the answer sits on one of the two chords.
inline void project_setpoint(const DerVar& d, double& p, double& q) {
  if (d.kind == DerKind::controllable_load) {
    p = std::clamp(p, d.p_lo, d.p_hi);
    q = 0.0;
    return;
  }
  double pp = p, qq = q;
  const double r = std::hypot(pp, qq);
  if (r > d.s) {
    pp *= d.s / r;
    qq *= d.s / r;
  }
  if (pp >= d.p_lo && pp <= d.p_hi) {
    p = pp;
    q = qq;
    return;
  }
  double best = std::numeric_limits<double>::infinity(), bp = p, bq = q;
  for (double edge : {d.p_lo, d.p_hi}) {
    const double qmax = std::sqrt(std::max(d.s * d.s - edge * edge, 0.0));
    const double cq = std::clamp(q, -qmax, qmax);
    const double dist = (p - edge) * (p - edge) + (q - cq) * (q - cq);
    if (dist < best) {
      best = dist;
      bp = edge;
      bq = cq;
    }
  }
  p = bp;
  q = bq;
}

struct Objective {
  const LinearFeeder* lf = nullptr;
  DmsOptions opt;
  double p_target = 0.0, q_target = 0.0;
  Vec v_lo, v_hi;  // bounds after any per-bus tightening
  Vec cap_dv;      // voltage shift of the chosen capacitor states
  double cap_dp = 0.0, cap_dq = 0.0;

  void set_caps(const std::vector<int>& states) {
    const auto& l = *lf;
    cap_dv = Vec::Zero(l.v0.size());
    cap_dp = cap_dq = 0.0;
    for (std::size_t k = 0; k < l.caps.size(); ++k) {
      const double steps = states[k] - l.caps[k].s0;
      if (steps == 0) continue;
      const auto kk = static_cast<Eigen::Index>(k);
      cap_dv += l.cap_v.col(kk) * steps;
      cap_dp += l.cap_hp(kk) * steps;
      cap_dq += l.cap_hq(kk) * steps;
    }
  }

  // x = [p_0..p_{nd-1}, q_0..q_{nd-1}]
  Vec voltages(const Vec& x) const {
    const auto& l = *lf;
    const auto nd = static_cast<Eigen::Index>(l.ders.size());
    Vec dp(nd), dq(nd);
    for (Eigen::Index k = 0; k < nd; ++k) {
      dp(k) = x(k) - l.ders[static_cast<std::size_t>(k)].p0;
      dq(k) = x(nd + k) - l.ders[static_cast<std::size_t>(k)].q0;
    }
    return l.v0 + l.ap * dp + l.aq * dq + cap_dv;
  }

  std::pair<double, double> head(const Vec& x) const {
    const auto& l = *lf;
    const auto nd = static_cast<Eigen::Index>(l.ders.size());
    double hp = l.p0 + cap_dp, hq = l.q0 + cap_dq;
    for (Eigen::Index k = 0; k < nd; ++k) {
      const auto& d = l.ders[static_cast<std::size_t>(k)];
      const double dp = x(k) - d.p0, dq = x(nd + k) - d.q0;
      hp += l.hpp(k) * dp + l.hpq(k) * dq;
      hq += l.hqp(k) * dp + l.hqq(k) * dq;
    }
    return {hp, hq};
  }

  double cost(const Vec& x) const {
    double c = 0.0;
    for (std::size_t k = 0; k < lf->ders.size(); ++k)
      c += lf->ders[k].cost * std::abs(x(static_cast<Eigen::Index>(k)) - lf->ders[k].natural);
    return c;
  }

  // Smooth part: everything except storage |p| cost.
  double smooth(const Vec& x, Vec* grad) const {
    const auto& l = *lf;
    const auto nd = static_cast<Eigen::Index>(l.ders.size());
    const Vec v = voltages(x);
    const auto [hp, hq] = head(x);
    const Vec dev = v.array() - opt.v_ref;
    Vec over = (v - v_hi).cwiseMax(0.0) - (v_lo - v).cwiseMax(0.0);
    const double ep = hp - p_target, eq = hq - q_target;
    double f = opt.w_v * dev.squaredNorm() + opt.w_track * (ep * ep + eq * eq) + opt.w_bound * over.squaredNorm();
    for (Eigen::Index k = 0; k < nd; ++k) {
      const auto& d = l.ders[static_cast<std::size_t>(k)];
      if (d.kind != DerKind::storage) f += d.cost * std::abs(x(k) - d.natural);
    }
    if (grad) {
      const Vec gv = 2 * opt.w_v * dev + 2 * opt.w_bound * over;
      grad->resize(2 * nd);
      grad->head(nd) = l.ap.transpose() * gv + 2 * opt.w_track * (ep * l.hpp + eq * l.hqp);
      grad->tail(nd) = l.aq.transpose() * gv + 2 * opt.w_track * (ep * l.hpq + eq * l.hqq);
      for (Eigen::Index k = 0; k < nd; ++k) {
        const auto& d = l.ders[static_cast<std::size_t>(k)];
        // PV never exceeds its natural output and loads never go below it,
        // so the cost is linear on the feasible set.
        if (d.kind == DerKind::pv_inverter) (*grad)(k) -= d.cost;
        else if (d.kind == DerKind::controllable_load) (*grad)(k) += d.cost;
      }
    }
    return f;
  }

  double storage_cost(const Vec& x) const {
    double c = 0.0;
    for (std::size_t k = 0; k < lf->ders.size(); ++k)
      if (lf->ders[k].kind == DerKind::storage) c += lf->ders[k].cost * std::abs(x(static_cast<Eigen::Index>(k)));
    return c;
  }

  double total(const Vec& x) const { return smooth(x, nullptr) + storage_cost(x); }

  // Proximal map of the storage cost followed by capability projection.
  void prox(Vec& x, double step) const {
    const auto nd = static_cast<Eigen::Index>(lf->ders.size());
    for (Eigen::Index k = 0; k < nd; ++k) {
      const auto& d = lf->ders[static_cast<std::size_t>(k)];
      double p = x(k), q = x(nd + k);
      if (d.kind == DerKind::storage) {
        const double t = step * d.cost;
        p = p > t ? p - t : (p < -t ? p + t : 0.0);
      }
      project_setpoint(d, p, q);
      x(k) = p;
      x(nd + k) = q;
    }
  }
};

struct PgResult {
  Vec x;
  double value = 0.0;
  int iterations = 0;
};

// Accelerated proximal gradient with backtracking (step halving) and
// function-value restart.
inline PgResult minimize(const Objective& obj, Vec x0, const DmsOptions& opt) {
  obj.prox(x0, 0.0);
  PgResult res;
  res.x = x0;
  res.value = obj.total(x0);
  if (x0.size() == 0) return res;
  Vec y = x0, x_prev = x0, grad;
  double t = 1.0, step = 1.0;
  for (int it = 1; it <= opt.max_iterations; ++it) {
    res.iterations = it;
    const double fy = obj.smooth(y, &grad);
    Vec x;
    for (int halvings = 0; halvings < 80; ++halvings) {
      x = y - step * grad;
      obj.prox(x, step);
      const Vec d = x - y;
      if (obj.smooth(x, nullptr) <= fy + grad.dot(d) + d.squaredNorm() / (2 * step) + 1e-15) break;
      step *= 0.5;
    }
    const double fx = obj.total(x);
    if (fx > res.value) {
      // Momentum overshoot: restart from the best point.
      y = res.x;
      x_prev = res.x;
      t = 1.0;
      continue;
    }
    const double prev = res.value;
    res.x = x;
    res.value = fx;
    const double t_next = (1 + std::sqrt(1 + 4 * t * t)) / 2;
    y = x + ((t - 1) / t_next) * (x - x_prev);
    x_prev = x;
    t = t_next;
    if (prev - fx <= opt.tolerance * std::max(1.0, std::abs(fx))) break;
  }
  return res;
}

// Capacitor state combinations in lexicographic order of id-sorted devices.
inline std::vector<std::vector<int>> cap_combinations(const LinearFeeder& lf) {
  std::vector<std::vector<int>> out{{}};
  for (const auto& c : lf.caps) {
    std::vector<std::vector<int>> next;
    for (const auto& prefix : out)
      for (int s = 0; s <= c.n_steps; ++s) {
        auto v = prefix;
        v.push_back(s);
        next.push_back(std::move(v));
      }
    out = std::move(next);
  }
  return out;
}

inline std::size_t combination_count(const LinearFeeder& lf) {
  std::size_t n = 1;
  for (const auto& c : lf.caps) {
    n *= static_cast<std::size_t>(c.n_steps + 1);
    if (n > (1u << 20)) break;
  }
  return n;
}

struct Candidate {
  Vec x;
  std::vector<int> caps;
  double value = std::numeric_limits<double>::infinity();
  int iterations = 0;
};

inline Candidate solve_continuous(Objective obj, const Vec& x0, const DmsOptions& opt) {
  const auto& lf = *obj.lf;
  Candidate best;
  auto evaluate = [&](const std::vector<int>& caps) {
    obj.set_caps(caps);
    auto r = minimize(obj, x0, opt);
    best.iterations += r.iterations;
    if (r.value < best.value) {
      best.value = r.value;
      best.x = r.x;
      best.caps = caps;
    }
    return r.value;
  };
  if (combination_count(lf) <= static_cast<std::size_t>(opt.enumeration_limit)) {
    for (const auto& caps : cap_combinations(lf)) evaluate(caps);
    return best;
  }
  // Greedy: one device at a time in id order until nothing improves.
  std::vector<int> caps;
  for (const auto& c : lf.caps) caps.push_back(c.s0);
  evaluate(caps);
  for (bool improved = true; improved;) {
    improved = false;
    for (std::size_t k = 0; k < lf.caps.size(); ++k)
      for (int s = 0; s <= lf.caps[k].n_steps; ++s) {
        if (s == best.caps[k]) continue;
        auto trial = best.caps;
        trial[k] = s;
        const double before = best.value;
        if (evaluate(trial) < before) improved = true;
      }
  }
  return best;
}

// Exhaustive search over capacitor states and discrete DER q levels.
inline Candidate solve_discrete(Objective obj, const DmsOptions& opt) {
  const auto& lf = *obj.lf;
  const auto nd = lf.ders.size();
  std::vector<std::vector<double>> levels(nd);
  for (std::size_t k = 0; k < nd; ++k) {
    const auto& d = lf.ders[k];
    const double qmax = d.kind == DerKind::controllable_load ? 0.0 : std::sqrt(std::max(d.s * d.s - d.p0 * d.p0, 0.0));
    const int n = qmax > 0 ? opt.q_levels : 1;
    for (int i = 0; i < n; ++i) levels[k].push_back(n == 1 ? 0.0 : -qmax + 2 * qmax * i / (n - 1));
  }
  Candidate best;
  Vec x(static_cast<Eigen::Index>(2 * nd));
  for (const auto& caps : cap_combinations(lf)) {
    obj.set_caps(caps);
    std::vector<std::size_t> idx(nd, 0);
    while (true) {
      for (std::size_t k = 0; k < nd; ++k) {
        x(static_cast<Eigen::Index>(k)) = lf.ders[k].p0;
        x(static_cast<Eigen::Index>(nd + k)) = levels[k][idx[k]];
      }
      const double v = obj.total(x);
      ++best.iterations;
      if (v < best.value) {
        best.value = v;
        best.x = x;
        best.caps = caps;
      }
      // Odometer step; the last DER varies fastest.
      std::size_t k = nd;
      while (k > 0 && ++idx[k - 1] == levels[k - 1].size()) idx[--k] = 0;
      if (k == 0) break;
    }
  }
  return best;
}

inline ControlVector with_plan(const ControlVector& base, const DispatchPlan& plan) {
  ControlVector c = base;
  for (std::size_t k = 0; k < plan.ders.size(); ++k) c.der[plan.ders[k]] = plan.setpoints[k];
  for (std::size_t k = 0; k < plan.capacitors.size(); ++k) c.cap_state[plan.capacitors[k]] = plan.cap_state[k];
  return c;
}

}  // namespace dms_detail

// Writes plan setpoints into a control vector after checking every device
// limit. Applying the same plan twice gives the same result.
inline ControlVector apply_plan(const GridModel& model, const ControlVector& controls, const DispatchPlan& plan) {
  if (plan.ders.size() != plan.setpoints.size() || plan.capacitors.size() != plan.cap_state.size())
    throw DimensionError("dispatch plan for feeder '" + plan.feeder_id + "' has mismatched device lists");
  for (std::size_t k = 0; k < plan.ders.size(); ++k) {
    const auto& d = model.ders.at(plan.ders[k]);
    const auto& sp = plan.setpoints[k];
    if (!std::isfinite(sp.p) || !std::isfinite(sp.q) || sp.p * sp.p + sp.q * sp.q > d.s_rating * d.s_rating * (1 + 1e-9))
      throw CapabilityError("DER '" + d.id + "': setpoint (" + format_double(sp.p) + ", " + format_double(sp.q) +
                            ") outside capability circle of radius " + format_double(d.s_rating));
    if (d.kind != DerKind::storage && sp.p < 0)
      throw CapabilityError("DER '" + d.id + "': negative real-power setpoint");
    if (d.kind == DerKind::controllable_load && sp.q != 0)
      throw CapabilityError("DER '" + d.id + "': controllable load cannot supply reactive power");
  }
  for (std::size_t k = 0; k < plan.capacitors.size(); ++k) {
    const auto& c = model.capacitors.at(plan.capacitors[k]);
    if (plan.cap_state[k] < 0 || plan.cap_state[k] > c.n_steps)
      throw CapabilityError("capacitor '" + c.id + "': state " + std::to_string(plan.cap_state[k]) +
                            " outside [0, " + std::to_string(c.n_steps) + "]");
  }
  return dms_detail::with_plan(controls, plan);
}

// Plan that keeps the feeder's current setpoints.
inline DispatchPlan null_plan(const GridModel& model, std::size_t feeder, const ControlVector& controls) {
  const auto& f = model.feeders[feeder];
  DispatchPlan p;
  p.feeder_id = f.id;
  p.ders = f.ders;
  for (auto d : f.ders) p.setpoints.push_back(controls.der[d]);
  p.capacitors = f.capacitors;
  for (auto c : f.capacitors) p.cap_state.push_back(controls.cap_state[c]);
  p.feasible = true;
  return p;
}

// Distributes an operating-point request over the feeder's DERs and
// capacitors. `m` must be the VLSM of (state, controls) at the requested
// substation voltage.
inline DispatchPlan disaggregate(const GridModel& model, std::size_t feeder, const NetworkState& state,
                                 const ControlVector& controls, const VlsMatrix& m, const OperatingPointRequest& req,
                                 const DmsOptions& opt = {}) {
  using namespace dms_detail;
  const auto& f = model.feeders.at(feeder);
  if (req.feeder_id != f.id)
    throw ValidationError("request for feeder '" + req.feeder_id + "' delivered to feeder '" + f.id + "'");
  if (!std::isfinite(req.p_request) || !std::isfinite(req.q_request) || req.pv_curtailment_request < 0 ||
      req.dr_request < 0)
    throw ValidationError("feeder '" + f.id + "': malformed operating-point request");
  const auto net = build_feeder_network(model, feeder, state, controls, req.substation_voltage_setpoint);
  if (!m.matches(net))
    throw StaleSensitivityError("VLSM of feeder '" + f.id + "' does not match the current base point");

  const LinearFeeder lf = linearize(model, feeder, state, controls, m, opt.margin);
  const auto nd = static_cast<Eigen::Index>(lf.ders.size());
  Vec x0(2 * nd);
  for (Eigen::Index k = 0; k < nd; ++k) {
    x0(k) = lf.ders[static_cast<std::size_t>(k)].p0;
    x0(nd + k) = lf.ders[static_cast<std::size_t>(k)].q0;
  }

  Objective obj;
  obj.lf = &lf;
  obj.opt = opt;
  obj.p_target = req.p_request;
  obj.q_target = req.q_request;
  obj.v_lo = lf.v_lo;
  obj.v_hi = lf.v_hi;

  DispatchPlan plan;
  plan.feeder_id = f.id;
  for (const auto& d : lf.ders) plan.ders.push_back(d.model);
  for (const auto& c : lf.caps) plan.capacitors.push_back(c.model);

  auto fill = [&](const Candidate& cand) {
    plan.setpoints.clear();
    for (Eigen::Index k = 0; k < nd; ++k) {
      const auto& d = lf.ders[static_cast<std::size_t>(k)];
      double p = cand.x(k);
      const double q = cand.x(nd + k);
      // An uncurtailed inverter keeps its ceiling open so later irradiance
      // is not clipped.
      if (d.kind == DerKind::pv_inverter && p >= d.p_hi - 1e-12)
        p = std::sqrt(std::max(d.s * d.s - q * q, 0.0));
      plan.setpoints.push_back({p, q});
    }
    plan.cap_state = cand.caps;
    const auto sol = solve_radial(build_feeder_network(model, feeder, state, with_plan(controls, plan),
                                                       req.substation_voltage_setpoint));
    if (!sol.converged) return std::pair<bool, PowerFlowSolution>{false, sol};
    const auto h = feeder_head_import(sol);
    plan.achieved_p = h.p;
    plan.achieved_q = h.q;
    return std::pair<bool, PowerFlowSolution>{true, sol};
  };

  auto score = [&](const Candidate& cand) {
    Objective o = obj;
    o.p_target = req.p_request;
    o.q_target = req.q_request;
    o.set_caps(cand.caps);
    return o.total(cand.x);
  };

  if (opt.q_levels > 0) {
    const auto cand = solve_discrete(obj, opt);
    const auto [ok, sol] = fill(cand);
    plan.iterations = cand.iterations;
    plan.objective_value = cand.value;
    plan.feasible = ok && total_violations(sol, model, 0.0, BusLevel::distribution).empty();
    plan.rounds = 1;
    return plan;
  }

  Candidate cand;
  Vec lo_margin = Vec::Constant(lf.v0.size(), 0.0), hi_margin = Vec::Constant(lf.v0.size(), 0.0);
  bool feasible = false;
  for (int round = 1; round <= std::max(1, opt.correction_rounds); ++round) {
    cand = solve_continuous(obj, x0, opt);
    plan.iterations += cand.iterations;
    plan.rounds = round;
    const auto [ok, sol] = fill(cand);
    if (!ok) break;
    const auto viol = total_violations(sol, model, 0.0, BusLevel::distribution);
    feasible = viol.empty();
    const double ep = plan.achieved_p - req.p_request, eq = plan.achieved_q - req.q_request;
    bool tightened = false;
    for (std::size_t i = 0; i < f.buses.size(); ++i) {
      const auto& b = model.buses[f.buses[i]];
      const double v = sol.v_mag[i + 1];
      const auto ii = static_cast<Eigen::Index>(i);
      // Keep at least half the margin in the nonlinear solution.
      if (v > b.v_max - opt.margin / 2) {
        hi_margin(ii) += v - (b.v_max - opt.margin) + 1e-4;
        tightened = true;
      } else if (v < b.v_min + opt.margin / 2) {
        lo_margin(ii) += (b.v_min + opt.margin) - v + 1e-4;
        tightened = true;
      }
    }
    const bool tracked = std::abs(ep) <= opt.eps_track / 2 && std::abs(eq) <= opt.eps_track / 2;
    if (tracked && !tightened) break;
    if (round == opt.correction_rounds) break;
    obj.p_target -= ep;
    obj.q_target -= eq;
    obj.v_lo = lf.v_lo + lo_margin;
    obj.v_hi = lf.v_hi - hi_margin;
    x0 = cand.x;
  }
  plan.feasible = feasible;
  plan.objective_value = score(cand);
  return plan;
}

namespace dms_detail {

// Largest alpha in [0, 1] along base -> extreme that keeps the feeder within
// voltage bounds; 0 when neither the extreme nor the base is feasible.
// head_p/head_q receive the head import at the chosen point.
inline double feasible_step(const GridModel& model, std::size_t feeder, const NetworkState& state,
                            const ControlVector& base, const ControlVector& extreme, const LinearFeeder& lf,
                            double head_voltage, double margin, double& head_p, double& head_q) {
  const auto nd = lf.ders.size();
  auto blend = [&](double a) {
    ControlVector c = base;
    for (std::size_t k = 0; k < nd; ++k) {
      const auto d = lf.ders[k].model;
      c.der[d].p = base.der[d].p + a * (extreme.der[d].p - base.der[d].p);
      c.der[d].q = base.der[d].q + a * (extreme.der[d].q - base.der[d].q);
    }
    // Capacitors move in whole steps: rounding toward the base keeps the
    // blend inside the segment the bisection certified.
    for (const auto& cap : lf.caps) {
      const int b = base.cap_state[cap.model], e = extreme.cap_state[cap.model];
      c.cap_state[cap.model] = b + static_cast<int>(std::trunc(a * (e - b)));
    }
    return c;
  };
  auto linear_ok = [&](double a) {
    const auto c = blend(a);
    Vec dv = Vec::Zero(lf.v0.size());
    for (std::size_t k = 0; k < nd; ++k) {
      const auto d = lf.ders[k].model;
      const auto kk = static_cast<Eigen::Index>(k);
      dv += lf.ap.col(kk) * (effective_der_p(model.ders[d], c.der[d], state.der_avail[d]) - lf.ders[k].p0) +
            lf.aq.col(kk) * (c.der[d].q - lf.ders[k].q0);
    }
    for (std::size_t k = 0; k < lf.caps.size(); ++k)
      dv += lf.cap_v.col(static_cast<Eigen::Index>(k)) * (c.cap_state[lf.caps[k].model] - lf.caps[k].s0);
    const Vec v = lf.v0 + dv;
    return ((v - lf.v_hi).array() <= 0).all() && ((lf.v_lo - v).array() <= 0).all();
  };
  auto full = [&](double a, bool& ok) {
    const auto sol = solve_radial(build_feeder_network(model, feeder, state, blend(a), head_voltage));
    ok = sol.converged && total_violations(sol, model, margin / 2, BusLevel::distribution).empty();
    return sol;
  };
  bool ok = false;
  auto sol = full(1.0, ok);
  double alpha = 1.0;
  if (!ok) {
    bool base_ok = false;
    const auto base_sol = full(0.0, base_ok);
    if (!base_ok) {
      const auto h = feeder_head_import(base_sol);
      head_p = h.p;
      head_q = h.q;
      return 0.0;
    }
    double lo = 0.0, hi = 1.0;
    if (linear_ok(1.0)) lo = 1.0;
    else
      for (int i = 0; i < 30; ++i) {
        const double mid = (lo + hi) / 2;
        (linear_ok(mid) ? lo : hi) = mid;
      }
    alpha = lo;
    sol = full(alpha, ok);
    for (int i = 0; i < 30 && !ok; ++i) {
      alpha *= 0.5;
      sol = full(alpha, ok);
    }
    if (!ok) {
      alpha = 0.0;
      sol = base_sol;
    }
  }
  const auto h = feeder_head_import(sol);
  head_p = h.p;
  head_q = h.q;
  return alpha;
}

}  // namespace dms_detail

// Limits of the feeder-head import reachable by the feeder's DERs and
// capacitors at the forecast state, each checked for voltage feasibility.
// `m` is the VLSM at (forecast, controls, head_voltage).
inline FlexibilityReport compute_flexibility(const GridModel& model, std::size_t feeder, const NetworkState& forecast,
                                             const ControlVector& controls, const VlsMatrix& m,
                                             const DmsOptions& opt = {}) {
  using namespace dms_detail;
  const auto& f = model.feeders.at(feeder);
  const double vh = m.head_voltage;
  const auto net = build_feeder_network(model, feeder, forecast, controls, vh);
  if (!m.matches(net))
    throw StaleSensitivityError("VLSM of feeder '" + f.id + "' does not match the forecast base point");
  const LinearFeeder lf = linearize(model, feeder, forecast, controls, m, opt.margin);

  FlexibilityReport rep;
  rep.feeder_id = f.id;
  rep.interval = forecast.interval;
  const auto base_head = m.base_head();
  rep.p_forecast = base_head.p;
  rep.q_forecast = base_head.q;

  // Working setpoints use effective p so PV ceilings above availability do
  // not distort the blend.
  ControlVector base = controls;
  for (const auto& d : lf.ders) base.der[d.model] = {d.p0, d.q0};

  auto q_room = [&](const DerVar& d, double p) { return std::sqrt(std::max(d.s * d.s - p * p, 0.0)); };
  ControlVector hi_p = base, lo_p = base, hi_q = base, lo_q = base;
  for (const auto& d : lf.ders) {
    auto& sp_hi = hi_p.der[d.model];
    auto& sp_lo = lo_p.der[d.model];
    switch (d.kind) {
      case DerKind::pv_inverter:
        sp_hi.p = 0.0;
        sp_lo.p = std::min(d.p_hi, q_room(d, d.q0));
        break;
      case DerKind::storage:
        sp_hi.p = -q_room(d, d.q0);
        sp_lo.p = q_room(d, d.q0);
        break;
      case DerKind::controllable_load:
        sp_hi.p = 0.0;
        sp_lo.p = d.p_hi;
        break;
    }
    if (d.kind != DerKind::controllable_load) {
      hi_q.der[d.model].q = -q_room(d, d.p0);
      lo_q.der[d.model].q = q_room(d, d.p0);
    }
    if (d.kind == DerKind::pv_inverter) rep.curtailment_headroom += d.p0;
    if (d.kind == DerKind::controllable_load) rep.dr_headroom += std::max(d.p_hi - d.p0, 0.0);
  }
  for (const auto& c : lf.caps) {
    hi_q.cap_state[c.model] = 0;
    lo_q.cap_state[c.model] = c.n_steps;
  }
  double hp = 0, hq = 0;
  feasible_step(model, feeder, forecast, base, hi_p, lf, vh, opt.margin, hp, hq);
  rep.p_max = hp;
  feasible_step(model, feeder, forecast, base, lo_p, lf, vh, opt.margin, hp, hq);
  rep.p_min = hp;
  feasible_step(model, feeder, forecast, base, hi_q, lf, vh, opt.margin, hp, hq);
  rep.q_max = hq;
  feasible_step(model, feeder, forecast, base, lo_q, lf, vh, opt.margin, hp, hq);
  rep.q_min = hq;

  rep.p_min = std::min(rep.p_min, rep.p_forecast);
  rep.p_max = std::max(rep.p_max, rep.p_forecast);
  rep.q_min = std::min(rep.q_min, rep.q_forecast);
  rep.q_max = std::max(rep.q_max, rep.q_forecast);
  return rep;
}

// ---------------------------------------------------------------------------
// Canonical message payloads

inline nlohmann::ordered_json to_json(const OperatingPointRequest& r) {
  return {{"feeder", r.feeder_id},
          {"interval", r.interval},
          {"v_set", r.substation_voltage_setpoint},
          {"p", r.p_request},
          {"q", r.q_request},
          {"curtail", r.pv_curtailment_request},
          {"dr", r.dr_request}};
}

inline nlohmann::ordered_json to_json(const FlexibilityReport& r) {
  return {{"feeder", r.feeder_id},       {"interval", r.interval},   {"p_min", r.p_min},
          {"p_max", r.p_max},            {"q_min", r.q_min},         {"q_max", r.q_max},
          {"p_forecast", r.p_forecast},  {"q_forecast", r.q_forecast},
          {"curtail_room", r.curtailment_headroom}, {"dr_room", r.dr_headroom}};
}

inline nlohmann::ordered_json to_json(const DispatchPlan& p) {
  nlohmann::ordered_json ders = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < p.ders.size(); ++k)
    ders.push_back({{"der", p.ders[k]}, {"p", p.setpoints[k].p}, {"q", p.setpoints[k].q}});
  return {{"feeder", p.feeder_id},       {"feasible", p.feasible}, {"objective", p.objective_value},
          {"achieved_p", p.achieved_p},  {"achieved_q", p.achieved_q}, {"ders", ders},
          {"caps", p.cap_state}};
}

inline OperatingPointRequest request_from_json(const nlohmann::json& j) {
  try {
    OperatingPointRequest r;
    r.feeder_id = j.at("feeder").get<std::string>();
    r.interval = j.at("interval").get<int>();
    r.substation_voltage_setpoint = j.at("v_set").get<double>();
    r.p_request = j.at("p").get<double>();
    r.q_request = j.at("q").get<double>();
    r.pv_curtailment_request = j.at("curtail").get<double>();
    r.dr_request = j.at("dr").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("operating-point request: ") + e.what());
  }
}

inline FlexibilityReport report_from_json(const nlohmann::json& j) {
  try {
    FlexibilityReport r;
    r.feeder_id = j.at("feeder").get<std::string>();
    r.interval = j.at("interval").get<int>();
    r.p_min = j.at("p_min").get<double>();
    r.p_max = j.at("p_max").get<double>();
    r.q_min = j.at("q_min").get<double>();
    r.q_max = j.at("q_max").get<double>();
    r.p_forecast = j.at("p_forecast").get<double>();
    r.q_forecast = j.at("q_forecast").get<double>();
    r.curtailment_headroom = j.at("curtail_room").get<double>();
    r.dr_headroom = j.at("dr_room").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("flexibility report: ") + e.what());
  }
}

}  // namespace crest
