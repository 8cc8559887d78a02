// Acceptance harness: prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "crest/runner.hpp"
#include "oracles.hpp"

using namespace crest;
namespace t = crest::test;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;     // printed on success and failure
  std::vector<std::string> failures;  // first few reasons a check failed

  void require(bool cond, const std::string& why) {
    if (cond) return;
    pass = false;
    if (failures.size() < 5) failures.push_back(why);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

Scenario bundled(const std::string& name) { return load_scenario(t::scenario_dir(name)); }

const std::vector<std::string>& bundled_names() {
  static const std::vector<std::string> names{"two_bus", "three_bus", "ieee33_high_pv", "td_two_feeder", "islands",
                                              "benign"};
  return names;
}

// Voltage at each feeder head from a system solve under the given controls.
double head_voltage(const GridModel& g, const NetworkState& s, const ControlVector& c, std::size_t f) {
  const auto sol = solve_meshed(g, s, c);
  if (!sol.converged) throw ConvergenceError("system power flow: " + sol.diagnostic);
  return sol.v_mag[g.feeders[f].head_bus];
}

int count_out_of_bounds(const GridModel& g, const PowerFlowSolution& sol) {
  int n = 0;
  for (std::size_t i = 0; i < sol.v_mag.size(); ++i) {
    const auto& b = g.buses[sol.model_bus[i]];
    if (sol.v_mag[i] > b.v_max || sol.v_mag[i] < b.v_min) ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------

Outcome timing_budget() {
  Outcome o;
  const auto sc = bundled("benign");
  const auto& b = sc.config.budget;
  o.require(b.ems_solve_s == 45 && b.ems_to_dms_s == 15 && b.dms_solve_s == 30 && b.dms_der_roundtrip_s == 120 &&
                b.dms_to_ems_s == 60 && b.interval_s == 300,
            "benign budget is not 45/15/30/120/60 in 300 s");
  for (auto p : kAllPaths) o.require(sc.config.link(p).distribution == LatencyDistribution::constant, "link not constant");
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run_horizon(sc.grid, sc.config);
  const double secs = seconds_since(t0);
  o.require(res.records.size() == 288, "expected 288 intervals, got " + std::to_string(res.records.size()));
  for (const auto& r : res.records) {
    o.require(r.x_elapsed_s == 270.0, "interval " + std::to_string(r.interval) + " x=" + fmt(r.x_elapsed_s, 17));
    o.require(r.slack_s == 30.0, "interval " + std::to_string(r.interval) + " slack=" + fmt(r.slack_s, 17));
    o.require(r.deadline_met && !r.carried_over, "interval " + std::to_string(r.interval) + " missed");
  }
  o.require(secs < 1.0, "runtime " + fmt(secs) + " s");
  o.note(std::to_string(res.records.size()) + " intervals at x=270 s, slack 30 s, " + fmt(secs, 3) + " s");
  return o;
}

Outcome deadline_degradation() {
  Outcome o;
  const auto sc = bundled("benign");
  // Solve times are fixed; every leg scales: x = 45 + 30 + s * (15 + 60 + 60 + 60).
  const std::vector<double> scales{1.0, 1.05, 1.1, 1.15, 1.16, 1.2, 1.5, 2.0};
  std::vector<double> prev_x(static_cast<std::size_t>(sc.config.horizon), 0.0);
  int prev_misses = 0, crossed = 0;
  for (double s : scales) {
    auto cfg = sc.config;
    cfg.latency_scale = s;
    const auto res = run_horizon(sc.grid, cfg);
    const double raw = 75 + 195 * s;
    const bool overrun = raw > cfg.budget.interval_s;
    const double expect = overrun ? cfg.budget.interval_s : raw;
    for (std::size_t k = 0; k < res.records.size(); ++k) {
      const auto& r = res.records[k];
      o.require(r.deadline_met == !overrun && r.carried_over == overrun,
                "scale " + fmt(s) + " interval " + std::to_string(k) + " miss flag disagrees with x=" + fmt(raw));
      o.require(std::abs(r.x_elapsed_s - expect) <= 1e-9, "scale " + fmt(s) + " x=" + fmt(r.x_elapsed_s, 12));
      o.require(r.x_elapsed_s >= prev_x[k], "x decreased at scale " + fmt(s));
      prev_x[k] = r.x_elapsed_s;
    }
    o.require(res.summary.deadline_misses >= prev_misses, "misses decreased at scale " + fmt(s));
    prev_misses = res.summary.deadline_misses;
    if (overrun) ++crossed;
  }
  o.require(crossed > 0 && crossed < static_cast<int>(scales.size()), "sweep does not cross 300 s");

  // Stochastic links: the same seed with longer latencies never finishes sooner.
  auto ieee = bundled("ieee33_high_pv");
  ieee.config.horizon = 48;
  std::vector<double> px(48, 0.0);
  int stochastic_misses = 0;
  for (double s : {1.0, 1.25, 1.5, 2.0}) {
    auto cfg = ieee.config;
    cfg.latency_scale = s;
    const auto res = run_horizon(ieee.grid, cfg);
    for (std::size_t k = 0; k < res.records.size(); ++k) {
      o.require(res.records[k].x_elapsed_s >= px[k], "33-bus x decreased at scale " + fmt(s));
      px[k] = res.records[k].x_elapsed_s;
    }
    stochastic_misses = res.summary.deadline_misses;
  }
  o.note("miss boundary at scale 225/195, " + std::to_string(crossed) + "/" + std::to_string(scales.size()) +
         " scales overrun; 33-bus misses at scale 2: " + std::to_string(stochastic_misses) + "/48");
  return o;
}

Outcome violation_elimination() {
  Outcome o;
  const auto sc = bundled("ieee33_high_pv");
  const auto& g = sc.grid;
  const auto& cfg = sc.config;
  o.require(cfg.horizon == 288, "horizon is not 288 intervals");

  int base_intervals = 0;
  const auto base = run_baseline(g, cfg);
  const auto c0 = initial_controls(g);
  for (const auto& r : base.records) {
    const int n = count_out_of_bounds(g, solve_meshed(g, snapshot_at(g, r.interval), c0));
    o.require(n == r.violations, "baseline interval " + std::to_string(r.interval) + " count mismatch");
    if (n > 0) ++base_intervals;
  }
  o.require(base_intervals >= 10, "baseline has only " + std::to_string(base_intervals) + " violation intervals");

  const auto t0 = std::chrono::steady_clock::now();
  Coordinator co(g, cfg, cfg.groups);
  int after_first = 0, misses = 0;
  for (int k = 0; k < cfg.horizon; ++k) {
    const auto r = co.run_interval(k);
    // Independent full Newton solve under the controls left in force.
    const int n = count_out_of_bounds(g, solve_meshed(g, snapshot_at(g, k), co.controls()));
    o.require(n == r.violations, "interval " + std::to_string(k) + " count mismatch");
    if (k >= 1 && n > 0) ++after_first;
    if (!r.deadline_met) ++misses;
  }
  const double secs = seconds_since(t0);
  o.require(after_first == 0, std::to_string(after_first) + " violation intervals after the first");
  o.require(secs < 60.0, "runtime " + fmt(secs) + " s");
  o.note("baseline " + std::to_string(base_intervals) + " violation intervals, controlled " +
         std::to_string(after_first) + ", deadline misses " + std::to_string(misses) + ", " + fmt(secs, 3) + " s");
  return o;
}

struct VlsmErrors {
  double single = 0;    // 0.01 pu (1% of base) step at one bus
  double relative = 0;  // every bus injection changed by up to 1%
  double joint = 0;     // 0.01 pu at every bus at once; far beyond 1%, reported only
};

// Largest |predicted - re-solved| voltage change per perturbation family.
VlsmErrors vlsm_errors(const GridModel& g, int interval, std::uint64_t seed) {
  const auto s = snapshot_at(g, interval);
  const auto c = initial_controls(g);
  const double vh = head_voltage(g, s, c, 0);
  const auto m = compute_vlsm(g, 0, s, c, vh);
  const auto net = build_feeder_network(g, 0, s, c, vh);
  const std::size_t n = m.size();
  auto error = [&](const std::vector<double>& dp, const std::vector<double>& dq) {
    auto pert = net;
    for (std::size_t i = 0; i < n; ++i) {
      pert.p_inj[i + 1] += dp[i];
      pert.q_inj[i + 1] += dq[i];
    }
    const auto sol = solve_radial(pert);
    if (!sol.converged) throw ConvergenceError("perturbed feeder: " + sol.diagnostic);
    const auto dv = predict_dv(m, dp, dq);
    double worst = 0;
    for (std::size_t i = 0; i < n; ++i)
      worst = std::max(worst, std::abs(sol.v_mag[i + 1] - m.base_point.v_mag[i + 1] - dv(static_cast<Eigen::Index>(i))));
    return worst;
  };
  VlsmErrors e;
  for (std::size_t j = 0; j < n; ++j)
    for (double sign : {-1.0, 1.0}) {
      std::vector<double> dp(n, 0.0), dq(n, 0.0);
      dp[j] = 0.01 * sign;
      e.single = std::max(e.single, error(dp, dq));
      dp[j] = 0;
      dq[j] = 0.01 * sign;
      e.single = std::max(e.single, error(dp, dq));
    }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> rp(n), rq(n), ap(n), aq(n);
    for (std::size_t i = 0; i < n; ++i) {
      rp[i] = 0.01 * u(rng) * net.p_inj[i + 1];
      rq[i] = 0.01 * u(rng) * net.q_inj[i + 1];
      ap[i] = 0.01 * u(rng);
      aq[i] = 0.01 * u(rng);
    }
    e.relative = std::max(e.relative, error(rp, rq));
    e.joint = std::max(e.joint, error(ap, aq));
  }
  return e;
}

Outcome vlsm_fidelity() {
  Outcome o;
  const auto two = bundled("two_bus");
  const auto& g2 = two.grid;
  const auto s2 = snapshot_at(g2, 0);
  const auto c2 = initial_controls(g2);
  const auto m2 = compute_vlsm(g2, 0, s2, c2, head_voltage(g2, s2, c2, 0));
  const double x = g2.branches[g2.feeders[0].branches[0]].x;
  const double sq = m2.s_q(0, 0);
  o.require(x == 0.02, "2-bus reactance is not 0.02");
  o.require(std::abs(sq - x) <= 0.05 * x, "s_q=" + fmt(sq) + " vs " + fmt(x));

  const auto ieee = bundled("ieee33_high_pv");
  const std::vector<std::pair<std::string, std::pair<const GridModel*, std::vector<int>>>> cases{
      {"2-bus", {&g2, {0, 6, 11}}}, {"33-bus", {&ieee.grid, {0, 96, 144, 216}}}};
  std::string detail;
  for (const auto& [label, spec] : cases) {
    VlsmErrors w;
    for (int k : spec.second) {
      const auto e = vlsm_errors(*spec.first, k, 11 + static_cast<std::uint64_t>(k));
      w.single = std::max(w.single, e.single);
      w.relative = std::max(w.relative, e.relative);
      w.joint = std::max(w.joint, e.joint);
    }
    o.require(w.single <= 5e-4, label + " single-bus dV error " + fmt(w.single));
    o.require(w.relative <= 5e-4, label + " 1% injection dV error " + fmt(w.relative));
    detail += "; " + label + " max dV error " + fmt(std::max(w.single, w.relative), 3) + " pu (0.01 pu at every bus: " +
              fmt(w.joint, 3) + ")";
  }
  o.note("2-bus s_q=" + fmt(sq) + " (analytic 0.02)" + detail);
  return o;
}

Outcome dms_oracle() {
  Outcome o;
  const auto g = t::dms_oracle_feeder();
  const auto s = snapshot_at(g, 0);
  const auto c = initial_controls(g);
  const auto m = compute_vlsm(g, 0, s, c, 1.0);
  DmsOptions opt;
  opt.q_levels = 5;
  const auto h = m.base_head();
  const OperatingPointRequest req{g.feeders[0].id, 0, 1.0, h.p, h.q - 0.07, 0.0, 0.0};
  const auto t0 = std::chrono::steady_clock::now();
  const auto plan = disaggregate(g, 0, s, c, m, req, opt);
  const double secs = seconds_since(t0);
  const auto oracle = t::dms_brute_force(g, s, c, m, req, opt);
  const double diff = std::abs(plan.objective_value - oracle.best);
  o.require(oracle.evaluations == 50, "oracle enumerated " + std::to_string(oracle.evaluations));
  o.require(diff <= 1e-6, "objective " + fmt(plan.objective_value, 12) + " vs " + fmt(oracle.best, 12));
  o.require(secs < 1.0, "runtime " + fmt(secs) + " s");
  o.note("objective " + fmt(plan.objective_value, 10) + ", oracle " + fmt(oracle.best, 10) + " over 50 candidates, " +
         fmt(secs * 1e3, 3) + " ms");
  return o;
}

Outcome ems_oracle() {
  Outcome o;
  const auto g = t::ems_oracle_grid();
  const auto s = snapshot_at(g, 0);
  const auto c = initial_controls(g);
  const auto rep = t::flex_box("F", 0.5, 0.2, 0.025);
  const auto t0 = std::chrono::steady_clock::now();
  const auto d = ems_optimize(g, s, c, {rep}, whole_system(g));
  const double secs = seconds_since(t0);
  const auto oracle = t::ems_grid_search(rep, EmsOptions{}.margin);
  const double diff = std::abs(d.predicted_losses - oracle.best);
  o.require(std::isfinite(oracle.best), "grid search found no feasible point");
  o.require(diff <= 1e-6, "losses " + fmt(d.predicted_losses, 12) + " vs " + fmt(oracle.best, 12));
  o.require(secs < 30.0, "runtime " + fmt(secs) + " s");
  o.note("losses " + fmt(d.predicted_losses, 10) + ", oracle " + fmt(oracle.best, 10) + " over " +
         std::to_string(oracle.evaluations) + " power flows, " + fmt(secs * 1e3, 3) + " ms");
  return o;
}

Outcome powerflow_correctness() {
  Outcome o;
  const auto two = bundled("two_bus");
  const auto& g2 = two.grid;
  const auto s2 = snapshot_at(g2, 0);
  const auto sol2 = solve_meshed(g2, s2, initial_controls(g2));
  const auto& br = g2.branches[0];
  const auto load = g2.feeders[0].buses[0];
  const double v_exact = t::two_bus_voltage(g2.buses[g2.feeders[0].head_bus].v_set, br.r, br.x, s2.load_p[load],
                                            s2.load_q[load]);
  const double err2 = std::abs(sol2.v_mag[1] - v_exact);
  o.require(sol2.converged && err2 <= 1e-8, "2-bus |V - analytic| = " + fmt(err2));

  double cross = 0, residual = 0;
  int feeders = 0, solves = 0;
  for (const auto& name : bundled_names()) {
    const auto sc = bundled(name);
    const auto& g = sc.grid;
    const auto c = initial_controls(g);
    for (int k : {0, g.horizon / 4, g.horizon / 2, 3 * g.horizon / 4, g.horizon - 1}) {
      const auto s = snapshot_at(g, k);
      const auto sys = solve_meshed(g, s, c);
      o.require(sys.converged, name + " system solve failed at " + std::to_string(k));
      residual = std::max(residual, std::abs(power_balance_residual(build_network(g, s, c), sys)));
      for (std::size_t f = 0; f < g.feeders.size(); ++f) {
        const auto net = build_feeder_network(g, f, s, c, sys.v_mag[g.feeders[f].head_bus]);
        const auto rad = solve_radial(net);
        const auto mesh = solve_meshed(net);
        o.require(rad.converged && mesh.converged, name + " feeder solve failed");
        for (std::size_t i = 0; i < net.size(); ++i) cross = std::max(cross, std::abs(rad.v_mag[i] - mesh.v_mag[i]));
        residual = std::max({residual, std::abs(power_balance_residual(net, rad)),
                             std::abs(power_balance_residual(net, mesh))});
        if (k == 0) ++feeders;
        ++solves;
      }
    }
  }
  o.require(cross <= 1e-7, "radial vs Newton " + fmt(cross));
  o.require(residual <= 1e-8, "power balance residual " + fmt(residual));
  o.note("2-bus error " + fmt(err2, 3) + "; radial vs Newton " + fmt(cross, 3) + " pu over " + std::to_string(feeders) +
         " feeders x 5 intervals; residual " + fmt(residual, 3) + " pu");
  return o;
}

Outcome conservation() {
  Outcome o;
  const DmsOptions opt;
  double worst = 0;
  int feeders = 0, total = 0;
  for (const auto& name : bundled_names()) {
    const auto sc = bundled(name);
    const auto& g = sc.grid;
    // Midday row: PV is available, so the reachable region is not a point.
    const int k = g.horizon / 2;
    const auto s = snapshot_at(g, k);
    const auto c = initial_controls(g);
    const auto sys = solve_meshed(g, s, c);
    std::mt19937_64 rng(1234 + static_cast<std::uint64_t>(feeders));
    for (std::size_t f = 0; f < g.feeders.size(); ++f) {
      const double vh = sys.v_mag[g.feeders[f].head_bus];
      const auto m = compute_vlsm(g, f, s, c, vh);
      int accepted = 0, drawn = 0;
      while (accepted < 100 && drawn < 10'000) {
        ++drawn;
        // A request is reachable when some in-limit device setting produces it
        // with every feeder voltage inside the controller's tightened band.
        const auto target = t::random_feeder_setting(g, f, s, c, rng);
        const auto ref = solve_radial(build_feeder_network(g, f, s, target, vh));
        if (!ref.converged) continue;
        bool inside = true;
        for (std::size_t i = 1; i < ref.v_mag.size(); ++i) {
          const auto& b = g.buses[ref.model_bus[i]];
          inside = inside && ref.v_mag[i] <= b.v_max - opt.margin && ref.v_mag[i] >= b.v_min + opt.margin;
        }
        if (!inside) continue;
        ++accepted;
        const auto head = feeder_head_import(ref);
        const OperatingPointRequest req{g.feeders[f].id, k, vh, head.p, head.q, 0.0, 0.0};
        const auto plan = disaggregate(g, f, s, c, m, req, opt);
        const auto applied = apply_plan(g, c, plan);
        const auto got = feeder_head_import(solve_radial(build_feeder_network(g, f, s, applied, vh)));
        const double err = std::max(std::abs(got.p - req.p_request), std::abs(got.q - req.q_request));
        worst = std::max(worst, err);
        o.require(err <= 1e-3, name + "/" + g.feeders[f].id + " request " + std::to_string(accepted) + " off by " +
                                   fmt(err));
      }
      o.require(accepted == 100, name + "/" + g.feeders[f].id + " found only " + std::to_string(accepted) +
                                     " reachable requests");
      total += accepted;
      ++feeders;
    }
  }
  o.note(std::to_string(total) + " requests over " + std::to_string(feeders) + " feeders, worst head error " +
         fmt(worst, 3) + " pu");
  return o;
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / ("crest-acceptance-" + std::to_string(::getpid()));
  int runs = 0;
  for (const auto& name : {"ieee33_high_pv", "td_two_feeder"}) {
    RunManifest man;
    man.scenario = t::scenario_dir(name);
    for (int rep = 0; rep < 2; ++rep) {
      const auto sc = prepare(man);
      write_artifacts(execute(sc), root / name / std::to_string(rep));
    }
    for (const auto& file : {"intervals.jsonl", "trace.jsonl"}) {
      const auto a = read_text(root / name / "0" / file), b = read_text(root / name / "1" / file);
      o.require(!a.empty() && a == b, std::string(name) + "/" + file + " differs between runs");
    }
    ++runs;
  }
  fs::remove_all(root);
  o.note(std::to_string(runs) + " scenarios run twice, intervals.jsonl and trace.jsonl byte-identical");
  return o;
}

Outcome sampler_statistics() {
  Outcome o;
  const LinkPath tiers[4] = {LinkPath::substation_lan, LinkPath::fan, LinkPath::nan, LinkPath::ami};
  double configured[4], sampled[4], worst = 0;
  for (int i = 0; i < 4; ++i) {
    const auto m = default_latency(tiers[i]);
    o.require(m.distribution == LatencyDistribution::lognormal, "default tier is not lognormal");
    configured[i] = m.mean_s;
    sampled[i] = t::empirical_mean(m, 100'000, 42 + static_cast<std::uint64_t>(i));
    const double rel = std::abs(sampled[i] - m.mean_s) / m.mean_s;
    worst = std::max(worst, rel);
    o.require(rel <= 0.02, std::string(to_string(tiers[i])) + " mean off by " + fmt(rel * 100, 3) + "%");
  }
  for (const double* v : {configured, sampled}) {
    o.require(v[0] < v[1] && v[1] < v[2] && v[2] <= v[3], "tier ordering substation_lan < fan < nan <= ami broken");
  }
  o.note("worst relative mean error " + fmt(worst * 100, 3) + "% over 1e5 samples per tier; sampled means " +
         fmt(sampled[0], 3) + " < " + fmt(sampled[1], 3) + " < " + fmt(sampled[2], 3) + " <= " + fmt(sampled[3], 3) +
         " s");
  return o;
}

Outcome group_decomposition() {
  Outcome o;
  const auto isl = bundled("islands");
  o.require(isl.config.groups.size() == 2, "islands scenario does not define two groups");
  const auto grouped = run_horizon(isl.grid, isl.config);
  const auto whole = run_grouped(isl.grid, isl.config, {});
  o.require(grouped.records == whole.records, "islands records differ");
  o.require(grouped.trace == whole.trace, "islands traces differ");
  o.require(grouped.final_controls == whole.final_controls, "islands final controls differ");
  const auto gap_isl = decomposition_gap(whole, grouped);
  o.require(gap_isl.gap == 0.0, "islands gap " + fmt(gap_isl.gap));

  const auto td = bundled("td_two_feeder");
  const auto out = execute(td);
  o.require(out.gap.has_value() && std::isfinite(out.gap->gap), "coupled gap not reported");
  if (out.gap)
    o.note("islands bit-identical (gap 0); coupled two-feeder gap " + fmt(out.gap->gap, 4) + " pu (whole " +
           fmt(out.gap->whole_losses, 6) + ", grouped " + fmt(out.gap->grouped_losses, 6) + ")");
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"timing budget reproduction", timing_budget},
      {"deadline degradation", deadline_degradation},
      {"violation elimination", violation_elimination},
      {"VLSM fidelity", vlsm_fidelity},
      {"DMS oracle equivalence", dms_oracle},
      {"EMS oracle equivalence", ems_oracle},
      {"power-flow correctness", powerflow_correctness},
      {"conservation", conservation},
      {"determinism", determinism},
      {"latency sampler statistics", sampler_statistics},
      {"group decomposition", group_decomposition},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.failures.push_back(std::string("exception: ") + e.what());
    }
    if (!o.pass) ++failed;
    std::string detail;
    for (const auto& n : o.notes) detail += (detail.empty() ? "" : "; ") + n;
    for (const auto& f : o.failures) detail += (detail.empty() ? "" : "; ") + f;
    std::printf("%s %2zu %-28s %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
  return failed == 0 ? 0 : 1;
}
