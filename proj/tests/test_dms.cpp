#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "crest/dms.hpp"
#include "oracles.hpp"

using namespace crest;
namespace t = crest::test;

namespace {

// Head H, buses F1-F2, one PV at F2 and light loads.
GridModel one_pv_feeder(double avail = 0.1, double s = 0.3) {
  auto g = t::chain_feeder(2, 0.01, 0.03);
  t::add_der(g, 0, t::pv_der("pv", "F2", s, 1.0));
  t::size_series(g, 2);
  for (int k = 0; k < 2; ++k) {
    t::set_load(g, k, "F1", 0.05, 0.02);
    t::set_load(g, k, "F2", 0.04, 0.01);
    t::set_pv(g, k, "pv", avail);
  }
  return g;
}

struct Fixture {
  GridModel g;
  NetworkState s;
  ControlVector c;
  VlsMatrix m;
  Fixture(GridModel grid, double vh = 1.0) : g(std::move(grid)) {
    s = snapshot_at(g, 0);
    c = initial_controls(g);
    m = compute_vlsm(g, 0, s, c, vh);
  }
  OperatingPointRequest base_request() const {
    const auto h = m.base_head();
    return {g.feeders[0].id, 0, m.head_voltage, h.p, h.q, 0.0, 0.0};
  }
};

}  // namespace

TEST(Disaggregate, SingleDerTracksReactiveRequest) {
  Fixture fx(one_pv_feeder());
  auto req = fx.base_request();
  req.q_request -= 0.05;
  const auto plan = disaggregate(fx.g, 0, fx.s, fx.c, fx.m, req);
  EXPECT_TRUE(plan.feasible);
  EXPECT_NEAR(plan.achieved_q, req.q_request, 1e-3);
  EXPECT_NEAR(plan.achieved_p, req.p_request, 1e-3);
  const auto applied = apply_plan(fx.g, fx.c, plan);
  EXPECT_NEAR(effective_der_p(fx.g.ders[0], applied.der[0], fx.s.der_avail[0]), 0.1, 1e-3);
  // Head Q falls by roughly the DER's extra injection.
  EXPECT_NEAR(applied.der[0].q, 0.05, 2e-3);
}

TEST(Disaggregate, NullRequestIsFixedPoint) {
  auto g = one_pv_feeder(0.09);
  for (int k = 0; k < 2; ++k) {
    t::set_load(g, k, "F1", 0.0, 0.0);
    t::set_load(g, k, "F2", 0.09, 0.0);
  }
  Fixture fx(g);
  const auto plan = disaggregate(fx.g, 0, fx.s, fx.c, fx.m, fx.base_request());
  EXPECT_TRUE(plan.feasible);
  const auto applied = apply_plan(fx.g, fx.c, plan);
  EXPECT_NEAR(effective_der_p(fx.g.ders[0], applied.der[0], 0.09), 0.09, 1e-4);
  EXPECT_NEAR(applied.der[0].q, 0.0, 1e-4);
  EXPECT_NEAR(plan.objective_value, 0.0, 1e-4);
}

TEST(Disaggregate, StaleSensitivityIsRejected) {
  Fixture fx(one_pv_feeder());
  auto s2 = fx.s;
  s2.load_p[fx.g.bus_index("F1")] += 0.01;
  EXPECT_THROW(disaggregate(fx.g, 0, s2, fx.c, fx.m, fx.base_request()), StaleSensitivityError);
  auto req = fx.base_request();
  req.substation_voltage_setpoint = 1.01;
  EXPECT_THROW(disaggregate(fx.g, 0, fx.s, fx.c, fx.m, req), StaleSensitivityError);
}

TEST(Disaggregate, TightBoundMarkedInfeasibleWhenUnreachable) {
  auto g = one_pv_feeder();
  g.buses[g.bus_index("F2")].v_max = 0.95 + 1e-3;
  g.buses[g.bus_index("F2")].v_min = 0.95;
  Fixture fx(g);
  const auto plan = disaggregate(fx.g, 0, fx.s, fx.c, fx.m, fx.base_request());
  EXPECT_FALSE(plan.feasible);
  EXPECT_NO_THROW(apply_plan(fx.g, fx.c, plan));
}

TEST(Disaggregate, DiscreteMatchesBruteForce) {
  Fixture fx(t::dms_oracle_feeder());
  DmsOptions opt;
  opt.q_levels = 5;
  auto req = fx.base_request();
  req.q_request -= 0.07;

  const auto t0 = std::chrono::steady_clock::now();
  const auto plan = disaggregate(fx.g, 0, fx.s, fx.c, fx.m, req, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto oracle = t::dms_brute_force(fx.g, fx.s, fx.c, fx.m, req, opt);
  EXPECT_EQ(oracle.evaluations, 50);
  EXPECT_NEAR(plan.objective_value, oracle.best, 1e-6);
  EXPECT_LT(secs, 1.0);
}

TEST(Disaggregate, ContinuousNoWorseThanDiscrete) {
  Fixture fx(t::dms_oracle_feeder());
  auto req = fx.base_request();
  req.q_request -= 0.07;
  DmsOptions discrete;
  discrete.q_levels = 5;
  const auto d = disaggregate(fx.g, 0, fx.s, fx.c, fx.m, req, discrete);
  const auto c = disaggregate(fx.g, 0, fx.s, fx.c, fx.m, req);
  EXPECT_LE(c.objective_value, d.objective_value + 1e-6);
  EXPECT_TRUE(c.feasible);
  EXPECT_NEAR(c.achieved_q, req.q_request, 1e-3);
}

TEST(Disaggregate, RandomReachableRequestsAreTracked) {
  Fixture fx(t::dms_oracle_feeder());
  const auto rep = compute_flexibility(fx.g, 0, fx.s, fx.c, fx.m);
  std::mt19937_64 rng(3);
  for (int k = 0; k < 25; ++k) {
    auto req = fx.base_request();
    std::uniform_real_distribution<double> up(rep.p_min, rep.p_max), uq(rep.q_min, rep.q_max);
    // Shrink toward the forecast so the request stays inside the joint region.
    req.p_request = rep.p_forecast + 0.5 * (up(rng) - rep.p_forecast);
    req.q_request = rep.q_forecast + 0.5 * (uq(rng) - rep.q_forecast);
    const auto plan = disaggregate(fx.g, 0, fx.s, fx.c, fx.m, req);
    EXPECT_NEAR(plan.achieved_p, req.p_request, 1e-3) << k;
    EXPECT_NEAR(plan.achieved_q, req.q_request, 1e-3) << k;
  }
}

TEST(ApplyPlan, NullPlanLeavesStateUnchanged) {
  Fixture fx(one_pv_feeder());
  const auto plan = null_plan(fx.g, 0, fx.c);
  EXPECT_EQ(apply_plan(fx.g, fx.c, plan), fx.c);
}

TEST(ApplyPlan, IsIdempotent) {
  Fixture fx(one_pv_feeder());
  auto req = fx.base_request();
  req.q_request -= 0.02;
  const auto plan = disaggregate(fx.g, 0, fx.s, fx.c, fx.m, req);
  const auto once = apply_plan(fx.g, fx.c, plan);
  EXPECT_EQ(apply_plan(fx.g, once, plan), once);
  const auto sol = solve_radial(fx.g, 0, fx.s, once, 1.0);
  EXPECT_NEAR(feeder_head_import(sol).q, req.q_request, 1e-3);
}

TEST(ApplyPlan, RejectsCapabilityViolation) {
  Fixture fx(one_pv_feeder());
  auto plan = null_plan(fx.g, 0, fx.c);
  plan.setpoints[0] = {0.25, 0.25};
  try {
    apply_plan(fx.g, fx.c, plan);
    FAIL();
  } catch (const CapabilityError& e) {
    EXPECT_NE(std::string(e.what()).find("'pv'"), std::string::npos);
  }
}

TEST(Flexibility, NoDersMeansNoRange) {
  auto g = t::chain_feeder(3, 0.01, 0.02);
  t::set_load(g, 0, "F2", 0.1, 0.04);
  Fixture fx(g);
  const auto r = compute_flexibility(fx.g, 0, fx.s, fx.c, fx.m);
  EXPECT_EQ(r.p_min, r.p_forecast);
  EXPECT_EQ(r.p_max, r.p_forecast);
  EXPECT_EQ(r.q_min, r.q_forecast);
  EXPECT_EQ(r.q_max, r.q_forecast);
  const auto sol = solve_radial(fx.g, 0, fx.s, fx.c, 1.0);
  EXPECT_NEAR(r.p_forecast, feeder_head_import(sol).p, 1e-15);
}

TEST(Flexibility, CurtailableRange) {
  Fixture fx(one_pv_feeder(0.1));
  const auto r = compute_flexibility(fx.g, 0, fx.s, fx.c, fx.m);
  EXPECT_GE(r.p_max - r.p_min, 0.1);
  EXPECT_LE(r.p_min, r.p_forecast);
  EXPECT_GE(r.p_max, r.p_forecast);
  EXPECT_LT(r.q_min, r.q_max);
  EXPECT_NEAR(r.curtailment_headroom, 0.1, 1e-12);
}

TEST(Flexibility, TightVmaxRaisesPmin) {
  // Start curtailed to zero so the full-output extreme is the binding one.
  auto loose = one_pv_feeder(0.25);
  for (auto& d : loose.ders) d.p_set = 0.0;
  for (int k = 0; k < 2; ++k) {
    t::set_load(loose, k, "F1", 0.0, 0.0);
    t::set_load(loose, k, "F2", 0.0, 0.0);
  }
  Fixture a(loose);
  const auto free_rep = compute_flexibility(a.g, 0, a.s, a.c, a.m);

  auto tight = loose;
  tight.buses[tight.bus_index("F2")].v_max = 1.004;
  tight.buses[tight.bus_index("F1")].v_max = 1.004;
  Fixture b(tight);
  const auto rep = compute_flexibility(b.g, 0, b.s, b.c, b.m);
  EXPECT_GT(rep.p_min, free_rep.p_min + 1e-3);

  // Oracle: find the PV output giving rep.p_min and check it with a full solve.
  double lo = 0.0, hi = 0.25;
  auto c = b.c;
  for (int i = 0; i < 60; ++i) {
    c.der[0].p = (lo + hi) / 2;
    const auto hp = feeder_head_import(solve_radial(b.g, 0, b.s, c, 1.0)).p;
    (hp > rep.p_min ? lo : hi) = c.der[0].p;
  }
  c.der[0].p = lo;
  const auto sol = solve_radial(b.g, 0, b.s, c, 1.0);
  EXPECT_TRUE(total_violations(sol, b.g).empty());
}

TEST(Payloads, JsonRoundTrip) {
  OperatingPointRequest r{"F", 4, 1.01, 0.3, -0.1, 0.02, 0.01};
  EXPECT_EQ(request_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  FlexibilityReport f;
  f.feeder_id = "F";
  f.interval = 5;
  f.p_min = -0.2;
  f.p_max = 0.4;
  f.q_min = -0.1;
  f.q_max = 0.1;
  f.p_forecast = 0.1;
  f.curtailment_headroom = 0.3;
  EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(f).dump())), f);
  EXPECT_THROW(request_from_json(nlohmann::json::parse("{}")), ParseError);
}
