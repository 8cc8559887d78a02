#include <gtest/gtest.h>

#include "crest/coordinator.hpp"
#include "fixtures.hpp"

using namespace crest;
namespace t = crest::test;

namespace {

GridModel small_grid(int horizon) {
  auto g = t::chain_feeder(3, 0.01, 0.02, 1.0, horizon);
  t::add_der(g, 0, t::pv_der("pv", "F3", 0.1));
  t::size_series(g, horizon);
  for (int k = 0; k < horizon; ++k) {
    t::set_load(g, k, "F1", 0.05, 0.02);
    t::set_load(g, k, "F2", 0.05, 0.02);
    t::set_load(g, k, "F3", 0.04, 0.01);
    t::set_pv(g, k, "pv", 0.02 + 0.01 * k);
  }
  return g;
}

// Two feeders on separate slack heads: nothing couples them electrically.
GridModel islands(int horizon) {
  GridModel g;
  g.name = "islands";
  g.base_mva = 10;
  for (int i = 1; i <= 2; ++i) {
    const std::string s = std::to_string(i);
    const std::size_t head = g.buses.size();
    g.buses.push_back(t::sub_bus("H" + s, BusKind::slack, 1.0));
    FeederModel f;
    f.id = "F" + s;
    f.head_bus = head;
    std::string prev = "H" + s;
    for (int k = 1; k <= 2; ++k) {
      const std::string id = "B" + s + std::to_string(k);
      f.buses.push_back(g.buses.size());
      g.buses.push_back(t::feeder_bus(id));
      f.branches.push_back(g.branches.size());
      g.branches.push_back(t::line("L" + s + std::to_string(k), prev, id, 0.01 * i, 0.02));
      prev = id;
    }
    g.feeders.push_back(f);
  }
  g.reindex();
  t::add_der(g, 0, t::pv_der("pv1", "B12", 0.1));
  t::add_der(g, 1, t::pv_der("pv2", "B22", 0.1, 2.0, NetworkTier::fan));
  t::size_series(g, horizon);
  for (int k = 0; k < horizon; ++k) {
    t::set_load(g, k, "B11", 0.04, 0.01);
    t::set_load(g, k, "B12", 0.03, 0.01);
    t::set_load(g, k, "B21", 0.05, 0.02);
    t::set_load(g, k, "B22", 0.02, 0.01);
    t::set_pv(g, k, "pv1", 0.05);
    t::set_pv(g, k, "pv2", 0.03 + 0.01 * k);
  }
  return g;
}

// Budget leg times on constant links: 15 s down, 60 s up, 60 s each way to DERs.
SimConfig benign(int horizon) {
  SimConfig c;
  c.horizon = horizon;
  for (auto p : kAllPaths) {
    auto& m = c.link(p);
    m.distribution = LatencyDistribution::constant;
    m.sigma = 0;
    m.bandwidth_bps = kUnlimitedBandwidth;
    m.mean_s = 60;
  }
  c.link(LinkPath::ems_to_dms).mean_s = 15;
  return c;
}

std::vector<std::string> ids(std::initializer_list<const char*> v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(Coordinator, BenignIntervalTakes270Seconds) {
  const auto g = small_grid(4);
  const auto res = run_horizon(g, benign(4));
  ASSERT_EQ(res.records.size(), 4u);
  for (const auto& r : res.records) {
    EXPECT_TRUE(r.deadline_met);
    EXPECT_FALSE(r.carried_over);
    EXPECT_EQ(r.x_elapsed_s, 270.0);
    EXPECT_EQ(r.slack_s, 30.0);
    EXPECT_EQ(*r.ems_done - r.start, 45.0);
    EXPECT_EQ(*r.requests_delivered - r.start, 60.0);
    EXPECT_EQ(*r.dms_done - r.start, 90.0);
    EXPECT_EQ(*r.ders_acked - r.start, 210.0);
    EXPECT_EQ(*r.reports_delivered - r.start, 270.0);
  }
  EXPECT_EQ(res.summary.mean_x, 270.0);
  EXPECT_EQ(res.summary.deadline_misses, 0);
}

TEST(Coordinator, XMatchesTrace) {
  const auto g = small_grid(2);
  auto cfg = SimConfig{};
  cfg.horizon = 2;
  cfg.seed = 3;
  const auto res = run_horizon(g, cfg);
  for (const auto& r : res.records) {
    ASSERT_TRUE(r.deadline_met);
    double last_report = -1, ems_solve = -1;
    for (const auto& line : res.trace) {
      const auto j = nlohmann::json::parse(line);
      const double at = j["at"].get<double>();
      if (at < r.start || at > r.start + 300) continue;
      if (j["kind"] == "deliver" && j["payload_kind"] == "flexibility_report") last_report = std::max(last_report, at);
      if (j["kind"] == "solve_complete" && j["src"] == "ems") ems_solve = at;
    }
    EXPECT_EQ(ems_solve, *r.ems_done);
    EXPECT_EQ(r.x_elapsed_s, last_report - r.start);
    const double sum = (*r.ems_done - r.start) + (*r.requests_delivered - *r.ems_done) +
                       (*r.dms_done - *r.requests_delivered) + (*r.ders_acked - *r.dms_done) +
                       (*r.reports_delivered - *r.ders_acked);
    EXPECT_EQ(r.x_elapsed_s, sum);
    EXPECT_LE(*r.ems_done, *r.requests_delivered);
    EXPECT_LE(*r.requests_delivered, *r.dms_done);
    EXPECT_LE(*r.dms_done, *r.ders_acked);
    EXPECT_LE(*r.ders_acked, *r.reports_delivered);
  }
}

TEST(Coordinator, LongEmsSolveMissesDeadline) {
  const auto g = small_grid(2);
  auto cfg = benign(2);
  cfg.budget.ems_solve_s = 400;
  Coordinator co(g, cfg);
  const auto before = co.controls();
  const auto r = co.run_interval(0);
  EXPECT_FALSE(r.deadline_met);
  EXPECT_TRUE(r.carried_over);
  EXPECT_EQ(r.missed_phase, "ems_solve");
  EXPECT_EQ(r.x_elapsed_s, 300.0);
  EXPECT_FALSE(r.ems_done);
  EXPECT_EQ(co.controls(), before);
}

TEST(Coordinator, RetransmitDelaysAcks) {
  const auto g = small_grid(1);
  // Find a seed whose first dispatch is lost and whose retransmit and ack get through.
  for (std::uint64_t seed = 1; seed < 200; ++seed) {
    auto cfg = benign(1);
    cfg.seed = seed;
    cfg.link(LinkPath::nan).loss_prob = 0.5;
    Coordinator co(g, cfg);
    const auto r = co.run_interval(0);
    const auto& fr = co.network().frames();
    int lost_dispatch = 0, other_losses = 0;
    for (const auto& f : fr) {
      if (f.delivered_at) continue;
      (f.kind == PayloadKind::der_dispatch && f.attempt == 0 ? lost_dispatch : other_losses)++;
    }
    if (lost_dispatch != 1 || other_losses != 0) continue;
    // Timeout after 10 s, then the full 120 s round trip.
    EXPECT_EQ(*r.ders_acked - *r.dms_done, 130.0);
    EXPECT_EQ(r.retransmits, 1);
    EXPECT_EQ(r.x_elapsed_s, 280.0);
    EXPECT_TRUE(r.deadline_met);

    // A 40 s timeout pushes the same exchange past the deadline.
    cfg.loss_timeout_s = 40;
    Coordinator slow(g, cfg);
    const auto r2 = slow.run_interval(0);
    EXPECT_FALSE(r2.deadline_met);
    EXPECT_EQ(r2.missed_phase, "dms_to_ems");
    EXPECT_EQ(*r2.ders_acked - *r2.dms_done, 160.0);
    return;
  }
  FAIL() << "no seed produced a single dispatch loss";
}

TEST(Coordinator, AllLossEqualsBaseline) {
  const auto g = small_grid(3);
  auto cfg = benign(3);
  for (auto p : kAllPaths) cfg.link(p).loss_prob = 1.0;
  const auto lossy = run_horizon(g, cfg);
  const auto base = run_baseline(g, cfg);
  for (std::size_t k = 0; k < lossy.records.size(); ++k) {
    EXPECT_TRUE(lossy.records[k].carried_over);
    EXPECT_EQ(lossy.records[k].violations, base.records[k].violations);
    EXPECT_EQ(lossy.records[k].losses, base.records[k].losses);
  }
  EXPECT_EQ(lossy.final_controls, initial_controls(g));
}

TEST(Coordinator, LatencyScaleCrossesDeadline) {
  const auto g = small_grid(3);
  std::vector<double> prev_x(3, 0.0);
  for (double s : {1.0, 1.1, 1.15, 1.2, 1.5, 2.0}) {
    auto cfg = benign(3);
    cfg.latency_scale = s;
    const auto res = run_horizon(g, cfg);
    for (std::size_t k = 0; k < res.records.size(); ++k) {
      const auto& r = res.records[k];
      const bool overrun = 75 + 195 * s > 300;
      EXPECT_EQ(r.deadline_met, !overrun) << s;
      EXPECT_EQ(r.carried_over, overrun) << s;
      EXPECT_GE(r.x_elapsed_s, prev_x[k]) << s;
      prev_x[k] = r.x_elapsed_s;
    }
  }
}

TEST(Coordinator, MonotoneInLatencyParameters) {
  const auto g = islands(3);
  auto x_of = [&](auto&& tweak) {
    SimConfig cfg;
    cfg.horizon = 3;
    cfg.seed = 17;
    cfg.link(LinkPath::fan).loss_prob = 0.2;
    tweak(cfg);
    std::vector<double> x;
    for (const auto& r : run_horizon(g, cfg).records) x.push_back(r.x_elapsed_s);
    return x;
  };
  const auto base = x_of([](SimConfig&) {});
  const std::vector<std::function<void(SimConfig&)>> bumps = {
      [](SimConfig& c) { c.latency_scale = 1.3; },
      [](SimConfig& c) { c.link(LinkPath::nan).mean_s *= 2; },
      [](SimConfig& c) { c.link(LinkPath::fan).mean_s *= 3; },
      [](SimConfig& c) { c.link(LinkPath::dms_to_ems).mean_s += 20; },
      [](SimConfig& c) { c.link(LinkPath::ems_to_dms).mean_s += 100; },
  };
  for (const auto& bump : bumps) {
    const auto x = x_of(bump);
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_GE(x[k], base[k]);
  }
}

TEST(Coordinator, CarryOverKeepsSetpoints) {
  const auto g = islands(8);
  SimConfig cfg;
  cfg.horizon = 8;
  cfg.seed = 5;
  cfg.link(LinkPath::dms_to_ems).loss_prob = 0.6;
  Coordinator co(g, cfg);
  int misses = 0;
  for (int k = 0; k < cfg.horizon; ++k) {
    const auto before = co.controls();
    const auto r = co.run_interval(k);
    if (r.carried_over) {
      ++misses;
      EXPECT_EQ(co.controls(), before);
    }
  }
  EXPECT_GT(misses, 0);
}

TEST(Coordinator, Deterministic) {
  const auto g = islands(3);
  SimConfig cfg;
  cfg.horizon = 3;
  cfg.seed = 99;
  cfg.scada_poll_period_s = 2;
  cfg.link(LinkPath::fan).loss_prob = 0.3;
  const auto a = run_horizon(g, cfg), b = run_horizon(g, cfg);
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(a.final_controls, b.final_controls);
}

TEST(Coordinator, SummaryOfOneInterval) {
  const auto g = small_grid(1);
  const auto res = run_horizon(g, benign(1));
  ASSERT_EQ(res.records.size(), 1u);
  const auto& r = res.records[0];
  EXPECT_EQ(res.summary.intervals, 1);
  EXPECT_EQ(res.summary.total_losses, r.losses);
  EXPECT_EQ(res.summary.mean_x, r.x_elapsed_s);
  EXPECT_EQ(res.summary.max_x, r.x_elapsed_s);
  EXPECT_EQ(res.summary.violation_intervals, r.violations > 0 ? 1 : 0);
  EXPECT_EQ(res.summary.deadline_miss_rate, r.deadline_met ? 0.0 : 1.0);
}

TEST(Coordinator, BaselineKeepsInitialControls) {
  const auto g = small_grid(2);
  const auto res = run_baseline(g, benign(2));
  EXPECT_EQ(res.final_controls, initial_controls(g));
  for (const auto& r : res.records) {
    EXPECT_EQ(r.x_elapsed_s, 0.0);
    EXPECT_FALSE(r.carried_over);
  }
  EXPECT_TRUE(res.trace.empty());
}

TEST(Coordinator, ScadaPollsShareTheLink) {
  const auto g = small_grid(1);
  auto cfg = benign(1);
  cfg.scada_poll_period_s = 1;
  cfg.link(LinkPath::ems_to_dms).bandwidth_bps = 2000;
  cfg.link(LinkPath::dms_to_ems).bandwidth_bps = 2000;
  const auto res = run_horizon(g, cfg);
  const auto& r = res.records[0];
  EXPECT_TRUE(r.deadline_met);
  // Serialization behind polls and framing makes x strictly longer than 270 s.
  EXPECT_GT(r.x_elapsed_s, 270.0);
  int polls = 0;
  for (const auto& line : res.trace) polls += line.find("\"kind\":\"send\"") != std::string::npos &&
                                             line.find("scada_poll") != std::string::npos;
  EXPECT_EQ(polls, 300);
}

TEST(Coordinator, WallClockMode) {
  const auto g = small_grid(2);
  auto cfg = benign(2);
  cfg.timing_mode = TimingMode::wall_clock;
  const auto res = run_horizon(g, cfg);
  for (const auto& r : res.records) {
    EXPECT_TRUE(r.deadline_met);
    EXPECT_LT(*r.ems_done - r.start, 45.0);
    EXPECT_LT(r.x_elapsed_s, 270.0);
  }
}

TEST(Groups, SingleGroupMatchesWholeSystem) {
  const auto g = islands(3);
  SimConfig cfg;
  cfg.horizon = 3;
  cfg.seed = 4;
  const auto whole = run_horizon(g, cfg);
  const auto one = run_grouped(g, cfg, {{"all", ids({"F1", "F2"}), ids({"H1", "H2"})}});
  EXPECT_EQ(whole.records, one.records);
  EXPECT_EQ(whole.trace, one.trace);
}

TEST(Groups, DecoupledIslandsBitIdentical) {
  const auto g = islands(4);
  SimConfig cfg;
  cfg.horizon = 4;
  cfg.seed = 8;
  cfg.link(LinkPath::fan).loss_prob = 0.2;
  const auto whole = run_horizon(g, cfg);
  const auto split = run_grouped(g, cfg, {{"a", ids({"F1"}), ids({"H1"})}, {"b", ids({"F2"}), ids({"H2"})}});
  EXPECT_EQ(whole.records, split.records);
  EXPECT_EQ(whole.trace, split.trace);
  EXPECT_EQ(whole.final_controls, split.final_controls);
  EXPECT_EQ(decomposition_gap(whole, split).gap, 0.0);
}

TEST(Groups, PartitionErrors) {
  const auto g = islands(1);
  SimConfig cfg;
  EXPECT_THROW(run_grouped(g, cfg, {{"a", ids({"F1"}), {}}}), PartitionError);
  EXPECT_THROW(run_grouped(g, cfg, {{"a", ids({"F1", "F2"}), {}}, {"b", ids({"F2"}), {}}}), PartitionError);
  EXPECT_THROW(run_grouped(g, cfg, {{"a", ids({"F1", "FX"}), {}}}), PartitionError);
  EXPECT_THROW(run_grouped(g, cfg, {{"a", ids({"F1"}), ids({"H2"})}, {"b", ids({"F2"}), ids({"H2"})}}),
               PartitionError);
  EXPECT_THROW(run_grouped(g, cfg, {{"a", ids({"F1", "F2"}), ids({"B11"})}}), PartitionError);
}
