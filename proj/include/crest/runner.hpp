#pragma once

// Run manifests, overrides and artifact files shared by the CLI and the
// acceptance harness.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "crest/coordinator.hpp"
#include "crest/format.hpp"
#include "crest/scenario.hpp"

namespace crest {

namespace fs = std::filesystem;

struct RunManifest {
  fs::path scenario;
  std::optional<std::uint64_t> seed;
  std::vector<std::pair<std::string, std::string>> overrides;  // applied in order
  fs::path out;
  bool baseline = false;
};

inline const std::vector<std::string>& artifact_names() {
  static const std::vector<std::string> names{"intervals.jsonl", "summary.json", "trace.jsonl", "metrics.csv"};
  return names;
}

// Keeps the first n DERs in model order and drops the rest with their series.
inline void limit_ders(GridModel& g, std::size_t n) {
  if (n >= g.ders.size()) return;
  const std::size_t old = g.ders.size();
  std::vector<double> pv(static_cast<std::size_t>(g.horizon) * n);
  for (int t = 0; t < g.horizon; ++t)
    for (std::size_t d = 0; d < n; ++d) pv[static_cast<std::size_t>(t) * n + d] = g.pv_avail[static_cast<std::size_t>(t) * old + d];
  g.pv_avail = std::move(pv);
  g.ders.resize(n);
  for (auto& f : g.feeders) std::erase_if(f.ders, [&](std::size_t d) { return d >= n; });
}

inline std::vector<GroupSpec> per_feeder_groups(const GridModel& g) {
  std::vector<GroupSpec> out;
  for (const auto& f : g.feeders) out.push_back({f.id, {f.id}, {g.buses[f.head_bus].id}});
  return out;
}

namespace runner_detail {

inline double number(const std::string& key, const std::string& v) {
  if (v == "inf" || v == "null") return kUnlimitedBandwidth;
  const auto d = parse_double(v);
  if (!d) throw ValidationError("override '" + key + "': '" + v + "' is not a number");
  return *d;
}

inline bool boolean(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ValidationError("override '" + key + "': '" + v + "' is not a boolean");
}

}  // namespace runner_detail

// Applies one key=value override. Keys mirror the scenario's "sim" block;
// link fields are addressed as links.<path>.<field>.
inline void apply_override(Scenario& sc, const std::string& key, const std::string& value) {
  using runner_detail::boolean;
  using runner_detail::number;
  auto& c = sc.config;
  auto num = [&] { return number(key, value); };
  if (key == "seed") {
    const auto v = parse_int(value);
    if (!v || *v < 0) throw ValidationError("override 'seed': expected a non-negative integer");
    c.seed = static_cast<std::uint64_t>(*v);
  } else if (key == "horizon") {
    const auto v = parse_int(value);
    if (!v || *v < 1 || *v > sc.grid.horizon)
      throw ValidationError("override 'horizon': expected 1.." + std::to_string(sc.grid.horizon));
    c.horizon = static_cast<int>(*v);
  } else if (key == "latency-scale" || key == "latency_scale") {
    c.latency_scale = num();
  } else if (key == "interval_s") {
    c.budget.interval_s = num();
  } else if (key == "budget.ems_solve_s") {
    c.budget.ems_solve_s = num();
  } else if (key == "budget.ems_to_dms_s") {
    c.budget.ems_to_dms_s = num();
  } else if (key == "budget.dms_solve_s") {
    c.budget.dms_solve_s = num();
  } else if (key == "budget.dms_der_roundtrip_s") {
    c.budget.dms_der_roundtrip_s = num();
  } else if (key == "budget.dms_to_ems_s") {
    c.budget.dms_to_ems_s = num();
  } else if (key == "loss_prob") {
    for (auto p : kAllPaths) c.link(p).loss_prob = num();
  } else if (key == "loss_timeout_s") {
    c.loss_timeout_s = num();
  } else if (key == "scada_poll_period_s") {
    c.scada_poll_period_s = num();
  } else if (key == "ems_voltage_margin") {
    c.ems_voltage_margin = num();
  } else if (key == "dms_voltage_margin") {
    c.dms_voltage_margin = num();
  } else if (key == "control") {
    c.control_enabled = boolean(key, value);
  } else if (key == "timing_mode") {
    if (value == "simulated") c.timing_mode = TimingMode::simulated;
    else if (value == "wall_clock") c.timing_mode = TimingMode::wall_clock;
    else throw ValidationError("override 'timing_mode': expected simulated or wall_clock");
  } else if (key == "der-count" || key == "der_count") {
    const auto v = parse_int(value);
    if (!v || *v < 0) throw ValidationError("override 'der-count': expected a non-negative integer");
    limit_ders(sc.grid, static_cast<std::size_t>(*v));
  } else if (key == "groups") {
    if (value == "whole") c.groups.clear();
    else if (value == "per-feeder") c.groups = per_feeder_groups(sc.grid);
    else if (value != "scenario") throw ValidationError("override 'groups': expected whole, per-feeder or scenario");
  } else if (key.starts_with("links.")) {
    const auto dot = key.find('.', 6);
    if (dot == std::string::npos) throw ValidationError("override '" + key + "': expected links.<path>.<field>");
    LinkPath p{};
    try {
      p = parse_link_path(key.substr(6, dot - 6));
    } catch (const ParseError& e) {
      throw ValidationError("override '" + key + "': " + e.what());
    }
    auto& m = c.link(p);
    const auto field = key.substr(dot + 1);
    if (field == "mean_s") m.mean_s = num();
    else if (field == "sigma") m.sigma = num();
    else if (field == "bandwidth_bps") m.bandwidth_bps = num();
    else if (field == "loss_prob") m.loss_prob = num();
    else if (field == "distribution") m.distribution = parse_distribution(value);
    else throw ValidationError("override '" + key + "': unknown link field '" + field + "'");
  } else {
    throw ValidationError("unknown override key '" + key + "'");
  }
}

inline std::pair<std::string, std::string> split_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + kv + "' is not key=value");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

inline Scenario prepare(const RunManifest& man) {
  Scenario sc = load_scenario(man.scenario);
  if (man.seed) sc.config.seed = *man.seed;
  for (const auto& [k, v] : man.overrides) apply_override(sc, k, v);
  if (man.baseline) sc.config.control_enabled = false;
  validate(sc.grid);
  validate(sc.config);
  return sc;
}

inline std::string metrics_csv(const std::vector<IntervalRecord>& recs) {
  std::ostringstream os;
  os << "interval,x_elapsed_s,slack_s,deadline_met,carried_over,losses,violations,worst_deviation\n";
  for (const auto& r : recs)
    os << r.interval << ',' << format_double(r.x_elapsed_s) << ',' << format_double(r.slack_s) << ','
       << (r.deadline_met ? 1 : 0) << ',' << (r.carried_over ? 1 : 0) << ',' << format_double(r.losses) << ','
       << r.violations << ',' << format_double(r.worst_deviation) << '\n';
  return os.str();
}

struct RunOutput {
  RunResult result;
  std::optional<DecompositionGap> gap;
};

// Runs a manifest. Grouped configurations are also run as one group so the
// decomposition gap can be reported next to the metrics.
inline RunOutput execute(const Scenario& sc) {
  RunOutput out;
  out.result = run_horizon(sc.grid, sc.config);
  if (!sc.config.groups.empty() && sc.config.control_enabled) {
    const auto whole = run_grouped(sc.grid, sc.config, {});
    out.gap = decomposition_gap(whole, out.result);
  }
  return out;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  os << text;
  if (!os) throw Error("failed writing '" + p.string() + "'");
}

inline void write_artifacts(const RunOutput& run, const fs::path& dir) {
  fs::create_directories(dir);
  std::string intervals;
  for (const auto& r : run.result.records) intervals += to_json(r).dump() + '\n';
  write_text(dir / "intervals.jsonl", intervals);
  auto summary = to_json(run.result.summary);
  if (run.gap) {
    summary["decomposition_gap"] = {{"whole_losses", run.gap->whole_losses},
                                    {"grouped_losses", run.gap->grouped_losses},
                                    {"gap", run.gap->gap}};
  }
  write_text(dir / "summary.json", summary.dump(2) + '\n');
  std::string trace;
  for (const auto& line : run.result.trace) trace += line + '\n';
  write_text(dir / "trace.jsonl", trace);
  write_text(dir / "metrics.csv", metrics_csv(run.result.records));
}

inline std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::vector<IntervalRecord> read_intervals(const fs::path& p) {
  std::vector<IntervalRecord> out;
  std::istringstream is(read_text(p));
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(p.filename().string() + " line " + std::to_string(n) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(p.filename().string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// Per-interval table and totals for a run directory.
inline std::string render_report(const fs::path& dir) {
  std::vector<std::string> missing;
  for (const auto& n : artifact_names())
    if (!fs::exists(dir / n)) missing.push_back(n);
  if (!missing.empty()) {
    std::string msg = "missing artifacts in '" + dir.string() + "':";
    for (const auto& n : missing) msg += " " + n;
    throw Error(msg);
  }
  const auto recs = read_intervals(dir / "intervals.jsonl");
  const auto summary = nlohmann::json::parse(read_text(dir / "summary.json"));
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%8s %10s %10s %6s %10s %14s  %s\n", "interval", "x_s", "slack_s", "miss",
                "violations", "losses_pu", "flags");
  os << line;
  for (const auto& r : recs) {
    std::string flags = r.carried_over ? "CARRIED_OVER" : "";
    if (!r.missed_phase.empty()) flags += " (" + r.missed_phase + ")";
    std::snprintf(line, sizeof line, "%8d %10.3f %10.3f %6s %10d %14.8f  %s\n", r.interval, r.x_elapsed_s, r.slack_s,
                  r.deadline_met ? "-" : "MISS", r.violations, r.losses, flags.c_str());
    os << line;
  }
  const auto s = summarize(recs);
  os << "\nintervals            " << s.intervals << '\n'
     << "mean x (s)           " << format_double(s.mean_x) << '\n'
     << "max x (s)            " << format_double(s.max_x) << '\n'
     << "deadline misses      " << s.deadline_misses << " (rate " << format_double(s.deadline_miss_rate) << ")\n"
     << "carried over         " << s.carried_over << '\n'
     << "violation intervals  " << s.violation_intervals << '\n'
     << "total losses (pu)    " << format_double(s.total_losses) << '\n'
     << "retransmits          " << s.retransmits << '\n';
  if (summary.contains("decomposition_gap"))
    os << "decomposition gap    " << format_double(summary["decomposition_gap"]["gap"].get<double>()) << " pu\n";
  return os.str();
}

}  // namespace crest
