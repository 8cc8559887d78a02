// Command-line front end: run, sweep, report and vlsm subcommands.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "crest/runner.hpp"
#include "crest/vlsm.hpp"

namespace {

using namespace crest;

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

fs::path default_out(const RunManifest& man, const Scenario& sc) {
  const char* root = std::getenv("CREST_OUT_ROOT");
  return fs::path(root && *root ? root : "runs") /
         (man.scenario.filename().string() + "-seed" + std::to_string(sc.config.seed) + (man.baseline ? "-baseline" : ""));
}

void write_manifest(const RunManifest& man, const Scenario& sc, const fs::path& dir) {
  nlohmann::ordered_json j;
  j["scenario"] = fs::absolute(man.scenario).lexically_normal().string();
  j["seed"] = sc.config.seed;
  j["baseline"] = man.baseline;
  auto ov = nlohmann::ordered_json::array();
  for (const auto& [k, v] : man.overrides) ov.push_back(k + "=" + v);
  j["overrides"] = ov;
  j["out"] = dir.string();
  nlohmann::ordered_json hashes;
  for (const auto& n : {"scenario.json", "loads.csv", "pv.csv"})
    if (fs::exists(man.scenario / n)) hashes[std::string("scenario/") + n] = sha256_hex(read_text(man.scenario / n));
  for (const auto& n : artifact_names()) hashes[n] = sha256_hex(read_text(dir / n));
  j["artifacts"] = hashes;
  write_text(dir / "manifest.json", j.dump(2) + '\n');
}

RunManifest manifest_from(const std::string& scenario, const std::optional<std::uint64_t>& seed,
                          const std::vector<std::string>& sets, bool baseline) {
  RunManifest man;
  man.scenario = scenario;
  man.seed = seed;
  man.baseline = baseline;
  for (const auto& kv : sets) man.overrides.push_back(split_override(kv));
  return man;
}

int cmd_run(RunManifest man, const std::string& out) {
  const auto sc = prepare(man);
  man.out = out.empty() ? default_out(man, sc) : fs::path(out);
  const auto run = execute(sc);
  write_artifacts(run, man.out);
  write_manifest(man, sc, man.out);
  const auto& s = run.result.summary;
  std::cout << "wrote " << man.out.string() << ": " << s.intervals << " intervals, mean x "
            << format_double(s.mean_x) << " s, misses " << s.deadline_misses << ", violation intervals "
            << s.violation_intervals << ", losses " << format_double(s.total_losses) << " pu\n";
  if (run.gap) std::cout << "decomposition gap " << format_double(run.gap->gap) << " pu\n";
  return 0;
}

int cmd_sweep(RunManifest man, const std::string& axis, const std::vector<std::string>& values, const std::string& out) {
  static const std::vector<std::string> axes{"latency-scale", "interval_s", "der-count", "loss_prob", "groups"};
  if (std::find(axes.begin(), axes.end(), axis) == axes.end())
    throw ValidationError("unknown sweep axis '" + axis + "' (expected latency-scale, interval_s, der-count, loss_prob or groups)");
  const auto base = prepare(man);
  const fs::path dir = out.empty() ? default_out(man, base).concat("-sweep-" + axis) : fs::path(out);
  fs::create_directories(dir);
  std::string csv = "value,mean_x,deadline_miss_rate,total_losses,violation_intervals\n";
  for (const auto& v : values) {
    auto m = man;
    m.overrides.emplace_back(axis, v);
    const auto sc = prepare(m);
    const auto run = execute(sc);
    m.out = dir / (axis + "=" + v);
    write_artifacts(run, m.out);
    write_manifest(m, sc, m.out);
    const auto& s = run.result.summary;
    csv += v + "," + format_double(s.mean_x) + "," + format_double(s.deadline_miss_rate) + "," +
           format_double(s.total_losses) + "," + std::to_string(s.violation_intervals) + "\n";
  }
  write_text(dir / "sweep.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_vlsm(const RunManifest& man, const std::string& feeder, int interval) {
  const auto sc = prepare(man);
  const auto& g = sc.grid;
  const auto f = g.feeder_index(feeder);
  const auto state = snapshot_at(g, interval);
  const auto controls = initial_controls(g);
  const auto sol = solve_meshed(g, state, controls);
  if (!sol.converged) throw ConvergenceError("system power flow: " + sol.diagnostic);
  const auto m = compute_vlsm(g, f, state, controls, sol.v_mag[g.feeders[f].head_bus]);
  nlohmann::ordered_json j;
  j["feeder"] = feeder;
  j["interval"] = interval;
  j["head_voltage"] = m.head_voltage;
  auto names = nlohmann::ordered_json::array();
  for (auto b : m.buses) names.push_back(g.buses[b].id);
  j["buses"] = names;
  auto rows = [](const Eigen::MatrixXd& a) {
    auto out = nlohmann::ordered_json::array();
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      auto r = nlohmann::ordered_json::array();
      for (Eigen::Index k = 0; k < a.cols(); ++k) r.push_back(a(i, k));
      out.push_back(r);
    }
    return out;
  };
  j["s_p"] = rows(m.s_p);
  j["s_q"] = rows(m.s_q);
  std::cout << j.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coordinated EMS/DMS volt-var control simulator"};
  app.require_subcommand(1);

  std::string scenario, out, axis, dir, feeder;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets, values;
  bool baseline = false;
  int interval = 0;

  auto* run = app.add_subcommand("run", "Simulate a scenario and write artifacts");
  run->add_option("--scenario", scenario, "Scenario bundle directory")->required();
  run->add_option("--seed", seed, "Random seed (overrides the scenario)");
  run->add_option("--out", out, "Output directory (default $CREST_OUT_ROOT/<scenario>-seed<n>)");
  run->add_option("--set", sets, "key=value override, repeatable");
  run->add_flag("--baseline", baseline, "Hold initial setpoints (no control)");

  auto* sweep = app.add_subcommand("sweep", "Run once per value of one parameter");
  sweep->add_option("--scenario", scenario, "Scenario bundle directory")->required();
  sweep->add_option("--axis", axis, "latency-scale, interval_s, der-count, loss_prob or groups")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
  sweep->add_option("--seed", seed, "Random seed shared by every run");
  sweep->add_option("--out", out, "Output directory");
  sweep->add_option("--set", sets, "key=value override, repeatable");

  auto* report = app.add_subcommand("report", "Print the per-interval table of a run directory");
  report->add_option("dir", dir, "Run output directory")->required();

  auto* vlsm = app.add_subcommand("vlsm", "Print a feeder's voltage sensitivity matrix as JSON");
  vlsm->add_option("--scenario", scenario, "Scenario bundle directory")->required();
  vlsm->add_option("--feeder", feeder, "Feeder id")->required();
  vlsm->add_option("--interval", interval, "Interval index");
  vlsm->add_option("--set", sets, "key=value override, repeatable");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(manifest_from(scenario, seed, sets, baseline), out);
    if (*sweep) return cmd_sweep(manifest_from(scenario, seed, sets, false), axis, values, out);
    if (*report) {
      std::cout << render_report(dir);
      return 0;
    }
    if (*vlsm) return cmd_vlsm(manifest_from(scenario, std::nullopt, sets, false), feeder, interval);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
