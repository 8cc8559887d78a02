#pragma once

// Scenario bundle I/O.
//
// A bundle is a directory holding
//   scenario.json  topology, devices and simulation settings
//   loads.csv      interval,bus,p_pu,q_pu
//   pv.csv         interval,der,p_avail_pu
// The field reference lives in docs/scenario-format.md.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crest/config.hpp"
#include "crest/error.hpp"
#include "crest/format.hpp"
#include "crest/model.hpp"

namespace crest {

struct Scenario {
  GridModel grid;
  SimConfig config;
  bool operator==(const Scenario&) const = default;
};

namespace scenario_detail {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

class Reader {
 public:
  explicit Reader(std::string file) : file_(std::move(file)) {}

  [[noreturn]] void fail(const std::string& path, const std::string& what) const {
    throw ParseError(file_ + ": " + path + ": " + what);
  }

  const json& member(const json& obj, const std::string& key, const std::string& path) const {
    if (!obj.is_object()) fail(path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(path + "." + key, "missing field");
    return *it;
  }

  double number(const json& obj, const std::string& key, const std::string& path) const {
    const auto& v = member(obj, key, path);
    if (!v.is_number()) fail(path + "." + key, "expected a number");
    return v.get<double>();
  }
  double number_or(const json& obj, const std::string& key, const std::string& path, double def) const {
    if (!obj.contains(key) || obj.at(key).is_null()) return def;
    return number(obj, key, path);
  }
  int integer(const json& obj, const std::string& key, const std::string& path) const {
    const auto& v = member(obj, key, path);
    if (!v.is_number_integer()) fail(path + "." + key, "expected an integer");
    return v.get<int>();
  }
  int integer_or(const json& obj, const std::string& key, const std::string& path, int def) const {
    if (!obj.contains(key)) return def;
    return integer(obj, key, path);
  }
  std::string text(const json& obj, const std::string& key, const std::string& path) const {
    const auto& v = member(obj, key, path);
    if (!v.is_string()) fail(path + "." + key, "expected a string");
    return v.get<std::string>();
  }
  std::string text_or(const json& obj, const std::string& key, const std::string& path, std::string def) const {
    if (!obj.contains(key)) return def;
    return text(obj, key, path);
  }
  bool boolean_or(const json& obj, const std::string& key, const std::string& path, bool def) const {
    if (!obj.contains(key)) return def;
    const auto& v = obj.at(key);
    if (!v.is_boolean()) fail(path + "." + key, "expected true/false");
    return v.get<bool>();
  }
  const json& array(const json& obj, const std::string& key, const std::string& path, bool required = true) const {
    static const json empty = json::array();
    if (!required && !obj.contains(key)) return empty;
    const auto& v = member(obj, key, path);
    if (!v.is_array()) fail(path + "." + key, "expected an array");
    return v;
  }
  template <typename F>
  auto enumerated(const json& obj, const std::string& key, const std::string& path, F parse) const {
    auto s = text(obj, key, path);
    try {
      return parse(s);
    } catch (const ParseError& e) {
      fail(path + "." + key, e.what());
    }
  }

 private:
  std::string file_;
};

inline int tap_position_of(const Reader& rd, double ratio, const std::string& path) {
  const double steps = (ratio - kTapFloor) / kTapStep;
  const double rounded = std::round(steps);
  if (std::abs(steps - rounded) > 1e-6 || rounded < 0 || rounded > kTapMaxPosition)
    rd.fail(path, "tap ratio " + format_double(ratio) + " is not a 0.00625 step within [0.9, 1.1]");
  return static_cast<int>(rounded);
}

inline Bus read_bus(const Reader& rd, const json& j, const std::string& path, BusLevel level) {
  Bus b;
  b.id = rd.text(j, "id", path);
  b.kind = j.contains("kind") ? rd.enumerated(j, "kind", path, parse_bus_kind) : BusKind::pq;
  b.base_kv = rd.number(j, "base_kv", path);
  b.v_min = rd.number_or(j, "v_min", path, 0.95);
  b.v_max = rd.number_or(j, "v_max", path, 1.05);
  b.v_set = rd.number_or(j, "v_set", path, 1.0);
  b.level = level;
  return b;
}

inline Branch read_branch(const Reader& rd, const json& j, const std::string& path) {
  Branch b;
  b.id = rd.text(j, "id", path);
  b.from_bus = rd.text(j, "from", path);
  b.to_bus = rd.text(j, "to", path);
  b.r = rd.number(j, "r", path);
  b.x = rd.number(j, "x", path);
  b.b_shunt = rd.number_or(j, "b_shunt", path, 0.0);
  b.rating = rd.number(j, "rating", path);
  if (j.contains("tap")) {
    const auto& t = j.at("tap");
    const std::string tp = path + ".tap";
    TapChanger tc;
    tc.position = tap_position_of(rd, rd.number(t, "ratio", tp), tp + ".ratio");
    tc.min_position = tap_position_of(rd, rd.number_or(t, "min", tp, kTapFloor), tp + ".min");
    tc.max_position = tap_position_of(rd, rd.number_or(t, "max", tp, tap_ratio(kTapMaxPosition)), tp + ".max");
    b.tap = tc;
  }
  return b;
}

inline ShuntCapacitor read_capacitor(const Reader& rd, const json& j, const std::string& path) {
  ShuntCapacitor c;
  c.id = rd.text(j, "id", path);
  c.bus = rd.text(j, "bus", path);
  c.q_step = rd.number(j, "q_step", path);
  c.n_steps = rd.integer_or(j, "n_steps", path, 1);
  c.state = rd.integer_or(j, "state", path, 0);
  return c;
}

inline Der read_der(const Reader& rd, const json& j, const std::string& path) {
  Der d;
  d.id = rd.text(j, "id", path);
  d.bus = rd.text(j, "bus", path);
  d.kind = rd.enumerated(j, "kind", path, parse_der_kind);
  d.s_rating = rd.number(j, "s_rating", path);
  d.p_avail = rd.number_or(j, "p_avail", path, d.kind == DerKind::pv_inverter ? d.s_rating : 0.0);
  // An uncurtailed inverter's ceiling is its rating.
  d.p_set = rd.number_or(j, "p_set", path, d.kind == DerKind::pv_inverter ? d.s_rating : 0.0);
  d.q_set = rd.number_or(j, "q_set", path, 0.0);
  d.dr_cost = rd.number_or(j, "dr_cost", path, 0.0);
  d.network_tier = rd.enumerated(j, "tier", path, parse_tier);
  return d;
}

inline LatencyModel read_latency(const Reader& rd, const json& j, const std::string& path, LatencyModel m) {
  if (j.contains("distribution")) m.distribution = rd.enumerated(j, "distribution", path, parse_distribution);
  m.mean_s = rd.number_or(j, "mean_s", path, m.mean_s);
  m.sigma = rd.number_or(j, "sigma", path, m.sigma);
  if (j.contains("bandwidth_bps"))
    m.bandwidth_bps = j.at("bandwidth_bps").is_null() ? kUnlimitedBandwidth : rd.number(j, "bandwidth_bps", path);
  m.loss_prob = rd.number_or(j, "loss_prob", path, m.loss_prob);
  return m;
}

inline SimConfig read_config(const Reader& rd, const json& j, const std::string& path) {
  SimConfig c;
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    const std::string bp = path + ".budget";
    c.budget.ems_solve_s = rd.number_or(b, "ems_solve_s", bp, c.budget.ems_solve_s);
    c.budget.ems_to_dms_s = rd.number_or(b, "ems_to_dms_s", bp, c.budget.ems_to_dms_s);
    c.budget.dms_solve_s = rd.number_or(b, "dms_solve_s", bp, c.budget.dms_solve_s);
    c.budget.dms_der_roundtrip_s = rd.number_or(b, "dms_der_roundtrip_s", bp, c.budget.dms_der_roundtrip_s);
    c.budget.dms_to_ems_s = rd.number_or(b, "dms_to_ems_s", bp, c.budget.dms_to_ems_s);
  }
  c.budget.interval_s = rd.number_or(j, "interval_s", path, 300.0);
  c.horizon = rd.integer(j, "horizon", path);
  if (j.contains("seed")) {
    const auto& s = j.at("seed");
    if (!s.is_number_unsigned()) rd.fail(path + ".seed", "expected a non-negative integer");
    c.seed = s.get<std::uint64_t>();
  }
  c.latency_scale = rd.number_or(j, "latency_scale", path, 1.0);
  for (auto p : kAllPaths) c.link(p) = default_latency(p, c.budget);
  if (j.contains("links")) {
    const auto& links = j.at("links");
    if (!links.is_object()) rd.fail(path + ".links", "expected an object");
    for (auto it = links.begin(); it != links.end(); ++it) {
      LinkPath p{};
      try {
        p = parse_link_path(it.key());
      } catch (const ParseError& e) {
        rd.fail(path + ".links", e.what());
      }
      c.link(p) = read_latency(rd, it.value(), path + ".links." + it.key(), c.link(p));
    }
  }
  c.loss_timeout_s = rd.number_or(j, "loss_timeout_s", path, 10.0);
  if (j.contains("payload_bytes")) {
    const auto& pb = j.at("payload_bytes");
    const std::string pp = path + ".payload_bytes";
    c.payload_bytes.op_request = rd.integer_or(pb, "op_request", pp, c.payload_bytes.op_request);
    c.payload_bytes.flexibility_report = rd.integer_or(pb, "flexibility_report", pp, c.payload_bytes.flexibility_report);
    c.payload_bytes.der_dispatch = rd.integer_or(pb, "der_dispatch", pp, c.payload_bytes.der_dispatch);
    c.payload_bytes.der_ack = rd.integer_or(pb, "der_ack", pp, c.payload_bytes.der_ack);
    c.payload_bytes.scada_poll = rd.integer_or(pb, "scada_poll", pp, c.payload_bytes.scada_poll);
    c.payload_bytes.scada_reply = rd.integer_or(pb, "scada_reply", pp, c.payload_bytes.scada_reply);
  }
  if (j.contains("framing")) {
    const auto& f = j.at("framing");
    c.framing.fragment_payload = rd.integer_or(f, "fragment_payload", path + ".framing", 250);
    c.framing.fragment_overhead = rd.integer_or(f, "fragment_overhead", path + ".framing", 42);
  }
  c.scada_poll_period_s = rd.number_or(j, "scada_poll_period_s", path, 0.0);
  const auto mode = rd.text_or(j, "timing_mode", path, "simulated");
  if (mode == "simulated") c.timing_mode = TimingMode::simulated;
  else if (mode == "wall_clock") c.timing_mode = TimingMode::wall_clock;
  else rd.fail(path + ".timing_mode", "expected 'simulated' or 'wall_clock'");
  c.control_enabled = rd.boolean_or(j, "control", path, true);
  c.ami_realism = rd.boolean_or(j, "ami_realism", path, false);
  c.ems_voltage_margin = rd.number_or(j, "ems_voltage_margin", path, c.ems_voltage_margin);
  c.dms_voltage_margin = rd.number_or(j, "dms_voltage_margin", path, c.dms_voltage_margin);
  const auto& groups = rd.array(j, "groups", path, false);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const std::string gp = path + ".groups[" + std::to_string(i) + "]";
    GroupSpec g;
    g.id = rd.text(groups[i], "id", gp);
    for (const auto& f : rd.array(groups[i], "feeders", gp)) g.feeders.push_back(f.get<std::string>());
    for (const auto& b : rd.array(groups[i], "buses", gp, false)) g.buses.push_back(b.get<std::string>());
    c.groups.push_back(std::move(g));
  }
  return c;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
  }
  return out;
}

// Reads rows of (interval, entity, values...) into a dense [interval][entity]
// table. Returns which entities had rows.
struct SeriesTable {
  std::vector<std::vector<double>> columns;  // one dense column per value field
  std::vector<bool> present;
};

inline SeriesTable read_series(const std::filesystem::path& file, const std::vector<std::string>& header,
                               const std::map<std::string, std::size_t>& entities, int horizon,
                               const char* entity_kind) {
  std::ifstream in(file);
  if (!in) throw MissingSeriesError(file.filename().string() + ": file not found in bundle");
  const std::string fname = file.filename().string();
  const std::size_t n = entities.size();
  const std::size_t nvals = header.size() - 2;
  SeriesTable tab;
  tab.columns.assign(nvals, std::vector<double>(static_cast<std::size_t>(horizon) * n, 0.0));
  tab.present.assign(n, false);
  std::vector<std::vector<char>> seen(n);
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line);
    const std::string where = fname + " line " + std::to_string(lineno);
    if (!header_seen) {
      if (fields != header) {
        std::string want;
        for (const auto& h : header) want += (want.empty() ? "" : ",") + h;
        throw ParseError(where + ": expected header '" + want + "'");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != header.size())
      throw ParseError(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    auto t = parse_int(fields[0]);
    if (!t) throw ParseError(where + ": field 'interval': not an integer");
    if (*t < 0 || *t >= horizon)
      throw ParseError(where + ": interval " + std::to_string(*t) + " outside horizon [0, " +
                       std::to_string(horizon) + ")");
    auto it = entities.find(fields[1]);
    if (it == entities.end())
      throw ParseError(where + ": unknown " + std::string(entity_kind) + " '" + fields[1] + "'");
    const std::size_t e = it->second;
    if (seen[e].empty()) seen[e].assign(static_cast<std::size_t>(horizon), 0);
    if (seen[e][static_cast<std::size_t>(*t)])
      throw ParseError(where + ": duplicate row for " + std::string(entity_kind) + " '" + fields[1] +
                       "' at interval " + std::to_string(*t));
    seen[e][static_cast<std::size_t>(*t)] = 1;
    tab.present[e] = true;
    for (std::size_t k = 0; k < nvals; ++k) {
      auto v = parse_double(fields[k + 2]);
      if (!v || !std::isfinite(*v)) throw ParseError(where + ": field '" + header[k + 2] + "': not a number");
      tab.columns[k][static_cast<std::size_t>(*t) * n + e] = *v;
    }
  }
  if (!header_seen) throw ParseError(fname + ": empty file");
  for (const auto& [name, e] : entities) {
    if (seen[e].empty()) continue;
    for (int t = 0; t < horizon; ++t)
      if (!seen[e][static_cast<std::size_t>(t)])
        throw MissingSeriesError(fname + ": " + std::string(entity_kind) + " '" + name + "' has no row for interval " +
                                 std::to_string(t));
  }
  return tab;
}

inline ojson write_latency(const LatencyModel& m) {
  ojson j;
  j["distribution"] = std::string(to_string(m.distribution));
  j["mean_s"] = m.mean_s;
  j["sigma"] = m.sigma;
  j["bandwidth_bps"] = std::isinf(m.bandwidth_bps) ? ojson(nullptr) : ojson(m.bandwidth_bps);
  j["loss_prob"] = m.loss_prob;
  return j;
}

}  // namespace scenario_detail

// Reads and fully validates a bundle directory.
inline Scenario load_scenario(const std::filesystem::path& dir) {
  using namespace scenario_detail;
  const auto json_path = dir / "scenario.json";
  std::ifstream in(json_path);
  if (!in) throw ParseError(json_path.string() + ": cannot open scenario file");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, text.size()); ++i) line += text[i] == '\n';
    throw ParseError("scenario.json line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
  }
  Reader rd("scenario.json");
  Scenario sc;
  GridModel& g = sc.grid;
  g.name = rd.text_or(doc, "name", "$", dir.filename().string());
  g.base_mva = rd.number(doc, "base_mva", "$");
  const auto& buses = rd.array(doc, "buses", "$");
  for (std::size_t i = 0; i < buses.size(); ++i)
    g.buses.push_back(read_bus(rd, buses[i], "buses[" + std::to_string(i) + "]", BusLevel::subtransmission));
  const auto& branches = rd.array(doc, "branches", "$", false);
  for (std::size_t i = 0; i < branches.size(); ++i)
    g.branches.push_back(read_branch(rd, branches[i], "branches[" + std::to_string(i) + "]"));
  const auto& caps = rd.array(doc, "capacitors", "$", false);
  for (std::size_t i = 0; i < caps.size(); ++i)
    g.capacitors.push_back(read_capacitor(rd, caps[i], "capacitors[" + std::to_string(i) + "]"));

  struct PendingFeeder {
    std::string id, head;
    std::vector<std::size_t> buses, branches, ders, caps;
  };
  std::vector<PendingFeeder> pending;
  const auto& feeders = rd.array(doc, "feeders", "$", false);
  for (std::size_t i = 0; i < feeders.size(); ++i) {
    const std::string fp = "feeders[" + std::to_string(i) + "]";
    const auto& fj = feeders[i];
    PendingFeeder pf;
    pf.id = rd.text(fj, "id", fp);
    pf.head = rd.text(fj, "head_bus", fp);
    const auto& fb = rd.array(fj, "buses", fp);
    for (std::size_t k = 0; k < fb.size(); ++k) {
      pf.buses.push_back(g.buses.size());
      g.buses.push_back(read_bus(rd, fb[k], fp + ".buses[" + std::to_string(k) + "]", BusLevel::distribution));
    }
    const auto& fbr = rd.array(fj, "branches", fp);
    for (std::size_t k = 0; k < fbr.size(); ++k) {
      pf.branches.push_back(g.branches.size());
      g.branches.push_back(read_branch(rd, fbr[k], fp + ".branches[" + std::to_string(k) + "]"));
    }
    const auto& fd = rd.array(fj, "ders", fp, false);
    for (std::size_t k = 0; k < fd.size(); ++k) {
      pf.ders.push_back(g.ders.size());
      g.ders.push_back(read_der(rd, fd[k], fp + ".ders[" + std::to_string(k) + "]"));
    }
    const auto& fc = rd.array(fj, "capacitors", fp, false);
    for (std::size_t k = 0; k < fc.size(); ++k) {
      pf.caps.push_back(g.capacitors.size());
      g.capacitors.push_back(read_capacitor(rd, fc[k], fp + ".capacitors[" + std::to_string(k) + "]"));
    }
    pending.push_back(std::move(pf));
  }
  g.reindex();
  for (auto& pf : pending) {
    FeederModel f;
    f.id = pf.id;
    auto head = g.find_bus(pf.head);
    if (!head) throw ValidationError("feeder '" + pf.id + "': head bus '" + pf.head + "' does not exist");
    f.head_bus = *head;
    f.buses = std::move(pf.buses);
    f.branches = std::move(pf.branches);
    f.ders = std::move(pf.ders);
    f.capacitors = std::move(pf.caps);
    g.feeders.push_back(std::move(f));
  }

  sc.config = read_config(rd, rd.member(doc, "sim", "$"), "sim");
  g.horizon = sc.config.horizon;
  if (g.horizon < 1) throw ValidationError("sim.horizon must be >= 1");

  std::map<std::string, std::size_t> bus_ids, pv_ids;
  for (std::size_t i = 0; i < g.buses.size(); ++i) bus_ids[g.buses[i].id] = i;
  auto loads = read_series(dir / "loads.csv", {"interval", "bus", "p_pu", "q_pu"}, bus_ids, g.horizon, "bus");
  g.load_p = std::move(loads.columns[0]);
  g.load_q = std::move(loads.columns[1]);
  g.has_load_series = std::move(loads.present);

  const auto nd = g.ders.size();
  g.pv_avail.assign(static_cast<std::size_t>(g.horizon) * nd, 0.0);
  for (std::size_t d = 0; d < nd; ++d)
    if (g.ders[d].kind == DerKind::pv_inverter) pv_ids[g.ders[d].id] = d;
  if (!pv_ids.empty() || std::filesystem::exists(dir / "pv.csv")) {
    std::map<std::string, std::size_t> local;
    std::vector<std::size_t> global;
    for (const auto& [id, d] : pv_ids) {
      local[id] = global.size();
      global.push_back(d);
    }
    auto pv = read_series(dir / "pv.csv", {"interval", "der", "p_avail_pu"}, local, g.horizon, "PV DER");
    for (std::size_t k = 0; k < global.size(); ++k) {
      if (!pv.present[k])
        throw MissingSeriesError("pv.csv: PV DER '" + g.ders[global[k]].id + "' has no availability series");
      for (int t = 0; t < g.horizon; ++t)
        g.pv_avail[static_cast<std::size_t>(t) * nd + global[k]] =
            pv.columns[0][static_cast<std::size_t>(t) * global.size() + k];
    }
  }

  validate(g);
  validate(sc.config);
  return sc;
}

// Writes a bundle that load_scenario reads back to an equal Scenario.
inline void save_scenario(const Scenario& sc, const std::filesystem::path& dir) {
  using namespace scenario_detail;
  std::filesystem::create_directories(dir);
  const GridModel& g = sc.grid;
  const SimConfig& c = sc.config;
  auto bus_json = [&](const Bus& b) {
    ojson j;
    j["id"] = b.id;
    j["kind"] = std::string(to_string(b.kind));
    j["base_kv"] = b.base_kv;
    j["v_min"] = b.v_min;
    j["v_max"] = b.v_max;
    j["v_set"] = b.v_set;
    return j;
  };
  auto branch_json = [&](const Branch& b) {
    ojson j;
    j["id"] = b.id;
    j["from"] = b.from_bus;
    j["to"] = b.to_bus;
    j["r"] = b.r;
    j["x"] = b.x;
    j["b_shunt"] = b.b_shunt;
    j["rating"] = b.rating;
    if (b.tap) {
      j["tap"] = ojson{{"ratio", tap_ratio(b.tap->position)},
                       {"min", tap_ratio(b.tap->min_position)},
                       {"max", tap_ratio(b.tap->max_position)}};
    }
    return j;
  };
  auto cap_json = [&](const ShuntCapacitor& cp) {
    return ojson{{"id", cp.id}, {"bus", cp.bus}, {"q_step", cp.q_step}, {"n_steps", cp.n_steps}, {"state", cp.state}};
  };
  auto der_json = [&](const Der& d) {
    return ojson{{"id", d.id},         {"bus", d.bus},         {"kind", std::string(to_string(d.kind))},
                 {"s_rating", d.s_rating}, {"p_avail", d.p_avail}, {"p_set", d.p_set},
                 {"q_set", d.q_set},   {"dr_cost", d.dr_cost}, {"tier", std::string(to_string(d.network_tier))}};
  };

  std::vector<bool> in_feeder_branch(g.branches.size()), in_feeder_cap(g.capacitors.size());
  for (const auto& f : g.feeders) {
    for (auto b : f.branches) in_feeder_branch[b] = true;
    for (auto cp : f.capacitors) in_feeder_cap[cp] = true;
  }
  ojson doc;
  doc["name"] = g.name;
  doc["base_mva"] = g.base_mva;
  doc["buses"] = ojson::array();
  for (const auto& b : g.buses)
    if (b.level == BusLevel::subtransmission) doc["buses"].push_back(bus_json(b));
  doc["branches"] = ojson::array();
  for (std::size_t i = 0; i < g.branches.size(); ++i)
    if (!in_feeder_branch[i]) doc["branches"].push_back(branch_json(g.branches[i]));
  doc["capacitors"] = ojson::array();
  for (std::size_t i = 0; i < g.capacitors.size(); ++i)
    if (!in_feeder_cap[i]) doc["capacitors"].push_back(cap_json(g.capacitors[i]));
  doc["feeders"] = ojson::array();
  for (const auto& f : g.feeders) {
    ojson fj;
    fj["id"] = f.id;
    fj["head_bus"] = g.buses[f.head_bus].id;
    fj["buses"] = ojson::array();
    for (auto b : f.buses) fj["buses"].push_back(bus_json(g.buses[b]));
    fj["branches"] = ojson::array();
    for (auto b : f.branches) fj["branches"].push_back(branch_json(g.branches[b]));
    fj["ders"] = ojson::array();
    for (auto d : f.ders) fj["ders"].push_back(der_json(g.ders[d]));
    fj["capacitors"] = ojson::array();
    for (auto cp : f.capacitors) fj["capacitors"].push_back(cap_json(g.capacitors[cp]));
    doc["feeders"].push_back(std::move(fj));
  }
  ojson sim;
  sim["interval_s"] = c.budget.interval_s;
  sim["horizon"] = c.horizon;
  sim["seed"] = c.seed;
  sim["latency_scale"] = c.latency_scale;
  sim["budget"] = ojson{{"ems_solve_s", c.budget.ems_solve_s},
                        {"ems_to_dms_s", c.budget.ems_to_dms_s},
                        {"dms_solve_s", c.budget.dms_solve_s},
                        {"dms_der_roundtrip_s", c.budget.dms_der_roundtrip_s},
                        {"dms_to_ems_s", c.budget.dms_to_ems_s}};
  ojson links;
  for (auto p : kAllPaths) links[std::string(to_string(p))] = write_latency(c.link(p));
  sim["links"] = links;
  sim["loss_timeout_s"] = c.loss_timeout_s;
  sim["payload_bytes"] = ojson{{"op_request", c.payload_bytes.op_request},
                               {"flexibility_report", c.payload_bytes.flexibility_report},
                               {"der_dispatch", c.payload_bytes.der_dispatch},
                               {"der_ack", c.payload_bytes.der_ack},
                               {"scada_poll", c.payload_bytes.scada_poll},
                               {"scada_reply", c.payload_bytes.scada_reply}};
  sim["framing"] = ojson{{"fragment_payload", c.framing.fragment_payload},
                         {"fragment_overhead", c.framing.fragment_overhead}};
  sim["scada_poll_period_s"] = c.scada_poll_period_s;
  sim["timing_mode"] = c.timing_mode == TimingMode::simulated ? "simulated" : "wall_clock";
  sim["control"] = c.control_enabled;
  sim["ami_realism"] = c.ami_realism;
  sim["ems_voltage_margin"] = c.ems_voltage_margin;
  sim["dms_voltage_margin"] = c.dms_voltage_margin;
  sim["groups"] = ojson::array();
  for (const auto& gr : c.groups) sim["groups"].push_back(ojson{{"id", gr.id}, {"feeders", gr.feeders}, {"buses", gr.buses}});
  doc["sim"] = sim;

  std::ofstream(dir / "scenario.json") << doc.dump(2) << '\n';

  std::ofstream loads(dir / "loads.csv");
  loads << "interval,bus,p_pu,q_pu\n";
  for (int t = 0; t < g.horizon; ++t)
    for (std::size_t b = 0; b < g.buses.size(); ++b)
      if (g.has_load_series[b])
        loads << t << ',' << g.buses[b].id << ',' << format_double(g.load_p_at(t, b)) << ','
              << format_double(g.load_q_at(t, b)) << '\n';
  std::ofstream pv(dir / "pv.csv");
  pv << "interval,der,p_avail_pu\n";
  for (int t = 0; t < g.horizon; ++t)
    for (std::size_t d = 0; d < g.ders.size(); ++d)
      if (g.ders[d].kind == DerKind::pv_inverter)
        pv << t << ',' << g.ders[d].id << ',' << format_double(g.pv_at(t, d)) << '\n';
}

}  // namespace crest
