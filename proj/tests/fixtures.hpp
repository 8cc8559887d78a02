#pragma once

// Small hand-built grids shared by the unit suites.

#include <filesystem>
#include <string>
#include <vector>

#include "crest/model.hpp"
#include "crest/scenario.hpp"

namespace crest::test {

inline std::filesystem::path scenario_dir(const std::string& name) {
  return std::filesystem::path(CREST_SCENARIO_DIR) / name;
}

// Allocates flat series for the current bus/DER counts.
inline void size_series(GridModel& g, int horizon) {
  g.horizon = horizon;
  g.load_p.assign(static_cast<std::size_t>(horizon) * g.buses.size(), 0.0);
  g.load_q.assign(static_cast<std::size_t>(horizon) * g.buses.size(), 0.0);
  g.has_load_series.assign(g.buses.size(), false);
  g.pv_avail.assign(static_cast<std::size_t>(horizon) * g.ders.size(), 0.0);
}

inline void set_load(GridModel& g, int t, const std::string& bus, double p, double q) {
  const auto b = g.bus_index(bus);
  g.load_p[static_cast<std::size_t>(t) * g.buses.size() + b] = p;
  g.load_q[static_cast<std::size_t>(t) * g.buses.size() + b] = q;
  g.has_load_series[b] = true;
}

inline void set_pv(GridModel& g, int t, const std::string& der, double p) {
  g.pv_avail[static_cast<std::size_t>(t) * g.ders.size() + g.der_index(der)] = p;
}

inline Bus sub_bus(std::string id, BusKind kind = BusKind::pq, double v_set = 1.0) {
  Bus b;
  b.id = std::move(id);
  b.kind = kind;
  b.base_kv = 69.0;
  b.v_set = v_set;
  return b;
}

inline Bus feeder_bus(std::string id) {
  Bus b;
  b.id = std::move(id);
  b.base_kv = 12.47;
  b.level = BusLevel::distribution;
  return b;
}

inline Branch line(std::string id, std::string from, std::string to, double r, double x, double rating = 10.0) {
  Branch b;
  b.id = std::move(id);
  b.from_bus = std::move(from);
  b.to_bus = std::move(to);
  b.r = r;
  b.x = x;
  b.rating = rating;
  return b;
}

// Head "H" (slack) feeding a chain of `n` feeder buses F1..Fn, each link
// r/x per unit. No devices; `horizon` zero-load intervals.
inline GridModel chain_feeder(int n, double r, double x, double head_v = 1.0, int horizon = 1) {
  GridModel g;
  g.name = "chain";
  g.base_mva = 10.0;
  g.buses.push_back(sub_bus("H", BusKind::slack, head_v));
  FeederModel f;
  f.id = "F";
  f.head_bus = 0;
  std::string prev = "H";
  for (int i = 1; i <= n; ++i) {
    const std::string id = "F" + std::to_string(i);
    f.buses.push_back(g.buses.size());
    g.buses.push_back(feeder_bus(id));
    f.branches.push_back(g.branches.size());
    g.branches.push_back(line("L" + std::to_string(i), prev, id, r, x));
    prev = id;
  }
  g.feeders.push_back(f);
  g.reindex();
  size_series(g, horizon);
  return g;
}

inline Der pv_der(std::string id, std::string bus, double s_rating, double dr_cost = 1.0,
                  NetworkTier tier = NetworkTier::nan) {
  Der d;
  d.id = std::move(id);
  d.bus = std::move(bus);
  d.kind = DerKind::pv_inverter;
  d.s_rating = s_rating;
  d.p_avail = s_rating;
  d.p_set = s_rating;
  d.dr_cost = dr_cost;
  d.network_tier = tier;
  return d;
}

// Adds a DER to feeder `feeder` and re-sizes series (clears them).
inline void add_der(GridModel& g, std::size_t feeder, Der d) {
  g.feeders[feeder].ders.push_back(g.ders.size());
  g.ders.push_back(std::move(d));
}

}  // namespace crest::test
