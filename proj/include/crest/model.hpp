#pragma once

// Electrical data model for one sub-transmission grid with radial feeders.
//
// All quantities are per-unit on the single system MVA base declared by the
// scenario. Entities are stored in flat vectors owned by GridModel; feeders
// refer to them by index. Injection sign convention: positive P/Q is power
// injected into the network at a bus (loads are negative injections).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "crest/error.hpp"

namespace crest {

enum class BusKind { slack, pq, pv };
enum class BusLevel { subtransmission, distribution };
enum class DerKind { pv_inverter, storage, controllable_load };
enum class NetworkTier { substation_lan, fan, nan, ami };

inline constexpr double kTapFloor = 0.9;
inline constexpr double kTapStep = 0.00625;
inline constexpr int kTapMaxPosition = 32;  // 1.1 = floor + 32 steps
inline constexpr double kSecondsPerInterval = 300.0;

// Tap ratio of a position counted in steps from kTapFloor.
constexpr double tap_ratio(int position) { return kTapFloor + kTapStep * position; }

struct Bus {
  std::string id;
  BusKind kind = BusKind::pq;
  double base_kv = 1.0;
  double v_min = 0.95;
  double v_max = 1.05;
  BusLevel level = BusLevel::subtransmission;
  double v_set = 1.0;  // slack and pv buses only

  bool operator==(const Bus&) const = default;
};

struct TapChanger {
  int min_position = 0;
  int max_position = kTapMaxPosition;
  int position = 16;  // unity ratio

  bool operator==(const TapChanger&) const = default;
};

struct Branch {
  std::string id;
  std::string from_bus;
  std::string to_bus;
  double r = 0.0;
  double x = 0.0;
  double b_shunt = 0.0;
  double rating = 1.0;
  std::optional<TapChanger> tap;  // transformer branches only; ratio on the from side

  bool operator==(const Branch&) const = default;
};

struct ShuntCapacitor {
  std::string id;
  std::string bus;
  double q_step = 0.0;  // MVAr per step at 1 pu voltage, per-unit
  int n_steps = 1;
  int state = 0;

  bool operator==(const ShuntCapacitor&) const = default;
};

struct Der {
  std::string id;
  std::string bus;
  DerKind kind = DerKind::pv_inverter;
  double s_rating = 0.0;
  // pv_inverter: nameplate availability (the series overrides it per interval).
  // controllable_load: largest load reduction. storage: unused.
  double p_avail = 0.0;
  double p_set = 0.0;
  double q_set = 0.0;
  double dr_cost = 0.0;
  NetworkTier network_tier = NetworkTier::nan;

  bool operator==(const Der&) const = default;
};

// Index view of one radial feeder inside GridModel's flat vectors.
// `buses` excludes the head bus, so a radial feeder has exactly as many
// branches as buses.
struct FeederModel {
  std::string id;
  std::size_t head_bus = 0;
  std::vector<std::size_t> buses;
  std::vector<std::size_t> branches;
  std::vector<std::size_t> ders;
  std::vector<std::size_t> capacitors;

  bool operator==(const FeederModel&) const = default;
};

struct GridModel {
  std::string name;
  double base_mva = 100.0;
  std::vector<Bus> buses;  // sub-transmission buses first, then feeders in order
  std::vector<Branch> branches;
  std::vector<ShuntCapacitor> capacitors;
  std::vector<Der> ders;
  std::vector<FeederModel> feeders;

  // Series at 5-minute resolution, row-major [interval][bus] / [interval][der].
  int horizon = 0;
  std::vector<double> load_p;
  std::vector<double> load_q;
  std::vector<bool> has_load_series;  // per bus; buses without rows carry zero load
  std::vector<double> pv_avail;

  bool operator==(const GridModel&) const = default;

  // Bus id lookup; rebuilt by reindex() whenever `buses` changes.
  std::map<std::string, std::size_t, std::less<>> bus_lookup;

  void reindex() {
    bus_lookup.clear();
    for (std::size_t i = 0; i < buses.size(); ++i) bus_lookup.emplace(buses[i].id, i);
  }

  std::optional<std::size_t> find_bus(std::string_view id) const {
    if (bus_lookup.size() == buses.size()) {
      auto it = bus_lookup.find(id);
      if (it != bus_lookup.end()) return it->second;
      return std::nullopt;
    }
    for (std::size_t i = 0; i < buses.size(); ++i)
      if (buses[i].id == id) return i;
    return std::nullopt;
  }
  std::size_t bus_index(std::string_view id) const {
    if (auto i = find_bus(id)) return *i;
    throw ValidationError("unknown bus '" + std::string(id) + "'");
  }
  std::size_t der_index(std::string_view id) const {
    for (std::size_t i = 0; i < ders.size(); ++i)
      if (ders[i].id == id) return i;
    throw ValidationError("unknown DER '" + std::string(id) + "'");
  }
  std::size_t feeder_index(std::string_view id) const {
    for (std::size_t i = 0; i < feeders.size(); ++i)
      if (feeders[i].id == id) return i;
    throw ValidationError("unknown feeder '" + std::string(id) + "'");
  }
  std::size_t from_index(const Branch& b) const { return bus_index(b.from_bus); }
  std::size_t to_index(const Branch& b) const { return bus_index(b.to_bus); }

  bool is_feeder_bus(std::size_t bus) const { return buses[bus].level == BusLevel::distribution; }

  double load_p_at(int t, std::size_t bus) const { return load_p[static_cast<std::size_t>(t) * buses.size() + bus]; }
  double load_q_at(int t, std::size_t bus) const { return load_q[static_cast<std::size_t>(t) * buses.size() + bus]; }
  double pv_at(int t, std::size_t der) const { return pv_avail[static_cast<std::size_t>(t) * ders.size() + der]; }
};

// Interval t starts at simulated second t * 300.
constexpr double interval_start_seconds(int t, double interval_s = kSecondsPerInterval) {
  return static_cast<double>(t) * interval_s;
}

// Per-bus demand and per-DER availability frozen at one interval.
struct NetworkState {
  int interval = 0;
  std::vector<double> load_p;
  std::vector<double> load_q;
  std::vector<double> der_avail;

  bool operator==(const NetworkState&) const = default;
};

struct DerSetpoint {
  double p = 0.0;
  double q = 0.0;
  bool operator==(const DerSetpoint&) const = default;
};

// Settings of every controllable device. Vectors align with GridModel.
// tap_position is -1 for branches without a tap changer. For PV inverters
// and controllable loads, p is an output ceiling: the delivered power is
// min(p, available) at the interval being simulated.
struct ControlVector {
  std::vector<int> cap_state;
  std::vector<int> tap_position;
  std::vector<DerSetpoint> der;

  bool operator==(const ControlVector&) const = default;
};

inline ControlVector initial_controls(const GridModel& m) {
  ControlVector c;
  for (const auto& cap : m.capacitors) c.cap_state.push_back(cap.state);
  for (const auto& br : m.branches) c.tap_position.push_back(br.tap ? br.tap->position : -1);
  for (const auto& d : m.ders) c.der.push_back({d.p_set, d.q_set});
  return c;
}

// Real power a DER delivers under a setpoint, given its availability.
inline double effective_der_p(const Der& d, const DerSetpoint& sp, double avail) {
  switch (d.kind) {
    case DerKind::pv_inverter:
    case DerKind::controllable_load:
      return std::clamp(sp.p, 0.0, std::max(avail, 0.0));
    case DerKind::storage:
      return sp.p;
  }
  return sp.p;
}

// Uncontrolled real power: full PV output, no load reduction, idle storage.
inline double natural_der_p(const Der& d, double avail) {
  return d.kind == DerKind::pv_inverter ? avail : 0.0;
}

inline NetworkState snapshot_at(const GridModel& m, int t) {
  if (t < 0 || t >= m.horizon)
    throw OutOfRangeError("interval " + std::to_string(t) + " outside horizon [0, " +
                          std::to_string(m.horizon) + ")");
  NetworkState s;
  s.interval = t;
  const std::size_t nb = m.buses.size();
  const auto row = static_cast<std::size_t>(t);
  s.load_p.assign(m.load_p.begin() + static_cast<std::ptrdiff_t>(row * nb),
                  m.load_p.begin() + static_cast<std::ptrdiff_t>((row + 1) * nb));
  s.load_q.assign(m.load_q.begin() + static_cast<std::ptrdiff_t>(row * nb),
                  m.load_q.begin() + static_cast<std::ptrdiff_t>((row + 1) * nb));
  s.der_avail.resize(m.ders.size());
  for (std::size_t d = 0; d < m.ders.size(); ++d)
    s.der_avail[d] = m.ders[d].kind == DerKind::pv_inverter ? m.pv_at(t, d) : m.ders[d].p_avail;
  return s;
}

// ---------------------------------------------------------------------------
// enum <-> text

inline std::string_view to_string(BusKind k) {
  switch (k) {
    case BusKind::slack: return "slack";
    case BusKind::pq: return "pq";
    case BusKind::pv: return "pv";
  }
  return "?";
}
inline std::string_view to_string(BusLevel k) {
  return k == BusLevel::subtransmission ? "subtransmission" : "distribution";
}
inline std::string_view to_string(DerKind k) {
  switch (k) {
    case DerKind::pv_inverter: return "pv_inverter";
    case DerKind::storage: return "storage";
    case DerKind::controllable_load: return "controllable_load";
  }
  return "?";
}
inline std::string_view to_string(NetworkTier k) {
  switch (k) {
    case NetworkTier::substation_lan: return "substation_lan";
    case NetworkTier::fan: return "fan";
    case NetworkTier::nan: return "nan";
    case NetworkTier::ami: return "ami";
  }
  return "?";
}

template <typename Enum>
Enum parse_enum(std::string_view text, std::initializer_list<Enum> values, std::string_view what) {
  for (Enum v : values)
    if (to_string(v) == text) return v;
  throw ParseError("invalid " + std::string(what) + " '" + std::string(text) + "'");
}

inline BusKind parse_bus_kind(std::string_view s) {
  return parse_enum(s, {BusKind::slack, BusKind::pq, BusKind::pv}, "bus kind");
}
inline BusLevel parse_bus_level(std::string_view s) {
  return parse_enum(s, {BusLevel::subtransmission, BusLevel::distribution}, "bus level");
}
inline DerKind parse_der_kind(std::string_view s) {
  return parse_enum(s, {DerKind::pv_inverter, DerKind::storage, DerKind::controllable_load}, "DER kind");
}
inline NetworkTier parse_tier(std::string_view s) {
  return parse_enum(s, {NetworkTier::substation_lan, NetworkTier::fan, NetworkTier::nan, NetworkTier::ami},
                    "network tier");
}

// ---------------------------------------------------------------------------
// topology helpers

// Connected components over all branches, each sorted by bus index and
// ordered by their smallest member.
inline std::vector<std::vector<std::size_t>> electrical_islands(const GridModel& m) {
  const std::size_t n = m.buses.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (const auto& br : m.branches) {
    auto a = find(m.from_index(br)), b = find(m.to_index(br));
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[find(i)].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [root, members] : groups) out.push_back(std::move(members));
  return out;
}

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

// Checks one feeder is a tree rooted at its head bus. Names the cycle or
// the unreachable bus when it is not.
inline void validate_radial(const GridModel& m, const FeederModel& f) {
  std::vector<std::size_t> local(m.buses.size(), SIZE_MAX);
  local[f.head_bus] = 0;
  for (std::size_t i = 0; i < f.buses.size(); ++i) local[f.buses[i]] = i + 1;
  const std::size_t n = f.buses.size() + 1;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> adj(n);
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  auto name = [&](std::size_t l) { return m.buses[l == 0 ? f.head_bus : f.buses[l - 1]].id; };
  for (std::size_t bi : f.branches) {
    const auto& br = m.branches[bi];
    std::size_t a = local[m.from_index(br)], b = local[m.to_index(br)];
    require(a != SIZE_MAX && b != SIZE_MAX,
            "feeder '" + f.id + "': branch '" + br.id + "' leaves the feeder");
    require(!br.tap, "feeder '" + f.id + "': branch '" + br.id + "' carries a tap changer");
    if (find(a) == find(b)) {
      // Path a ~> b in the forest built so far, plus this branch, is the cycle.
      std::vector<std::size_t> prev(n, SIZE_MAX);
      std::vector<std::size_t> stack{a};
      prev[a] = a;
      while (!stack.empty()) {
        auto u = stack.back();
        stack.pop_back();
        for (auto [v, _] : adj[u])
          if (prev[v] == SIZE_MAX) {
            prev[v] = u;
            stack.push_back(v);
          }
      }
      std::string cycle = name(b);
      for (std::size_t v = b; v != a;) {
        v = prev[v];
        cycle += " -> " + name(v);
      }
      cycle += " -> " + name(b);
      throw ValidationError("feeder '" + f.id + "' is not radial: cycle " + cycle + " (closed by branch '" +
                            br.id + "')");
    }
    parent[find(a)] = find(b);
    adj[a].push_back({b, bi});
    adj[b].push_back({a, bi});
  }
  for (std::size_t l = 1; l < n; ++l)
    require(find(l) == find(0), "feeder '" + f.id + "': bus '" + name(l) + "' is disconnected from head bus");
  require(f.branches.size() == f.buses.size(),
          "feeder '" + f.id + "': radial feeder needs one branch per bus");
}

}  // namespace detail

// Checks every model invariant; throws ValidationError naming the entity.
inline void validate(const GridModel& m) {
  using detail::require;
  require(m.base_mva > 0, "base_mva must be positive");
  std::map<std::string, std::string> seen;
  auto unique = [&](const std::string& id, const char* kind) {
    require(!id.empty(), std::string(kind) + " with empty id");
    auto [it, fresh] = seen.emplace(id, kind);
    require(fresh, "duplicate id '" + id + "' (" + kind + " and " + it->second + ")");
  };
  for (const auto& b : m.buses) {
    unique(b.id, "bus");
    require(b.base_kv > 0, "bus '" + b.id + "': base_kv must be positive");
    require(b.v_min > 0 && b.v_min < b.v_max, "bus '" + b.id + "': need 0 < v_min < v_max");
  }
  for (const auto& br : m.branches) {
    unique(br.id, "branch");
    require(m.find_bus(br.from_bus).has_value(), "branch '" + br.id + "': unknown from bus '" + br.from_bus + "'");
    require(m.find_bus(br.to_bus).has_value(), "branch '" + br.id + "': unknown to bus '" + br.to_bus + "'");
    require(br.from_bus != br.to_bus, "branch '" + br.id + "' connects a bus to itself");
    require(br.r >= 0, "branch '" + br.id + "': r must be >= 0");
    require(br.b_shunt >= 0, "branch '" + br.id + "': b_shunt must be >= 0");
    require(br.rating > 0, "branch '" + br.id + "': rating must be > 0");
    require(br.r > 0 || br.x != 0, "branch '" + br.id + "': zero impedance");
    if (br.tap) {
      const auto& t = *br.tap;
      require(0 <= t.min_position && t.min_position <= t.position && t.position <= t.max_position &&
                  t.max_position <= kTapMaxPosition,
              "branch '" + br.id + "': tap position outside [0.9, 1.1] or its own limits");
    }
  }
  for (const auto& c : m.capacitors) {
    unique(c.id, "capacitor");
    require(m.find_bus(c.bus).has_value(), "capacitor '" + c.id + "': unknown bus '" + c.bus + "'");
    require(c.q_step > 0, "capacitor '" + c.id + "': q_step must be > 0");
    require(c.n_steps >= 1, "capacitor '" + c.id + "': n_steps must be >= 1");
    require(c.state >= 0 && c.state <= c.n_steps, "capacitor '" + c.id + "': state outside [0, n_steps]");
  }
  for (const auto& d : m.ders) {
    unique(d.id, "der");
    require(m.find_bus(d.bus).has_value(), "DER '" + d.id + "': unknown bus '" + d.bus + "'");
    require(d.s_rating > 0, "DER '" + d.id + "': s_rating must be > 0");
    require(d.p_avail >= 0, "DER '" + d.id + "': p_avail must be >= 0");
    require(d.dr_cost >= 0, "DER '" + d.id + "': dr_cost must be >= 0");
    require(d.p_set * d.p_set + d.q_set * d.q_set <= d.s_rating * d.s_rating * (1 + 1e-12),
            "DER '" + d.id + "': setpoint outside capability circle");
    if (d.kind != DerKind::storage) require(d.p_set >= 0, "DER '" + d.id + "': p_set must be >= 0");
    if (d.kind == DerKind::controllable_load) require(d.q_set == 0, "DER '" + d.id + "': controllable load has no q");
  }
  std::vector<int> owner(m.buses.size(), -1);
  for (std::size_t fi = 0; fi < m.feeders.size(); ++fi) {
    const auto& f = m.feeders[fi];
    unique(f.id, "feeder");
    require(f.head_bus < m.buses.size() && m.buses[f.head_bus].level == BusLevel::subtransmission,
            "feeder '" + f.id + "': head bus must be a sub-transmission bus");
    for (auto b : f.buses) {
      require(m.buses[b].level == BusLevel::distribution,
              "feeder '" + f.id + "': bus '" + m.buses[b].id + "' is not a distribution bus");
      require(owner[b] < 0, "bus '" + m.buses[b].id + "' belongs to two feeders");
      owner[b] = static_cast<int>(fi);
    }
    detail::validate_radial(m, f);
    for (auto d : f.ders)
      require(owner[m.bus_index(m.ders[d].bus)] == static_cast<int>(fi),
              "DER '" + m.ders[d].id + "' is not on a bus of feeder '" + f.id + "'");
    for (auto c : f.capacitors)
      require(owner[m.bus_index(m.capacitors[c].bus)] == static_cast<int>(fi),
              "capacitor '" + m.capacitors[c].id + "' is not on a bus of feeder '" + f.id + "'");
  }
  for (std::size_t b = 0; b < m.buses.size(); ++b)
    require(m.buses[b].level == BusLevel::subtransmission || owner[b] >= 0,
            "distribution bus '" + m.buses[b].id + "' belongs to no feeder");
  for (const auto& d : m.ders)
    require(owner[m.bus_index(d.bus)] >= 0, "DER '" + d.id + "' must sit on a feeder bus");
  for (const auto& island : electrical_islands(m)) {
    std::size_t slack = 0;
    for (auto b : island) slack += m.buses[b].kind == BusKind::slack;
    require(slack == 1, "island containing bus '" + m.buses[island.front()].id + "' has " +
                            std::to_string(slack) + " slack buses (need exactly 1)");
  }
  for (const auto& f : m.feeders)
    for (auto b : f.buses)
      require(m.buses[b].kind == BusKind::pq, "feeder bus '" + m.buses[b].id + "' must be a pq bus");

  const auto nb = m.buses.size(), nd = m.ders.size();
  const auto h = static_cast<std::size_t>(m.horizon);
  require(m.horizon >= 1, "horizon must be at least one interval");
  require(m.load_p.size() == h * nb && m.load_q.size() == h * nb && m.has_load_series.size() == nb,
          "load series shape does not match horizon x buses");
  require(m.pv_avail.size() == h * nd, "PV series shape does not match horizon x DERs");
  for (double v : m.pv_avail) require(v >= 0, "negative PV availability in series");
}

}  // namespace crest
