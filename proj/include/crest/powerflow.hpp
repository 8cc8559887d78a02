#pragma once

// Steady-state AC power flow.
//
// solve_meshed: polar Newton-Raphson, flat start, each electrical island
// solved on its own so independent islands never influence each other.
// solve_radial: backward/forward current sweep for a tree rooted at a
// single fixed-voltage bus.
//
// Branch model: pi-section with series admittance y = 1/(r + jx), total
// charging susceptance b split evenly between the ends, and an ideal ratio
// t on the from side (Yff = (y + jb/2)/t^2, Yft = Ytf = -y/t, Ytt = y + jb/2).

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crest/error.hpp"
#include "crest/format.hpp"
#include "crest/model.hpp"

namespace crest {

using cplx = std::complex<double>;

struct PfBranch {
  std::size_t from = 0;
  std::size_t to = 0;
  double r = 0.0;
  double x = 0.0;
  double b_shunt = 0.0;
  double ratio = 1.0;
};

// Flat electrical network handed to the solvers. Slack buses hold voltage
// magnitude and angle fixed; pv buses hold magnitude and real power.
struct PfNetwork {
  std::vector<std::string> names;
  std::vector<std::size_t> model_bus;  // index into GridModel::buses, per network bus
  std::vector<BusKind> kind;
  std::vector<double> v_set;
  std::vector<double> ang_set;
  std::vector<double> p_inj;
  std::vector<double> q_inj;
  std::vector<double> b_shunt;  // fixed shunt susceptance (capacitors)
  std::vector<PfBranch> branches;

  std::size_t size() const { return kind.size(); }

  std::size_t add_bus(std::string name, BusKind k, double v = 1.0, std::size_t model_index = SIZE_MAX) {
    names.push_back(std::move(name));
    model_bus.push_back(model_index);
    kind.push_back(k);
    v_set.push_back(v);
    ang_set.push_back(0.0);
    p_inj.push_back(0.0);
    q_inj.push_back(0.0);
    b_shunt.push_back(0.0);
    return kind.size() - 1;
  }
  void add_branch(std::size_t from, std::size_t to, double r, double x, double b = 0.0, double ratio = 1.0) {
    branches.push_back({from, to, r, x, b, ratio});
  }
};

struct BranchFlow {
  double p_from = 0.0;
  double q_from = 0.0;
  double p_to = 0.0;
  double q_to = 0.0;
  bool operator==(const BranchFlow&) const = default;
};

struct PowerFlowSolution {
  std::vector<double> v_mag;
  std::vector<double> v_ang;
  std::vector<BranchFlow> branch_flows;
  std::vector<double> p_calc;  // injections implied by the solved voltages
  std::vector<double> q_calc;
  std::vector<std::size_t> model_bus;
  double losses_total = 0.0;
  double max_mismatch = 0.0;
  bool converged = false;
  int iterations = 0;
  std::string diagnostic;

  bool operator==(const PowerFlowSolution&) const = default;
};

struct NewtonOptions {
  double tolerance = 1e-8;
  int max_iterations = 20;
};

struct SweepOptions {
  double tolerance = 1e-8;
  int max_sweeps = 50;
};

namespace pf_detail {

struct BranchAdmittance {
  cplx yff, yft, ytf, ytt;
};

inline BranchAdmittance admittance(const PfBranch& br) {
  const cplx y = 1.0 / cplx(br.r, br.x);
  const cplx half_b(0.0, br.b_shunt / 2.0);
  const double t = br.ratio;
  return {(y + half_b) / (t * t), -y / t, -y / t, y + half_b};
}

// Fills flows, losses, computed injections and mismatch from a voltage vector.
inline void finalize(const PfNetwork& net, std::span<const cplx> v, PowerFlowSolution& sol) {
  const std::size_t n = net.size();
  sol.v_mag.resize(n);
  sol.v_ang.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    sol.v_mag[i] = std::abs(v[i]);
    sol.v_ang[i] = std::arg(v[i]);
  }
  std::vector<cplx> injection(n);
  for (std::size_t i = 0; i < n; ++i) injection[i] = v[i] * std::conj(cplx(0.0, net.b_shunt[i]) * v[i]);
  sol.branch_flows.resize(net.branches.size());
  sol.losses_total = 0.0;
  for (std::size_t k = 0; k < net.branches.size(); ++k) {
    const auto& br = net.branches[k];
    const auto a = admittance(br);
    const cplx i_from = a.yff * v[br.from] + a.yft * v[br.to];
    const cplx i_to = a.ytf * v[br.from] + a.ytt * v[br.to];
    const cplx s_from = v[br.from] * std::conj(i_from);
    const cplx s_to = v[br.to] * std::conj(i_to);
    sol.branch_flows[k] = {s_from.real(), s_from.imag(), s_to.real(), s_to.imag()};
    sol.losses_total += s_from.real() + s_to.real();
    injection[br.from] += s_from;
    injection[br.to] += s_to;
  }
  sol.p_calc.resize(n);
  sol.q_calc.resize(n);
  sol.max_mismatch = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // Injection equals total outflow into shunts and branches.
    sol.p_calc[i] = injection[i].real();
    sol.q_calc[i] = injection[i].imag();
    if (net.kind[i] == BusKind::slack) continue;
    double mis = std::abs(sol.p_calc[i] - net.p_inj[i]);
    if (net.kind[i] == BusKind::pq) mis = std::max(mis, std::abs(sol.q_calc[i] - net.q_inj[i]));
    sol.max_mismatch = std::max(sol.max_mismatch, mis);
  }
  sol.model_bus = net.model_bus;
}

// Connected components of the network graph, each sorted ascending.
inline std::vector<std::vector<std::size_t>> components(const PfNetwork& net) {
  const std::size_t n = net.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (const auto& br : net.branches) {
    auto a = find(br.from), b = find(br.to);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> slot(n, SIZE_MAX);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = find(i);
    if (slot[r] == SIZE_MAX) {
      slot[r] = out.size();
      out.emplace_back();
    }
    out[slot[r]].push_back(i);
  }
  return out;
}

// Newton-Raphson on one connected island given in local numbering.
inline void newton_island(const PfNetwork& net, const std::vector<std::size_t>& buses, const NewtonOptions& opt,
                          std::vector<cplx>& v_global, int& iterations, bool& converged, std::string& diagnostic) {
  const std::size_t n = buses.size();
  std::vector<std::size_t> local(net.size(), SIZE_MAX);
  for (std::size_t i = 0; i < n; ++i) local[buses[i]] = i;

  Eigen::MatrixXcd ybus = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) ybus(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += cplx(0.0, net.b_shunt[buses[i]]);
  for (const auto& br : net.branches) {
    if (local[br.from] == SIZE_MAX) continue;
    const auto f = static_cast<Eigen::Index>(local[br.from]);
    const auto t = static_cast<Eigen::Index>(local[br.to]);
    const auto a = admittance(br);
    ybus(f, f) += a.yff;
    ybus(f, t) += a.yft;
    ybus(t, f) += a.ytf;
    ybus(t, t) += a.ytt;
  }

  // Unknown ordering: angles of non-slack buses, then magnitudes of pq buses.
  std::vector<std::size_t> ang_idx, mag_idx;
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = net.kind[buses[i]];
    if (k != BusKind::slack) ang_idx.push_back(i);
    if (k == BusKind::pq) mag_idx.push_back(i);
  }
  const std::size_t na = ang_idx.size(), nm = mag_idx.size(), dim = na + nm;

  Eigen::VectorXd vm(static_cast<Eigen::Index>(n)), va(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = buses[i];
    const bool fixed_mag = net.kind[g] != BusKind::pq;
    vm(static_cast<Eigen::Index>(i)) = fixed_mag ? net.v_set[g] : 1.0;
    va(static_cast<Eigen::Index>(i)) = net.kind[g] == BusKind::slack ? net.ang_set[g] : 0.0;
  }
  Eigen::VectorXd p_spec(static_cast<Eigen::Index>(n)), q_spec(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    p_spec(static_cast<Eigen::Index>(i)) = net.p_inj[buses[i]];
    q_spec(static_cast<Eigen::Index>(i)) = net.q_inj[buses[i]];
  }

  auto unknown_bus = [&](std::size_t u) { return net.names[buses[u < na ? ang_idx[u] : mag_idx[u - na]]]; };

  Eigen::VectorXcd v(static_cast<Eigen::Index>(n));
  converged = false;
  iterations = 0;
  for (int iter = 0;; ++iter) {
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) v(i) = std::polar(vm(i), va(i));
    const Eigen::VectorXcd ibus = ybus * v;
    const Eigen::VectorXcd s = v.cwiseProduct(ibus.conjugate());
    Eigen::VectorXd mis(static_cast<Eigen::Index>(dim));
    double worst = 0.0;
    std::size_t worst_at = 0;
    for (std::size_t k = 0; k < na; ++k) {
      const auto i = static_cast<Eigen::Index>(ang_idx[k]);
      mis(static_cast<Eigen::Index>(k)) = s(i).real() - p_spec(i);
    }
    for (std::size_t k = 0; k < nm; ++k) {
      const auto i = static_cast<Eigen::Index>(mag_idx[k]);
      mis(static_cast<Eigen::Index>(na + k)) = s(i).imag() - q_spec(i);
    }
    for (std::size_t k = 0; k < dim; ++k) {
      const double a = std::abs(mis(static_cast<Eigen::Index>(k)));
      if (!(a <= worst)) {
        worst = std::isfinite(a) ? a : std::numeric_limits<double>::infinity();
        worst_at = k;
      }
    }
    iterations = iter;
    if (dim == 0 || worst <= opt.tolerance) {
      converged = true;
      break;
    }
    if (!std::isfinite(worst) || iter >= opt.max_iterations) {
      diagnostic = "Newton-Raphson did not converge after " + std::to_string(iter) +
                   " iterations; final mismatch " + format_double(worst) + " pu at bus '" +
                   (dim ? unknown_bus(worst_at) : std::string()) + "'";
      break;
    }

    // dS/dVa = j diag(V) conj(diag(I) - Y diag(V)); dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    Eigen::VectorXcd vnorm(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) vnorm(i) = v(i) / std::abs(v(i));
    auto ds_dva = [&](Eigen::Index i, Eigen::Index k) {
      cplx term = -ybus(i, k) * v(k);
      if (i == k) term += ibus(i);
      return cplx(0.0, 1.0) * v(i) * std::conj(term);
    };
    auto ds_dvm = [&](Eigen::Index i, Eigen::Index k) {
      cplx out = v(i) * std::conj(ybus(i, k) * vnorm(k));
      if (i == k) out += std::conj(ibus(i)) * vnorm(i);
      return out;
    };
    for (std::size_t r = 0; r < dim; ++r) {
      const bool p_row = r < na;
      const auto i = static_cast<Eigen::Index>(p_row ? ang_idx[r] : mag_idx[r - na]);
      for (std::size_t c = 0; c < dim; ++c) {
        const bool a_col = c < na;
        const auto k = static_cast<Eigen::Index>(a_col ? ang_idx[c] : mag_idx[c - na]);
        if (i != k && ybus(i, k) == cplx(0.0, 0.0)) continue;
        const cplx d = a_col ? ds_dva(i, k) : ds_dvm(i, k);
        jac(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = p_row ? d.real() : d.imag();
      }
    }
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
    const auto& u = lu.matrixLU();
    double umax = 0.0;
    for (Eigen::Index k = 0; k < u.rows(); ++k) umax = std::max(umax, std::abs(u(k, k)));
    for (Eigen::Index k = 0; k < u.rows(); ++k) {
      if (!(std::abs(u(k, k)) > 1e-13 * std::max(umax, 1.0))) {
        diagnostic = "singular Jacobian at bus '" + unknown_bus(static_cast<std::size_t>(k)) + "'";
        return;
      }
    }
    const Eigen::VectorXd dx = lu.solve(-mis);
    for (std::size_t k = 0; k < na; ++k) va(static_cast<Eigen::Index>(ang_idx[k])) += dx(static_cast<Eigen::Index>(k));
    for (std::size_t k = 0; k < nm; ++k) vm(static_cast<Eigen::Index>(mag_idx[k])) += dx(static_cast<Eigen::Index>(na + k));
    for (std::size_t k = 0; k < nm; ++k) {
      const double m = vm(static_cast<Eigen::Index>(mag_idx[k]));
      if (!(m > 1e-3) || !std::isfinite(m)) {
        diagnostic = "Newton-Raphson diverged (voltage collapse) at bus '" + net.names[buses[mag_idx[k]]] + "'";
        return;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) v_global[buses[i]] = v(static_cast<Eigen::Index>(i));
}

}  // namespace pf_detail

inline PowerFlowSolution solve_meshed(const PfNetwork& net, const NewtonOptions& opt = {}) {
  PowerFlowSolution sol;
  std::vector<cplx> v(net.size());
  for (std::size_t i = 0; i < net.size(); ++i) v[i] = std::polar(net.v_set[i], net.ang_set[i]);
  sol.converged = true;
  for (const auto& island : pf_detail::components(net)) {
    std::size_t fixed = 0;
    for (auto b : island) fixed += net.kind[b] == BusKind::slack;
    if (fixed == 0) {
      sol.converged = false;
      sol.diagnostic = "island containing bus '" + net.names[island.front()] + "' has no slack bus";
      break;
    }
    int iters = 0;
    bool ok = false;
    std::string diag;
    pf_detail::newton_island(net, island, opt, v, iters, ok, diag);
    sol.iterations = std::max(sol.iterations, iters);
    if (!ok) {
      sol.converged = false;
      sol.diagnostic = diag;
      break;
    }
  }
  pf_detail::finalize(net, v, sol);
  return sol;
}

// Backward/forward sweep. The network must be a tree whose only slack bus
// is the root; ratios other than 1 are rejected.
inline PowerFlowSolution solve_radial(const PfNetwork& net, const SweepOptions& opt = {}) {
  PowerFlowSolution sol;
  const std::size_t n = net.size();
  std::vector<cplx> v(n, cplx(1.0, 0.0));
  auto fail = [&](std::string msg) {
    sol.converged = false;
    sol.diagnostic = std::move(msg);
    pf_detail::finalize(net, v, sol);
    return sol;
  };
  std::size_t root = SIZE_MAX;
  for (std::size_t i = 0; i < n; ++i)
    if (net.kind[i] == BusKind::slack) {
      if (root != SIZE_MAX) return fail("radial network has more than one slack bus");
      root = i;
    } else if (net.kind[i] == BusKind::pv) {
      return fail("radial sweep does not support pv bus '" + net.names[i] + "'");
    }
  if (root == SIZE_MAX) return fail("radial network has no slack bus");
  if (net.branches.size() + 1 != n) return fail("network is not a tree");

  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t k = 0; k < net.branches.size(); ++k) {
    const auto& br = net.branches[k];
    if (br.ratio != 1.0) return fail("radial sweep does not model tap ratios");
    adj[br.from].push_back(k);
    adj[br.to].push_back(k);
  }
  // BFS order; parent_branch[i] links bus i to its parent.
  std::vector<std::size_t> order{root}, parent(n, SIZE_MAX), parent_branch(n, SIZE_MAX);
  std::vector<char> seen(n, 0);
  seen[root] = 1;
  for (std::size_t head = 0; head < order.size(); ++head) {
    const auto u = order[head];
    for (auto k : adj[u]) {
      const auto& br = net.branches[k];
      const auto w = br.from == u ? br.to : br.from;
      if (seen[w]) continue;
      seen[w] = 1;
      parent[w] = u;
      parent_branch[w] = k;
      order.push_back(w);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!seen[i]) return fail("disconnected bus '" + net.names[i] + "'");

  // Shunt admittance per bus: fixed shunts plus half the line charging.
  std::vector<cplx> y_sh(n);
  for (std::size_t i = 0; i < n; ++i) y_sh[i] = cplx(0.0, -net.b_shunt[i]);
  for (const auto& br : net.branches) {
    y_sh[br.from] += cplx(0.0, -br.b_shunt / 2.0);
    y_sh[br.to] += cplx(0.0, -br.b_shunt / 2.0);
  }
  // y_sh holds the negated admittance so that injected current is
  // conj(S/V) + y_sh*V.
  std::vector<cplx> z(n);
  for (std::size_t i = 0; i < n; ++i)
    if (parent_branch[i] != SIZE_MAX) z[i] = cplx(net.branches[parent_branch[i]].r, net.branches[parent_branch[i]].x);

  v[root] = std::polar(net.v_set[root], net.ang_set[root]);
  for (std::size_t k = 1; k < order.size(); ++k) v[order[k]] = v[root];
  std::vector<cplx> current(n);
  sol.converged = false;
  for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
    // Backward: current drawn through each bus's parent branch.
    for (std::size_t i = 0; i < n; ++i)
      current[i] = -(std::conj(cplx(net.p_inj[i], net.q_inj[i]) / v[i]) + y_sh[i] * v[i]);
    for (std::size_t k = order.size(); k-- > 1;) {
      const auto w = order[k];
      current[parent[w]] += current[w];
    }
    // Forward: voltage drop from the root outwards.
    double change = 0.0;
    for (std::size_t k = 1; k < order.size(); ++k) {
      const auto w = order[k];
      const cplx nv = v[parent[w]] - z[w] * current[w];
      change = std::max(change, std::abs(nv - v[w]));
      v[w] = nv;
    }
    sol.iterations = sweep;
    if (!std::isfinite(change)) return fail("backward/forward sweep diverged");
    if (change <= opt.tolerance) {
      sol.converged = true;
      break;
    }
  }
  pf_detail::finalize(net, v, sol);
  if (!sol.converged)
    sol.diagnostic = "backward/forward sweep did not converge in " + std::to_string(opt.max_sweeps) +
                     " sweeps; final mismatch " + format_double(sol.max_mismatch) + " pu";
  return sol;
}

// Sum of computed slack output and specified injections, less losses.
// Zero for an exact solution.
inline double power_balance_residual(const PfNetwork& net, const PowerFlowSolution& sol) {
  double total = 0.0;
  for (std::size_t i = 0; i < net.size(); ++i) total += net.kind[i] == BusKind::slack ? sol.p_calc[i] : net.p_inj[i];
  return total - sol.losses_total;
}

// ---------------------------------------------------------------------------
// Model-level network assembly

namespace pf_detail {

// Loads, capacitor shunts and DER output of every model bus mapped by to_net.
inline void add_devices(const GridModel& m, const NetworkState& s, const ControlVector& c, PfNetwork& net,
                        const std::vector<std::size_t>& to_net) {
  for (std::size_t b = 0; b < m.buses.size(); ++b) {
    const auto nb = to_net[b];
    if (nb == SIZE_MAX) continue;
    net.p_inj[nb] -= s.load_p[b];
    net.q_inj[nb] -= s.load_q[b];
  }
  for (std::size_t k = 0; k < m.capacitors.size(); ++k) {
    const auto nb = to_net[m.bus_index(m.capacitors[k].bus)];
    if (nb != SIZE_MAX) net.b_shunt[nb] += m.capacitors[k].q_step * c.cap_state[k];
  }
  for (std::size_t d = 0; d < m.ders.size(); ++d) {
    const auto nb = to_net[m.bus_index(m.ders[d].bus)];
    if (nb == SIZE_MAX) continue;
    net.p_inj[nb] += effective_der_p(m.ders[d], c.der[d], s.der_avail[d]);
    net.q_inj[nb] += c.der[d].q;
  }
}

}  // namespace pf_detail

// Whole system: sub-transmission buses and every feeder in model order.
inline PfNetwork build_network(const GridModel& m, const NetworkState& s, const ControlVector& c) {
  PfNetwork net;
  std::vector<std::size_t> to_net(m.buses.size());
  for (std::size_t b = 0; b < m.buses.size(); ++b) to_net[b] = net.add_bus(m.buses[b].id, m.buses[b].kind, m.buses[b].v_set, b);
  for (std::size_t k = 0; k < m.branches.size(); ++k) {
    const auto& br = m.branches[k];
    const double ratio = br.tap ? tap_ratio(c.tap_position[k]) : 1.0;
    net.add_branch(m.from_index(br), m.to_index(br), br.r, br.x, br.b_shunt, ratio);
  }
  pf_detail::add_devices(m, s, c, net, to_net);
  return net;
}

// One feeder as a tree: network bus 0 is the head (fixed at head_voltage),
// then the feeder buses in model order. Head-bus load is not included.
inline PfNetwork build_feeder_network(const GridModel& m, std::size_t feeder, const NetworkState& s,
                                      const ControlVector& c, double head_voltage) {
  const auto& f = m.feeders.at(feeder);
  PfNetwork net;
  std::vector<std::size_t> to_net(m.buses.size(), SIZE_MAX);
  net.add_bus(m.buses[f.head_bus].id, BusKind::slack, head_voltage, f.head_bus);
  for (auto b : f.buses) to_net[b] = net.add_bus(m.buses[b].id, BusKind::pq, 1.0, b);
  std::size_t head_slot = 0;
  for (auto k : f.branches) {
    const auto& br = m.branches[k];
    auto map = [&](std::size_t b) { return b == f.head_bus ? head_slot : to_net[b]; };
    net.add_branch(map(m.from_index(br)), map(m.to_index(br)), br.r, br.x, br.b_shunt, 1.0);
  }
  pf_detail::add_devices(m, s, c, net, to_net);
  return net;
}

inline PowerFlowSolution solve_meshed(const GridModel& m, const NetworkState& s, const ControlVector& c,
                                      const NewtonOptions& opt = {}) {
  return solve_meshed(build_network(m, s, c), opt);
}

inline PowerFlowSolution solve_radial(const GridModel& m, std::size_t feeder, const NetworkState& s,
                                      const ControlVector& c, double head_voltage, const SweepOptions& opt = {}) {
  return solve_radial(build_feeder_network(m, feeder, s, c, head_voltage), opt);
}

// Real/reactive power drawn from the head bus into a solved feeder network.
struct HeadPower {
  double p = 0.0;
  double q = 0.0;
};
inline HeadPower feeder_head_import(const PowerFlowSolution& sol) { return {sol.p_calc.at(0), sol.q_calc.at(0)}; }

// ---------------------------------------------------------------------------
// Voltage limit checks

enum class Bound { over, under };

struct ViolationEntry {
  std::size_t bus = 0;
  std::string bus_id;
  double v_mag = 0.0;
  Bound bound = Bound::over;
  double deviation = 0.0;  // distance beyond the breached limit, pu
};

struct ViolationReport {
  std::vector<ViolationEntry> entries;
  std::size_t count() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  double worst_deviation() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.deviation);
    return w;
  }
};

// Buses of a solution outside [v_min, v_max]. A margin tightens both bounds.
// `only_level` restricts the check to one bus level when set.
inline ViolationReport total_violations(const PowerFlowSolution& sol, const GridModel& m, double margin = 0.0,
                                        std::optional<BusLevel> only_level = std::nullopt) {
  ViolationReport rep;
  for (std::size_t i = 0; i < sol.v_mag.size(); ++i) {
    const auto mb = sol.model_bus[i];
    if (mb >= m.buses.size()) continue;
    const auto& bus = m.buses[mb];
    if (only_level && bus.level != *only_level) continue;
    const double v = sol.v_mag[i];
    if (v > bus.v_max - margin) rep.entries.push_back({mb, bus.id, v, Bound::over, v - (bus.v_max - margin)});
    else if (v < bus.v_min + margin) rep.entries.push_back({mb, bus.id, v, Bound::under, (bus.v_min + margin) - v});
  }
  return rep;
}

}  // namespace crest
