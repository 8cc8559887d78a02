#pragma once

// Voltage-load sensitivity matrix of a radial feeder.
//
// Sign convention: columns are positive *injections* at a feeder bus, so a
// load increase is a negative dp. Rows and columns follow the feeder's bus
// order (head bus excluded; its voltage is the fixed boundary condition).
// Entries come from central finite differences of the backward/forward
// sweep, which also yields the sensitivity of the power drawn at the head.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crest/error.hpp"
#include "crest/model.hpp"
#include "crest/powerflow.hpp"

namespace crest {

inline constexpr double kVlsmPerturbation = 1e-3;

struct VlsMatrix {
  std::string feeder_id;
  std::vector<std::size_t> buses;  // model bus index per row/column
  PowerFlowSolution base_point;
  Eigen::MatrixXd s_p;  // dV_i / dP_j
  Eigen::MatrixXd s_q;  // dV_i / dQ_j
  // Head import sensitivities, d(P_head)/dP_j etc.
  Eigen::RowVectorXd head_p_dp, head_p_dq, head_q_dp, head_q_dq;
  double perturbation_size = kVlsmPerturbation;

  // Inputs the base point was solved from; a mismatch means the matrix is stale.
  double head_voltage = 1.0;
  std::vector<double> base_p_inj, base_q_inj, base_b_shunt;

  std::size_t size() const { return buses.size(); }
  Eigen::VectorXd base_voltages() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(size()));
    for (std::size_t i = 0; i < size(); ++i) v(static_cast<Eigen::Index>(i)) = base_point.v_mag[i + 1];
    return v;
  }
  HeadPower base_head() const { return feeder_head_import(base_point); }

  bool matches(const PfNetwork& net) const {
    return net.v_set[0] == head_voltage && net.p_inj == base_p_inj && net.q_inj == base_q_inj &&
           net.b_shunt == base_b_shunt;
  }
};

// Sensitivities of a feeder network assembled by build_feeder_network
// (network bus 0 is the head).
inline VlsMatrix compute_vlsm(const PfNetwork& net, double h = kVlsmPerturbation, std::string feeder_id = {}) {
  const std::size_t n = net.size() - 1;
  VlsMatrix m;
  m.feeder_id = std::move(feeder_id);
  m.perturbation_size = h;
  m.head_voltage = net.v_set[0];
  m.base_p_inj = net.p_inj;
  m.base_q_inj = net.q_inj;
  m.base_b_shunt = net.b_shunt;
  for (std::size_t i = 1; i <= n; ++i) m.buses.push_back(net.model_bus[i]);
  m.base_point = solve_radial(net);
  if (!m.base_point.converged)
    throw ConvergenceError("VLSM base point of feeder '" + m.feeder_id + "' did not converge: " +
                           m.base_point.diagnostic);
  const auto ni = static_cast<Eigen::Index>(n);
  m.s_p.resize(ni, ni);
  m.s_q.resize(ni, ni);
  m.head_p_dp.resize(ni);
  m.head_p_dq.resize(ni);
  m.head_q_dp.resize(ni);
  m.head_q_dq.resize(ni);

  PfNetwork work = net;
  for (std::size_t j = 0; j < n; ++j) {
    for (int channel = 0; channel < 2; ++channel) {
      auto& inj = channel == 0 ? work.p_inj : work.q_inj;
      const double base = inj[j + 1];
      inj[j + 1] = base + h;
      const auto plus = solve_radial(work);
      inj[j + 1] = base - h;
      const auto minus = solve_radial(work);
      inj[j + 1] = base;
      if (!plus.converged || !minus.converged)
        throw ConvergenceError("VLSM perturbation of bus '" + net.names[j + 1] + "' on channel " +
                               (channel == 0 ? "P" : "Q") + " did not converge");
      auto& s = channel == 0 ? m.s_p : m.s_q;
      const auto col = static_cast<Eigen::Index>(j);
      for (std::size_t i = 0; i < n; ++i)
        s(static_cast<Eigen::Index>(i), col) = (plus.v_mag[i + 1] - minus.v_mag[i + 1]) / (2 * h);
      (channel == 0 ? m.head_p_dp : m.head_p_dq)(col) = (plus.p_calc[0] - minus.p_calc[0]) / (2 * h);
      (channel == 0 ? m.head_q_dp : m.head_q_dq)(col) = (plus.q_calc[0] - minus.q_calc[0]) / (2 * h);
    }
  }
  return m;
}

inline VlsMatrix compute_vlsm(const GridModel& model, std::size_t feeder, const NetworkState& state,
                              const ControlVector& controls, double head_voltage, double h = kVlsmPerturbation) {
  return compute_vlsm(build_feeder_network(model, feeder, state, controls, head_voltage), h, model.feeders[feeder].id);
}

// Linear voltage change for per-bus injection changes (feeder bus order).
inline Eigen::VectorXd predict_dv(const VlsMatrix& m, std::span<const double> dp, std::span<const double> dq) {
  if (dp.size() != m.size() || dq.size() != m.size())
    throw DimensionError("predict_dv: expected " + std::to_string(m.size()) + " entries per channel, got " +
                         std::to_string(dp.size()) + " and " + std::to_string(dq.size()));
  const Eigen::Map<const Eigen::VectorXd> p(dp.data(), static_cast<Eigen::Index>(dp.size()));
  const Eigen::Map<const Eigen::VectorXd> q(dq.data(), static_cast<Eigen::Index>(dq.size()));
  return m.s_p * p + m.s_q * q;
}

}  // namespace crest
