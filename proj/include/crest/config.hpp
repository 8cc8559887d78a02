#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "crest/error.hpp"
#include "crest/model.hpp"

namespace crest {

// Planned duration of each leg of one control interval, in seconds.
struct TimingBudget {
  double interval_s = 300.0;
  double ems_solve_s = 45.0;
  double ems_to_dms_s = 15.0;
  double dms_solve_s = 30.0;
  double dms_der_roundtrip_s = 120.0;
  double dms_to_ems_s = 60.0;

  double budget_sum() const { return ems_solve_s + ems_to_dms_s + dms_solve_s + dms_der_roundtrip_s + dms_to_ems_s; }
  // Negative when the plan overruns the interval.
  double slack_s() const { return interval_s - budget_sum(); }

  bool operator==(const TimingBudget&) const = default;
};

inline void validate(const TimingBudget& b) {
  if (!(b.interval_s > 0 && b.ems_solve_s > 0 && b.ems_to_dms_s > 0 && b.dms_solve_s > 0 &&
        b.dms_der_roundtrip_s > 0 && b.dms_to_ems_s > 0))
    throw ValidationError("timing budget components must all be > 0");
}

enum class LatencyTier { ems_dms_link, substation_lan, fan, nan, ami };
enum class LatencyDistribution { constant, lognormal };

// Network paths a frame can take. The two EMS/DMS directions are configured
// separately; DER legs use the DER's own tier.
enum class LinkPath { ems_to_dms, dms_to_ems, substation_lan, fan, nan, ami };
inline constexpr std::array<LinkPath, 6> kAllPaths{LinkPath::ems_to_dms, LinkPath::dms_to_ems,
                                                   LinkPath::substation_lan, LinkPath::fan,
                                                   LinkPath::nan, LinkPath::ami};

inline std::string_view to_string(LatencyTier t) {
  switch (t) {
    case LatencyTier::ems_dms_link: return "ems_dms_link";
    case LatencyTier::substation_lan: return "substation_lan";
    case LatencyTier::fan: return "fan";
    case LatencyTier::nan: return "nan";
    case LatencyTier::ami: return "ami";
  }
  return "?";
}
inline std::string_view to_string(LatencyDistribution d) {
  return d == LatencyDistribution::constant ? "constant" : "lognormal";
}
inline std::string_view to_string(LinkPath p) {
  switch (p) {
    case LinkPath::ems_to_dms: return "ems_to_dms";
    case LinkPath::dms_to_ems: return "dms_to_ems";
    case LinkPath::substation_lan: return "substation_lan";
    case LinkPath::fan: return "fan";
    case LinkPath::nan: return "nan";
    case LinkPath::ami: return "ami";
  }
  return "?";
}
inline LatencyDistribution parse_distribution(std::string_view s) {
  return parse_enum(s, {LatencyDistribution::constant, LatencyDistribution::lognormal}, "latency distribution");
}
inline LinkPath parse_link_path(std::string_view s) {
  return parse_enum(s, {LinkPath::ems_to_dms, LinkPath::dms_to_ems, LinkPath::substation_lan, LinkPath::fan,
                        LinkPath::nan, LinkPath::ami},
                    "link path");
}
inline LatencyTier tier_of(LinkPath p) {
  switch (p) {
    case LinkPath::ems_to_dms:
    case LinkPath::dms_to_ems: return LatencyTier::ems_dms_link;
    case LinkPath::substation_lan: return LatencyTier::substation_lan;
    case LinkPath::fan: return LatencyTier::fan;
    case LinkPath::nan: return LatencyTier::nan;
    case LinkPath::ami: return LatencyTier::ami;
  }
  return LatencyTier::ems_dms_link;
}
inline LinkPath path_for(NetworkTier t) {
  switch (t) {
    case NetworkTier::substation_lan: return LinkPath::substation_lan;
    case NetworkTier::fan: return LinkPath::fan;
    case NetworkTier::nan: return LinkPath::nan;
    case NetworkTier::ami: return LinkPath::ami;
  }
  return LinkPath::nan;
}

inline constexpr double kUnlimitedBandwidth = std::numeric_limits<double>::infinity();

struct LatencyModel {
  LatencyTier tier = LatencyTier::ems_dms_link;
  LatencyDistribution distribution = LatencyDistribution::constant;
  double mean_s = 1.0;
  double sigma = 0.0;
  double bandwidth_bps = kUnlimitedBandwidth;
  double loss_prob = 0.0;

  bool operator==(const LatencyModel&) const = default;
};

inline void validate(const LatencyModel& m, std::string_view name, bool ami_realism = false) {
  const std::string n(name);
  if (!(m.mean_s > 0)) throw ValidationError("latency model '" + n + "': mean_s must be > 0");
  if (!(m.sigma >= 0)) throw ValidationError("latency model '" + n + "': sigma must be >= 0");
  if (!(m.bandwidth_bps > 0)) throw ValidationError("latency model '" + n + "': bandwidth_bps must be > 0");
  if (!(m.loss_prob >= 0 && m.loss_prob <= 1))
    throw ValidationError("latency model '" + n + "': loss_prob must lie in [0, 1]");
  if (ami_realism && m.tier == LatencyTier::ami && (m.bandwidth_bps < 1e4 || m.bandwidth_bps > 1.2e6))
    throw ValidationError("latency model '" + n + "': AMI bandwidth outside [10 kbps, 1.2 Mbps]");
}

// Default one-way models. The EMS/DMS legs follow the timing budget on a
// dedicated constant-latency link; DER tiers get progressively slower and
// more variable lognormal latencies.
inline LatencyModel default_latency(LinkPath p, const TimingBudget& b = {}) {
  switch (p) {
    case LinkPath::ems_to_dms:
      return {LatencyTier::ems_dms_link, LatencyDistribution::constant, b.ems_to_dms_s, 0.0, 64'000, 0.0};
    case LinkPath::dms_to_ems:
      return {LatencyTier::ems_dms_link, LatencyDistribution::constant, b.dms_to_ems_s, 0.0, 64'000, 0.0};
    case LinkPath::substation_lan:
      return {LatencyTier::substation_lan, LatencyDistribution::lognormal, 0.05, 0.3, 100e6, 0.0};
    case LinkPath::fan:
      return {LatencyTier::fan, LatencyDistribution::lognormal, 2.0, 0.5, 1e6, 0.0};
    case LinkPath::nan:
      return {LatencyTier::nan, LatencyDistribution::lognormal, 20.0, 0.6, 250e3, 0.0};
    case LinkPath::ami:
      return {LatencyTier::ami, LatencyDistribution::lognormal, 45.0, 0.8, 100e3, 0.0};
  }
  return {};
}

enum class PayloadKind { op_request, flexibility_report, der_dispatch, der_ack, scada_poll, scada_reply };

inline std::string_view to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::op_request: return "op_request";
    case PayloadKind::flexibility_report: return "flexibility_report";
    case PayloadKind::der_dispatch: return "der_dispatch";
    case PayloadKind::der_ack: return "der_ack";
    case PayloadKind::scada_poll: return "scada_poll";
    case PayloadKind::scada_reply: return "scada_reply";
  }
  return "?";
}

// Application payload sizes before framing, in bytes.
struct PayloadSizes {
  int op_request = 64;
  int flexibility_report = 96;
  int der_dispatch = 32;
  int der_ack = 16;
  int scada_poll = 16;
  int scada_reply = 240;

  int of(PayloadKind k) const {
    switch (k) {
      case PayloadKind::op_request: return op_request;
      case PayloadKind::flexibility_report: return flexibility_report;
      case PayloadKind::der_dispatch: return der_dispatch;
      case PayloadKind::der_ack: return der_ack;
      case PayloadKind::scada_poll: return scada_poll;
      case PayloadKind::scada_reply: return scada_reply;
    }
    return 0;
  }
  bool operator==(const PayloadSizes&) const = default;
};

// DNP3-like link framing: a 292-byte frame carries at most 250 payload
// bytes, so every started 250-byte fragment adds 42 bytes of overhead.
struct Framing {
  int fragment_payload = 250;
  int fragment_overhead = 42;

  int wire_bytes(int payload) const {
    if (payload <= 0) return 0;
    const int fragments = (payload + fragment_payload - 1) / fragment_payload;
    return payload + fragments * fragment_overhead;
  }
  bool operator==(const Framing&) const = default;
};

enum class TimingMode { simulated, wall_clock };

// Feeders and sub-transmission buses solved together by one EMS instance.
struct GroupSpec {
  std::string id;
  std::vector<std::string> feeders;
  std::vector<std::string> buses;
  bool operator==(const GroupSpec&) const = default;
};

struct SimConfig {
  TimingBudget budget;
  int horizon = 1;
  std::uint64_t seed = 1;
  double latency_scale = 1.0;
  std::array<LatencyModel, kAllPaths.size()> links{
      default_latency(LinkPath::ems_to_dms), default_latency(LinkPath::dms_to_ems),
      default_latency(LinkPath::substation_lan), default_latency(LinkPath::fan),
      default_latency(LinkPath::nan), default_latency(LinkPath::ami)};
  double loss_timeout_s = 10.0;
  PayloadSizes payload_bytes;
  Framing framing;
  double scada_poll_period_s = 0.0;  // 0 disables background polling
  TimingMode timing_mode = TimingMode::simulated;
  bool control_enabled = true;
  bool ami_realism = false;
  double ems_voltage_margin = 0.001;
  double dms_voltage_margin = 0.002;
  std::vector<GroupSpec> groups;  // empty: one group spanning the system

  LatencyModel& link(LinkPath p) { return links[static_cast<std::size_t>(p)]; }
  const LatencyModel& link(LinkPath p) const { return links[static_cast<std::size_t>(p)]; }

  bool operator==(const SimConfig&) const = default;
};

inline void validate(const SimConfig& c) {
  validate(c.budget);
  if (c.horizon < 1) throw ValidationError("horizon must be >= 1 interval");
  if (!(c.latency_scale > 0)) throw ValidationError("latency_scale must be > 0");
  if (!(c.loss_timeout_s > 0)) throw ValidationError("loss_timeout_s must be > 0");
  for (auto p : kAllPaths) validate(c.link(p), to_string(p), c.ami_realism);
  if (c.scada_poll_period_s != 0 && (c.scada_poll_period_s < 1 || c.scada_poll_period_s > 10))
    throw ValidationError("scada_poll_period_s must be 0 (off) or within [1, 10]");
}

}  // namespace crest
