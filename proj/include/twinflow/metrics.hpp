#pragma once

// Pure computations over flow results and packet traces: relative throughput
// and RTT bias of a paired TCP / TCP-over-UDP transfer, payload loss from a
// sender-side trace, handshake RTT extraction, per-path connectivity bias,
// grouped medians and CDF series. Everything here is deterministic and free
// of I/O; inputs are immutable views.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace twinflow::metrics {

// Median with the even-size convention: mean of the two central values.
inline double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of empty set");
  std::sort(values.begin(), values.end());
  std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

// Relative throughput difference of a flow pair, in percent. Positive values
// mean the UDP-encapsulated flow achieved higher throughput.
inline double throughput_bias(double tp_udp_kBps, double tp_tcp_kBps) {
  if (!(tp_udp_kBps > 0.0) || !(tp_tcp_kBps > 0.0)) {
    throw std::invalid_argument("throughput_bias requires positive inputs");
  }
  return (tp_udp_kBps - tp_tcp_kBps) / std::min(tp_tcp_kBps, tp_udp_kBps) * 100.0;
}

// Relative initial-RTT difference of a flow pair, in percent. Positive values
// mean the UDP-encapsulated flow saw the smaller handshake latency.
inline double rtt_bias(double rtt_tcp_ms, double rtt_udp_ms) {
  if (!(rtt_tcp_ms > 0.0) || !(rtt_udp_ms > 0.0)) {
    throw std::invalid_argument("rtt_bias requires positive inputs");
  }
  return (rtt_tcp_ms - rtt_udp_ms) / std::min(rtt_tcp_ms, rtt_udp_ms) * 100.0;
}

// Normalized per-packet record, derivable from a capture or emitted directly
// by the emulated flow engine. Times are microseconds; seq is the TCP
// sequence number of the first payload byte; flags are raw TCP flag bits.
struct PacketRecord {
  enum class Dir : std::uint8_t { out, in };
  std::int64_t t_us = 0;
  Dir dir = Dir::out;
  std::uint32_t seq = 0;
  std::uint32_t payload_len = 0;
  std::uint8_t flags = 0;
};

inline constexpr std::uint8_t kFlagFin = 0x01;
inline constexpr std::uint8_t kFlagSyn = 0x02;
inline constexpr std::uint8_t kFlagRst = 0x04;
inline constexpr std::uint8_t kFlagAck = 0x10;

// Payload loss in percent, from a sender-side segment trace: bytes sent more
// than once over distinct payload bytes. A byte range re-sent k times counts
// k times in the numerator.
inline double loss_pct(std::span<const PacketRecord> sender_trace) {
  if (sender_trace.empty()) throw std::invalid_argument("loss_pct: empty trace");
  // Merge sent [seq, seq+len) ranges; 32-bit wrap is out of scope at desk
  // flow sizes.
  std::map<std::uint64_t, std::uint64_t> covered;  // start -> end
  std::uint64_t total_sent = 0;
  for (const auto& r : sender_trace) {
    if (r.dir != PacketRecord::Dir::out || r.payload_len == 0) continue;
    std::uint64_t lo = r.seq;
    std::uint64_t hi = lo + r.payload_len;
    total_sent += r.payload_len;
    auto it = covered.upper_bound(lo);
    if (it != covered.begin()) {
      auto prev = std::prev(it);
      if (prev->second >= lo) {
        lo = prev->first;
        hi = std::max(hi, prev->second);
        it = covered.erase(prev);
      }
    }
    while (it != covered.end() && it->first <= hi) {
      hi = std::max(hi, it->second);
      it = covered.erase(it);
    }
    covered.emplace(lo, hi);
  }
  std::uint64_t distinct = 0;
  for (const auto& [lo, hi] : covered) distinct += hi - lo;
  if (distinct == 0) return 0.0;  // trace without payload
  std::uint64_t resent = total_sent - distinct;
  return static_cast<double>(resent) * 100.0 / static_cast<double>(distinct);
}

// Handshake RTT in milliseconds from a client-side trace: first SYN sent to
// first SYN+ACK received. Retransmitted SYNs keep the first send time, so the
// value reflects user-perceived connection latency.
inline double initial_rtt_ms(std::span<const PacketRecord> client_trace) {
  std::optional<std::int64_t> syn_t;
  for (const auto& r : client_trace) {
    if (r.dir == PacketRecord::Dir::out && (r.flags & kFlagSyn) && !(r.flags & kFlagAck)) {
      syn_t = r.t_us;
      break;
    }
  }
  if (!syn_t) throw std::invalid_argument("initial_rtt: no SYN in trace");
  for (const auto& r : client_trace) {
    if (r.dir == PacketRecord::Dir::in && (r.flags & kFlagSyn) && (r.flags & kFlagAck) &&
        r.t_us >= *syn_t) {
      return static_cast<double>(r.t_us - *syn_t) / 1000.0;
    }
  }
  throw std::invalid_argument("initial_rtt: no SYN+ACK in trace");
}

// One connection attempt outcome per transport on a path.
struct ConnAttempt {
  bool tcp_ok = false;
  bool udp_ok = false;
};

// Per-path connectivity bias in [-1, +1]: UDP success fraction minus TCP
// success fraction. +1 means every UDP attempt succeeded while every TCP
// attempt failed; -1 is the reverse; 0 is parity.
inline double conn_bias(std::span<const ConnAttempt> attempts) {
  if (attempts.empty()) throw std::invalid_argument("conn_bias: no attempts");
  double udp_ok = 0, tcp_ok = 0;
  for (const auto& a : attempts) {
    udp_ok += a.udp_ok ? 1.0 : 0.0;
    tcp_ok += a.tcp_ok ? 1.0 : 0.0;
  }
  double n = static_cast<double>(attempts.size());
  return udp_ok / n - tcp_ok / n;
}

// True when an origin tuple has never completed a UDP connection but has
// completed at least one TCP connection. No UDP and no TCP evidence is not
// "blocked": the path may simply be dead.
inline bool classify_blocked(std::span<const ConnAttempt> history) {
  bool any_udp = false, any_tcp = false;
  for (const auto& a : history) {
    any_udp = any_udp || a.udp_ok;
    any_tcp = any_tcp || a.tcp_ok;
  }
  return !any_udp && any_tcp;
}

// Minimal view of one measured pair, as carried by the result files.
struct PairObservation {
  std::string src;
  std::string dst;
  int port = 0;
  bool tcp_ok = false;
  bool udp_ok = false;
  // Present only when the respective flow (or both, for biases) succeeded.
  std::optional<double> tp_tcp_kBps;
  std::optional<double> rtt_tcp_ms;
  std::optional<double> tp_bias;
  std::optional<double> rtt_bias;
};

struct PathSummary {
  std::string src;
  std::string dst;
  double conn_bias = 0.0;
  std::optional<double> median_tp_bias;
  std::optional<double> median_rtt_bias;
  int n_pairs = 0;
};

// Node ordering for matrix output: nodes annotated with a region label are
// grouped by the label's rank in `region_order` (unknown regions last),
// then ordered lexically.
struct RegionLayout {
  std::map<std::string, std::string> node_region;
  std::vector<std::string> region_order;

  int region_rank(const std::string& node) const {
    auto it = node_region.find(node);
    if (it == node_region.end()) return static_cast<int>(region_order.size());
    for (std::size_t i = 0; i < region_order.size(); ++i) {
      if (region_order[i] == it->second) return static_cast<int>(i);
    }
    return static_cast<int>(region_order.size());
  }

  bool node_less(const std::string& a, const std::string& b) const {
    int ra = region_rank(a), rb = region_rank(b);
    if (ra != rb) return ra < rb;
    return a < b;
  }
};

// Per-(src, dst) summaries: connectivity bias over all pairs, medians of the
// bias metrics over pairs where both flows succeeded. Rows come out grouped
// by the configured region layout.
inline std::vector<PathSummary> aggregate_matrix(std::span<const PairObservation> results,
                                                 const RegionLayout& layout = {}) {
  std::map<std::pair<std::string, std::string>, std::vector<const PairObservation*>> paths;
  for (const auto& r : results) {
    paths[{r.src, r.dst}].push_back(&r);
  }
  std::vector<PathSummary> out;
  for (const auto& [key, obs] : paths) {
    PathSummary s;
    s.src = key.first;
    s.dst = key.second;
    s.n_pairs = static_cast<int>(obs.size());
    std::vector<ConnAttempt> attempts;
    std::vector<double> tps, rtts;
    for (const auto* o : obs) {
      attempts.push_back({o->tcp_ok, o->udp_ok});
      if (o->tp_bias) tps.push_back(*o->tp_bias);
      if (o->rtt_bias) rtts.push_back(*o->rtt_bias);
    }
    s.conn_bias = conn_bias(attempts);
    if (!tps.empty()) s.median_tp_bias = median(tps);
    if (!rtts.empty()) s.median_rtt_bias = median(rtts);
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [&](const PathSummary& a, const PathSummary& b) {
    if (a.src != b.src) return layout.node_less(a.src, b.src);
    return layout.node_less(a.dst, b.dst);
  });
  return out;
}

struct GroupedSummary {
  std::string dimension;  // "throughput" or "latency"
  bool above = false;     // false: value <= threshold, true: value > threshold
  double threshold = 0.0;
  int n_flows = 0;
  std::optional<double> median_bias;
};

// Splits successful pairs by the native TCP flow's magnitude against the
// thresholds and reports count plus median bias per group. Samples exactly at
// a threshold land in the lower group.
inline std::vector<GroupedSummary> split_summary(std::span<const PairObservation> results,
                                                 double tp_threshold_kBps = 200.0,
                                                 double rtt_threshold_ms = 50.0) {
  std::vector<double> tp_low, tp_high, rtt_low, rtt_high;
  for (const auto& r : results) {
    if (r.tp_bias && r.tp_tcp_kBps) {
      (*r.tp_tcp_kBps <= tp_threshold_kBps ? tp_low : tp_high).push_back(*r.tp_bias);
    }
    if (r.rtt_bias && r.rtt_tcp_ms) {
      (*r.rtt_tcp_ms <= rtt_threshold_ms ? rtt_low : rtt_high).push_back(*r.rtt_bias);
    }
  }
  auto make = [](std::string dim, bool above, double thr, const std::vector<double>& v) {
    GroupedSummary g;
    g.dimension = std::move(dim);
    g.above = above;
    g.threshold = thr;
    g.n_flows = static_cast<int>(v.size());
    if (!v.empty()) g.median_bias = median(v);
    return g;
  };
  return {
      make("throughput", false, tp_threshold_kBps, tp_low),
      make("throughput", true, tp_threshold_kBps, tp_high),
      make("latency", false, rtt_threshold_ms, rtt_low),
      make("latency", true, rtt_threshold_ms, rtt_high),
  };
}

// Empirical CDF: sorted (value, cumulative fraction) steps, one step per
// distinct value, final fraction exactly 1. Empty input yields an empty
// series.
inline std::vector<std::pair<double, double>> export_cdf(std::vector<double> values) {
  std::vector<std::pair<double, double>> series;
  if (values.empty()) return series;
  std::sort(values.begin(), values.end());
  double n = static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    double frac = static_cast<double>(i + 1) / n;
    if (!series.empty() && series.back().first == values[i]) {
      series.back().second = frac;
    } else {
      series.emplace_back(values[i], frac);
    }
  }
  return series;
}

}  // namespace twinflow::metrics
