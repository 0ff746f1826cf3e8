#pragma once

// Ground-truth path impairment emulator. A profile describes how a path
// treats traffic per wire protocol (blocking, policing, added latency, loss,
// MTU, NAT idle timeouts); transit() turns one packet's metadata into a
// deterministic deliver-or-drop decision. Emulated time is microseconds on a
// virtual clock, so long idle periods cost nothing to test.

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace twinflow::pathlab {

using SimTime = std::int64_t;  // microseconds

inline constexpr SimTime kUsPerSec = 1'000'000;
inline constexpr SimTime kUsPerMs = 1'000;

enum class WireProto : std::uint8_t { tcp, udp, icmp };

inline const char* to_string(WireProto p) {
  switch (p) {
    case WireProto::tcp: return "tcp";
    case WireProto::udp: return "udp";
    case WireProto::icmp: return "icmp";
  }
  return "?";
}

// to_server packets leave the measuring client (outbound through its access
// network); to_client packets come back in.
enum class Direction : std::uint8_t { to_server, to_client };

enum class DropReason : std::uint8_t {
  none,
  blocked,        // protocol blackholed
  mtu,            // exceeds path MTU
  icmp_size,      // large-ICMP filter
  rate_limit,     // UDP policer out of tokens
  loss,           // random loss
  nat_expired,    // inbound with no live NAT mapping
  queue_overflow,  // bottleneck queue full (link model, not profile)
  ttl_expired,     // hop count exceeded the packet's TTL (link model)
};

inline const char* to_string(DropReason r) {
  switch (r) {
    case DropReason::none: return "none";
    case DropReason::blocked: return "blocked";
    case DropReason::mtu: return "mtu";
    case DropReason::icmp_size: return "icmp-size";
    case DropReason::rate_limit: return "rate-limit";
    case DropReason::loss: return "loss";
    case DropReason::nat_expired: return "nat-expired";
    case DropReason::queue_overflow: return "queue-overflow";
    case DropReason::ttl_expired: return "ttl-expired";
  }
  return "?";
}

struct ImpairmentProfile {
  bool udp_block = false;
  bool tcp_block = false;
  std::optional<double> udp_rate_limit_kBps;   // policer rate, 1 kB = 1000 B
  double extra_latency_udp_ms = 0.0;
  double extra_latency_tcp_ms = 0.0;
  double loss_rate_udp = 0.0;
  double loss_rate_tcp = 0.0;
  std::optional<int> path_mtu;                 // on-wire bytes
  std::optional<double> nat_udp_idle_timeout_s;
  std::optional<double> nat_tcp_idle_timeout_s;
  std::optional<int> large_icmp_block_threshold;  // on-wire bytes

  void validate() const {
    auto positive = [](auto v, const char* what) {
      if (v <= 0) throw std::invalid_argument(std::string("profile: ") + what + " must be positive");
    };
    if (udp_rate_limit_kBps) positive(*udp_rate_limit_kBps, "udp_rate_limit_kBps");
    if (path_mtu) positive(*path_mtu, "path_mtu");
    if (nat_udp_idle_timeout_s) positive(*nat_udp_idle_timeout_s, "nat_udp_idle_timeout_s");
    if (nat_tcp_idle_timeout_s) positive(*nat_tcp_idle_timeout_s, "nat_tcp_idle_timeout_s");
    if (large_icmp_block_threshold) positive(*large_icmp_block_threshold, "large_icmp_block_threshold");
    if (loss_rate_udp < 0 || loss_rate_udp > 1 || loss_rate_tcp < 0 || loss_rate_tcp > 1) {
      throw std::invalid_argument("profile: loss rates must be within [0,1]");
    }
    if (extra_latency_udp_ms < 0 || extra_latency_tcp_ms < 0) {
      throw std::invalid_argument("profile: latencies must be nonnegative");
    }
  }

  bool is_neutral() const {
    return !udp_block && !tcp_block && !udp_rate_limit_kBps && extra_latency_udp_ms == 0 &&
           extra_latency_tcp_ms == 0 && loss_rate_udp == 0 && loss_rate_tcp == 0 && !path_mtu &&
           !nat_udp_idle_timeout_s && !nat_tcp_idle_timeout_s && !large_icmp_block_threshold;
  }

  double extra_latency_ms(WireProto p) const {
    if (p == WireProto::udp) return extra_latency_udp_ms;
    if (p == WireProto::tcp) return extra_latency_tcp_ms;
    return 0.0;
  }

  double loss_rate(WireProto p) const {
    if (p == WireProto::udp) return loss_rate_udp;
    if (p == WireProto::tcp) return loss_rate_tcp;
    return 0.0;
  }

  std::optional<double> nat_idle_timeout_s(WireProto p) const {
    if (p == WireProto::udp) return nat_udp_idle_timeout_s;
    if (p == WireProto::tcp) return nat_tcp_idle_timeout_s;
    return std::nullopt;
  }

  // Flat key-value text, one entry per line: `key = value` or `key value`.
  // '#' starts a comment; "none" clears an optional field.
  static ImpairmentProfile parse(std::istream& in) {
    ImpairmentProfile p;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::string key, value;
      {
        std::istringstream ls(line);
        ls >> key;
        if (key.empty()) continue;
        ls >> value;
        if (value == "=") ls >> value;
      }
      auto bad = [&](const std::string& why) {
        throw std::invalid_argument("profile line " + std::to_string(lineno) + ": " + why);
      };
      if (value.empty()) bad("missing value for '" + key + "'");
      auto as_bool = [&]() {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        bad("expected boolean, got '" + value + "'");
        return false;
      };
      auto as_double = [&]() {
        try {
          std::size_t pos = 0;
          double d = std::stod(value, &pos);
          if (pos != value.size()) throw std::invalid_argument(value);
          return d;
        } catch (const std::exception&) {
          bad("expected number, got '" + value + "'");
          return 0.0;
        }
      };
      bool none = (value == "none");
      if (key == "udp_block") p.udp_block = as_bool();
      else if (key == "tcp_block") p.tcp_block = as_bool();
      else if (key == "udp_rate_limit_kBps") p.udp_rate_limit_kBps = none ? std::nullopt : std::optional(as_double());
      else if (key == "extra_latency_udp_ms") p.extra_latency_udp_ms = as_double();
      else if (key == "extra_latency_tcp_ms") p.extra_latency_tcp_ms = as_double();
      else if (key == "loss_rate_udp") p.loss_rate_udp = as_double();
      else if (key == "loss_rate_tcp") p.loss_rate_tcp = as_double();
      else if (key == "path_mtu") p.path_mtu = none ? std::nullopt : std::optional(static_cast<int>(as_double()));
      else if (key == "nat_udp_idle_timeout_s") p.nat_udp_idle_timeout_s = none ? std::nullopt : std::optional(as_double());
      else if (key == "nat_tcp_idle_timeout_s") p.nat_tcp_idle_timeout_s = none ? std::nullopt : std::optional(as_double());
      else if (key == "large_icmp_block_threshold") p.large_icmp_block_threshold = none ? std::nullopt : std::optional(static_cast<int>(as_double()));
      else bad("unknown key '" + key + "'");
    }
    p.validate();
    return p;
  }
};

struct TransitMeta {
  WireProto proto = WireProto::tcp;
  std::uint32_t size = 0;       // on-wire bytes
  Direction dir = Direction::to_server;
  SimTime t = 0;
  std::uint64_t flow = 0;       // outer flow identity, keys NAT mappings
};

struct TransitDecision {
  bool delivered = false;
  SimTime deliver_at = 0;
  DropReason reason = DropReason::none;

  static TransitDecision deliver(SimTime at) { return {true, at, DropReason::none}; }
  static TransitDecision drop(DropReason r) { return {false, 0, r}; }
};

// Mutable per-path state: token buckets, NAT table, loss generators. One
// instance per emulated path; calls must be serialized. All evolution is a
// deterministic function of (seed, packet sequence).
class PathState {
 public:
  explicit PathState(std::uint64_t seed = 0)
      : loss_rng_tcp_(seed * 3 + 1), loss_rng_udp_(seed * 3 + 2), loss_rng_icmp_(seed * 3 + 3) {}

  // true with probability p, drawn from the protocol's own stream so that
  // impairments of one protocol never perturb another's decisions
  bool draw_loss(WireProto proto, double p) {
    if (p <= 0.0) return false;
    auto& rng = proto == WireProto::udp   ? loss_rng_udp_
                : proto == WireProto::tcp ? loss_rng_tcp_
                                          : loss_rng_icmp_;
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
  }

  // Token-bucket policer, bucket depth of one second at `rate`. Starts full.
  bool take_tokens(Direction dir, double rate_Bps, std::uint32_t size, SimTime t) {
    Bucket& b = buckets_[static_cast<int>(dir)];
    double depth = rate_Bps;  // 1 s worth
    if (!b.initialized) {
      b.tokens = depth;
      b.last = t;
      b.initialized = true;
    }
    b.tokens = std::min(depth, b.tokens + rate_Bps * static_cast<double>(t - b.last) / kUsPerSec);
    b.last = t;
    if (b.tokens < static_cast<double>(size)) return false;
    b.tokens -= static_cast<double>(size);
    return true;
  }

  void nat_note_outbound(WireProto proto, std::uint64_t flow, SimTime t) {
    nat_[{proto, flow}] = t;
  }

  // Inbound admission: mapping must exist and have been active within the
  // timeout. Delivered packets refresh the mapping (bidirectional timer).
  bool nat_admit_inbound(WireProto proto, std::uint64_t flow, SimTime t, double timeout_s) {
    auto it = nat_.find({proto, flow});
    if (it == nat_.end()) return false;
    if (static_cast<double>(t - it->second) > timeout_s * kUsPerSec) {
      nat_.erase(it);
      return false;
    }
    it->second = t;
    return true;
  }

  void check_monotonic(Direction dir, SimTime t) {
    SimTime& last = last_t_[static_cast<int>(dir)];
    if (t < last) {
      throw std::invalid_argument("transit: decreasing timestamp within a direction");
    }
    last = t;
  }

 private:
  struct Bucket {
    bool initialized = false;
    double tokens = 0;
    SimTime last = 0;
  };
  Bucket buckets_[2];
  std::map<std::pair<WireProto, std::uint64_t>, SimTime> nat_;
  SimTime last_t_[2] = {0, 0};
  std::mt19937_64 loss_rng_tcp_;
  std::mt19937_64 loss_rng_udp_;
  std::mt19937_64 loss_rng_icmp_;
};

// One packet through the impaired path. Check order: protocol block, MTU,
// large-ICMP filter, NAT bookkeeping for outbound, UDP policer, random loss,
// NAT admission for inbound, then delivery with the protocol's extra latency.
inline TransitDecision transit(const TransitMeta& meta, const ImpairmentProfile& profile,
                               PathState& state) {
  state.check_monotonic(meta.dir, meta.t);

  if ((meta.proto == WireProto::udp && profile.udp_block) ||
      (meta.proto == WireProto::tcp && profile.tcp_block)) {
    return TransitDecision::drop(DropReason::blocked);
  }
  if (profile.path_mtu && meta.size > static_cast<std::uint32_t>(*profile.path_mtu)) {
    return TransitDecision::drop(DropReason::mtu);
  }
  if (meta.proto == WireProto::icmp && profile.large_icmp_block_threshold &&
      meta.size > static_cast<std::uint32_t>(*profile.large_icmp_block_threshold)) {
    return TransitDecision::drop(DropReason::icmp_size);
  }

  // The NAT sits at the client's access edge: outbound packets refresh the
  // mapping before anything else on the path can lose them.
  auto nat_timeout = profile.nat_idle_timeout_s(meta.proto);
  if (nat_timeout && meta.dir == Direction::to_server) {
    state.nat_note_outbound(meta.proto, meta.flow, meta.t);
  }

  if (meta.proto == WireProto::udp && profile.udp_rate_limit_kBps) {
    if (!state.take_tokens(meta.dir, *profile.udp_rate_limit_kBps * 1000.0, meta.size, meta.t)) {
      return TransitDecision::drop(DropReason::rate_limit);
    }
  }
  if (state.draw_loss(meta.proto, profile.loss_rate(meta.proto))) {
    return TransitDecision::drop(DropReason::loss);
  }
  if (nat_timeout && meta.dir == Direction::to_client) {
    if (!state.nat_admit_inbound(meta.proto, meta.flow, meta.t, *nat_timeout)) {
      return TransitDecision::drop(DropReason::nat_expired);
    }
  }

  SimTime at = meta.t + static_cast<SimTime>(profile.extra_latency_ms(meta.proto) * kUsPerMs);
  return TransitDecision::deliver(at);
}

}  // namespace twinflow::pathlab
