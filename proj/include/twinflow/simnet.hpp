#pragma once

// Event-driven network simulation on a virtual microsecond clock. A
// DuplexPath carries complete IP packets between a client side and a server
// side, applying a link model (serialization rate, drop-tail queue,
// propagation delay, hop count) and the pathlab impairment profile per
// direction. A SimNode is one attached host: it speaks native IP and,
// optionally, runs a tunnel endpoint so that TCP segments can be carried
// with a UDP wire image through the same path.
//
// Everything is single-threaded and deterministic: identical seeds and
// inputs replay identical packet fates, and idle time costs nothing.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <stdexcept>
#include <vector>

#include "twinflow/packet.hpp"
#include "twinflow/pathlab.hpp"
#include "twinflow/tunnel.hpp"

namespace twinflow::sim {

using pathlab::Direction;
using pathlab::DropReason;
using pathlab::ImpairmentProfile;
using pathlab::SimTime;
using pathlab::WireProto;
using pathlab::kUsPerMs;
using pathlab::kUsPerSec;

class EventLoop {
 public:
  SimTime now() const { return now_; }

  void schedule(SimTime t, std::function<void()> fn) {
    if (t < now_) t = now_;
    queue_.push(Event{t, next_seq_++, std::move(fn)});
  }

  void schedule_in(SimTime delay, std::function<void()> fn) {
    schedule(now_ + delay, std::move(fn));
  }

  bool run_one() {
    if (queue_.empty()) return false;
    Event ev = std::move(const_cast<Event&>(queue_.top()));
    queue_.pop();
    now_ = ev.t;
    ev.fn();
    return true;
  }

  // Drains the queue. The event cap guards against runaway feedback loops in
  // misconfigured scenarios.
  void run_until_idle(std::uint64_t max_events = 100'000'000) {
    std::uint64_t n = 0;
    while (run_one()) {
      if (++n > max_events) throw std::runtime_error("event loop exceeded its event budget");
    }
  }

 private:
  struct Event {
    SimTime t;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Event& o) const { return t != o.t ? t > o.t : seq > o.seq; }
  };
  std::priority_queue<Event, std::vector<Event>, std::greater<>> queue_;
  SimTime now_ = 0;
  std::uint64_t next_seq_ = 0;
};

struct LinkConfig {
  std::optional<double> rate_Bps;       // serialization rate; nullopt = infinite
  std::int64_t queue_cap_bytes = 65536;  // drop-tail buffer ahead of the link
  SimTime prop_delay_us = 0;            // one-way propagation
};

struct PathConfig {
  LinkConfig link_to_server;
  LinkConfig link_to_client;
  ImpairmentProfile profile_to_server;
  ImpairmentProfile profile_to_client;
  int hop_count = 4;  // routers between the endpoints
  std::uint64_t seed = 1;

  void set_link(const LinkConfig& l) { link_to_server = link_to_client = l; }
  void set_profile(const ImpairmentProfile& p) { profile_to_server = profile_to_client = p; }
};

// One packet's fate on the path, for capture-style assertions.
struct WireRecord {
  SimTime t = 0;            // when the packet hit the path
  Direction dir = Direction::to_server;
  WireProto proto = WireProto::tcp;
  std::uint32_t size = 0;   // on-wire bytes
  std::uint64_t flow = 0;
  bool delivered = false;
  DropReason reason = DropReason::none;
  SimTime deliver_at = 0;
};

class DuplexPath {
 public:
  using Receiver = std::function<void(const net::Bytes&, SimTime)>;

  DuplexPath(EventLoop& loop, PathConfig cfg)
      : loop_(loop), cfg_(std::move(cfg)), state_(cfg_.seed) {
    cfg_.profile_to_server.validate();
    cfg_.profile_to_client.validate();
  }

  void attach_client(Receiver r) { to_client_rx_ = std::move(r); }
  void attach_server(Receiver r) { to_server_rx_ = std::move(r); }

  // Injects one complete IP packet. `flow` identifies the outer flow for NAT
  // bookkeeping; 0 means "not flow-associated" (probes, ICMP replies).
  void send(Direction dir, net::Bytes packet, std::uint64_t flow) {
    auto ip = net::parse_ipv4(packet);
    if (!ip) {
      // only IPv4 traffic traverses the emulated path
      record({loop_.now(), dir, WireProto::tcp, static_cast<std::uint32_t>(packet.size()), flow,
              false, DropReason::mtu, 0});
      return;
    }
    WireProto proto = to_wire_proto(ip->protocol);
    std::uint32_t size = static_cast<std::uint32_t>(packet.size());
    SimTime now = loop_.now();

    // TTL check against the hop count; an expiring packet turns into a
    // time-exceeded message from the responsible hop.
    if (ip->ttl <= cfg_.hop_count) {
      record({now, dir, proto, size, flow, false, DropReason::ttl_expired, 0});
      int hop = ip->ttl;
      std::uint32_t hop_addr = hop_address(dir, hop);
      net::Bytes reply = net::build_ipv4_icmp_error(hop_addr, ip->src, net::kIcmpTimeExceeded,
                                                    0, packet);
      double frac = static_cast<double>(hop) / (cfg_.hop_count + 1);
      SimTime detour = static_cast<SimTime>(2.0 * frac *
                                            static_cast<double>(link(dir).prop_delay_us));
      Direction back = reverse(dir);
      loop_.schedule(now + detour, [this, back, reply = std::move(reply)]() mutable {
        send(back, std::move(reply), 0);
      });
      return;
    }

    // Bottleneck serialization with a drop-tail queue.
    SimTime depart = now;
    LinkState& ls = link_state_[static_cast<int>(dir)];
    const LinkConfig& lc = link(dir);
    if (lc.rate_Bps) {
      SimTime start = std::max(now, ls.busy_until);
      double queued_bytes = static_cast<double>(start - now) * *lc.rate_Bps / kUsPerSec;
      if (queued_bytes + size > static_cast<double>(lc.queue_cap_bytes)) {
        record({now, dir, proto, size, flow, false, DropReason::queue_overflow, 0});
        return;
      }
      SimTime ser = static_cast<SimTime>(std::ceil(size / *lc.rate_Bps * kUsPerSec));
      ls.busy_until = start + ser;
      depart = ls.busy_until;
    }

    pathlab::TransitMeta meta{proto, size, dir, depart, flow};
    auto decision = pathlab::transit(meta, profile(dir), state_);
    record({now, dir, proto, size, flow, decision.delivered, decision.reason,
            decision.delivered ? decision.deliver_at + lc.prop_delay_us : 0});
    if (!decision.delivered) return;

    SimTime arrive = decision.deliver_at + lc.prop_delay_us;
    loop_.schedule(arrive, [this, dir, packet = std::move(packet)]() {
      Receiver& rx = dir == Direction::to_server ? to_server_rx_ : to_client_rx_;
      if (rx) rx(packet, loop_.now());
    });
  }

  const std::vector<WireRecord>& records() const { return records_; }

  std::uint64_t drop_count(DropReason r) const {
    std::uint64_t n = 0;
    for (const auto& rec : records_) {
      if (!rec.delivered && rec.reason == r) ++n;
    }
    return n;
  }

  const PathConfig& config() const { return cfg_; }

  static Direction reverse(Direction d) {
    return d == Direction::to_server ? Direction::to_client : Direction::to_server;
  }

 private:
  struct LinkState {
    SimTime busy_until = 0;
  };

  static WireProto to_wire_proto(std::uint8_t ip_proto) {
    switch (ip_proto) {
      case 6: return WireProto::tcp;
      case 17: return WireProto::udp;
      default: return WireProto::icmp;
    }
  }

  std::uint32_t hop_address(Direction dir, int hop) const {
    return (10u << 24) | (254u << 16) | (static_cast<std::uint32_t>(dir) << 8) |
           static_cast<std::uint32_t>(hop & 0xff);
  }

  const LinkConfig& link(Direction d) const {
    return d == Direction::to_server ? cfg_.link_to_server : cfg_.link_to_client;
  }
  const ImpairmentProfile& profile(Direction d) const {
    return d == Direction::to_server ? cfg_.profile_to_server : cfg_.profile_to_client;
  }

  void record(WireRecord r) { records_.push_back(r); }

  EventLoop& loop_;
  PathConfig cfg_;
  pathlab::PathState state_;
  LinkState link_state_[2];
  Receiver to_client_rx_;
  Receiver to_server_rx_;
  std::vector<WireRecord> records_;
};

// Outer flow identities for NAT bookkeeping. The tunnel's UDP socket pair is
// one long-lived mapping; every native TCP connection is its own.
inline constexpr std::uint64_t kTunnelFlow = 1;
inline constexpr std::uint64_t kFirstConnFlow = 2;

// One attached host: address, optional tunnel endpoint, protocol demux.
class SimNode {
 public:
  SimNode(EventLoop& loop, DuplexPath& path, Direction outbound, std::uint32_t inner_ip,
          std::uint32_t outer_ip)
      : loop_(loop), path_(path), outbound_(outbound), inner_ip_(inner_ip), outer_ip_(outer_ip) {
    auto rx = [this](const net::Bytes& pkt, SimTime t) { deliver(pkt, t); };
    if (outbound == Direction::to_server) {
      path.attach_client(rx);  // we are the client side, receiving to_client traffic
    } else {
      path.attach_server(rx);
    }
  }

  std::uint32_t inner_ip() const { return inner_ip_; }
  std::uint32_t outer_ip() const { return outer_ip_; }
  EventLoop& loop() { return loop_; }
  DuplexPath& path() { return path_; }
  Direction outbound() const { return outbound_; }

  // Tunnel endpoint: inner packets gain a UDP wire image toward `peer_outer`.
  void enable_tunnel(std::uint16_t udp_port, std::uint32_t peer_outer_ip, int interface_mtu = 1500) {
    tunnel_cfg_ = tunnel::TunnelConfig{};
    tunnel_cfg_->local_addr = net::ipv4_to_string(outer_ip_);
    tunnel_cfg_->peer_addr = net::ipv4_to_string(peer_outer_ip);
    tunnel_cfg_->udp_port = udp_port;
    tunnel_cfg_->interface_mtu = interface_mtu;
    tunnel_cfg_->validate();
    tunnel_peer_outer_ip_ = peer_outer_ip;
  }

  bool tunnel_enabled() const { return tunnel_cfg_.has_value(); }
  const tunnel::Counters& tunnel_counters() const { return tunnel_counters_; }
  int tunnel_inner_mtu() const { return tunnel_cfg_ ? tunnel_cfg_->inner_mtu() : 0; }

  // Sends an inner IP packet natively: the wire image is the packet itself.
  void send_native(net::Bytes packet, std::uint64_t flow) {
    path_.send(outbound_, std::move(packet), flow);
  }

  // Sends an inner IP packet through the tunnel: SYN MSS clamp, encapsulate,
  // UDP wire image. Oversize or malformed inner packets are dropped and
  // counted exactly like the live endpoint does.
  void send_tunneled(net::Bytes packet) {
    if (!tunnel_cfg_) throw std::logic_error("tunnel not enabled on this node");
    tunnel_counters_.egress.packets_in++;
    int ceiling = tunnel_cfg_->inner_mtu() - static_cast<int>(net::kIpv4HeaderLen + net::kTcpHeaderLen);
    if (ceiling > 0) net::clamp_syn_mss(packet, static_cast<std::uint16_t>(ceiling));
    auto outer = tunnel::encapsulate(packet, *tunnel_cfg_);
    if (!outer) {
      tunnel_counters_.egress.packets_dropped++;
      if (tunnel::validate_inner(packet, *tunnel_cfg_) == tunnel::EncapError::exceeds_mtu) {
        tunnel_counters_.egress.drop_oversize++;
      } else {
        tunnel_counters_.egress.drop_malformed++;
      }
      return;
    }
    tunnel_counters_.egress.packets_forwarded++;
    tunnel_counters_.egress.bytes_forwarded += outer->payload.size();
    net::Bytes wire = net::build_ipv4_udp(outer_ip_, tunnel_peer_outer_ip_, outer->src_port,
                                          outer->dst_port, outer->payload, 64,
                                          ip_ident_++);
    path_.send(outbound_, std::move(wire), kTunnelFlow);
  }

  // Demux hooks. on_tcp receives inner TCP/IP packets, with the wire kind.
  std::function<void(const net::Bytes& inner, bool tunneled, SimTime t)> on_tcp;
  std::function<void(const net::Ipv4View& ip, const net::UdpView& udp, SimTime t)> on_udp;
  std::function<void(const net::Ipv4View& ip, const net::IcmpView& icmp, SimTime t)> on_icmp;

 private:
  void deliver(const net::Bytes& wire, SimTime t) {
    auto ip = net::parse_ipv4(wire);
    if (!ip) return;
    switch (ip->protocol) {
      case 6:
        if (on_tcp) on_tcp(wire, false, t);
        break;
      case 17: {
        auto udp = net::parse_udp(ip->payload());
        if (!udp) return;
        if (tunnel_cfg_ && udp->dst_port == tunnel_cfg_->udp_port) {
          auto inner = tunnel::decapsulate(udp->payload, net::ipv4_to_string(ip->src),
                                           *tunnel_cfg_, tunnel_counters_);
          if (!inner) return;
          int ceiling =
              tunnel_cfg_->inner_mtu() - static_cast<int>(net::kIpv4HeaderLen + net::kTcpHeaderLen);
          if (ceiling > 0) net::clamp_syn_mss(*inner, static_cast<std::uint16_t>(ceiling));
          tunnel_counters_.ingress.packets_forwarded++;
          tunnel_counters_.ingress.bytes_forwarded += inner->size();
          auto inner_ip = net::parse_ipv4(*inner);
          if (inner_ip && inner_ip->protocol == 6 && on_tcp) {
            on_tcp(*inner, true, t);
          }
          // non-TCP inner packets are forwarded to no-one: the engine only
          // terminates TCP, mirroring a host with no other listeners
        } else if (on_udp) {
          on_udp(*ip, *udp, t);
        }
        break;
      }
      case 1: {
        auto icmp = net::parse_icmp(ip->payload());
        if (icmp && on_icmp) on_icmp(*ip, *icmp, t);
        break;
      }
      default:
        break;
    }
  }

  EventLoop& loop_;
  DuplexPath& path_;
  Direction outbound_;
  std::uint32_t inner_ip_;
  std::uint32_t outer_ip_;
  std::optional<tunnel::TunnelConfig> tunnel_cfg_;
  std::uint32_t tunnel_peer_outer_ip_ = 0;
  tunnel::Counters tunnel_counters_;
  std::uint16_t ip_ident_ = 1;
};

}  // namespace twinflow::sim
