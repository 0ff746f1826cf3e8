#pragma once

// TCP-shaped reliable transfer engine for the emulated path. Connections
// speak real IPv4/TCP packet bytes (so the tunnel codec and MSS clamping
// apply verbatim), run a classic congestion controller (slow start, AIMD,
// fast retransmit/recovery, RTO with Karn sampling), and serve the
// measurement protocol: the client sends a 4-byte big-endian payload size
// right after the handshake, the server answers with exactly that many bytes
// and closes. Both sides emit normalized packet records for the metrics
// layer.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "twinflow/metrics.hpp"
#include "twinflow/packet.hpp"
#include "twinflow/simnet.hpp"

namespace twinflow::sim {

struct EngineConfig {
  int mss = 1460;            // native MSS; the tunnel clamps what it carries
  int iw_segments = 10;      // initial window (RFC 6928 default)
  SimTime min_rto = 200 * kUsPerMs;
  SimTime initial_rto = 1 * kUsPerSec;
  SimTime max_rto = 60 * kUsPerSec;
  SimTime connect_timeout = 5 * kUsPerSec;
  SimTime stall_timeout = 30 * kUsPerSec;
  int max_rto_backoffs = 12;
  double max_cwnd_segments = 1 << 14;
};

enum class FlowFailure { none, connect_timeout, reset, stall };

inline const char* to_string(FlowFailure f) {
  switch (f) {
    case FlowFailure::none: return "none";
    case FlowFailure::connect_timeout: return "connect-timeout";
    case FlowFailure::reset: return "reset";
    case FlowFailure::stall: return "stall";
  }
  return "?";
}

struct FlowOutcome {
  bool success = false;
  FlowFailure failure = FlowFailure::none;
  std::uint64_t bytes_received = 0;
  SimTime start = 0;
  SimTime end = 0;
  std::vector<metrics::PacketRecord> client_records;
};

// Server response shaping: normally the requested bytes are sent in one go;
// a second phase after an idle gap models long-lived sessions for the NAT
// timeout scenarios.
struct ServerBehavior {
  std::uint64_t max_request_bytes = 1ull << 26;
  struct SecondPhase {
    SimTime idle_gap = 0;
    std::uint64_t bytes = 0;
  };
  std::optional<SecondPhase> second_phase;
};

class TcpHost {
 public:
  struct ConnectParams {
    bool tunneled = false;
    std::uint16_t src_port = 0;
    std::uint32_t dst_ip = 0;
    std::uint16_t dst_port = 0;
    std::uint64_t request_bytes = 0;
    std::optional<std::uint64_t> expected_total;  // defaults to request_bytes
    bool handshake_only = false;
    std::function<void(const FlowOutcome&)> on_done;
  };

  TcpHost(SimNode& node, EngineConfig cfg) : node_(node), cfg_(cfg) {
    node_.on_tcp = [this](const net::Bytes& inner, bool tunneled, SimTime t) {
      on_segment(inner, tunneled, t);
    };
  }

  void listen(std::uint16_t port, ServerBehavior behavior = {}) {
    listeners_[port] = behavior;
  }

  void connect(const ConnectParams& p) {
    auto conn = std::make_shared<Conn>();
    conn->host = this;
    conn->is_client = true;
    conn->tunneled = p.tunneled;
    conn->local_ip = node_.inner_ip();
    conn->remote_ip = p.dst_ip;
    conn->local_port = p.src_port;
    conn->remote_port = p.dst_port;
    conn->request_bytes = p.request_bytes;
    conn->expected_total = p.expected_total.value_or(p.request_bytes);
    conn->handshake_only = p.handshake_only;
    conn->on_done = p.on_done;
    conn->iss = next_iss();
    conn->snd_una = conn->iss;
    conn->snd_nxt = conn->iss;
    conn->rto = cfg_.initial_rto;
    conn->start_time = loop().now();
    conn->last_progress = conn->start_time;
    conns_[key_of(*conn)] = conn;

    send_syn(*conn);
    arm_rto(conn);
    // absolute connect deadline
    loop().schedule(conn->start_time + cfg_.connect_timeout, [conn] {
      if (conn->state == State::syn_sent) {
        conn->host->fail(*conn, FlowFailure::connect_timeout);
      }
    });
  }

  // Sender-side data trace of the server connection talking to `peer_port`.
  const std::vector<metrics::PacketRecord>* find_server_trace(bool tunneled,
                                                              std::uint16_t peer_port) const {
    for (const auto& [key, conn] : conns_) {
      if (!conn->is_client && conn->tunneled == tunneled && conn->remote_port == peer_port) {
        return &conn->records;
      }
    }
    return nullptr;
  }

  std::uint64_t request_errors() const { return request_errors_; }
  const EngineConfig& config() const { return cfg_; }

 private:
  enum class State { syn_sent, syn_rcvd, established, done, failed };

  struct Conn {
    TcpHost* host = nullptr;
    bool is_client = false;
    bool tunneled = false;
    std::uint32_t local_ip = 0, remote_ip = 0;
    std::uint16_t local_port = 0, remote_port = 0;
    State state = State::syn_sent;

    std::uint32_t iss = 0, irs = 0;
    std::uint32_t snd_una = 0, snd_nxt = 0, rcv_nxt = 0;

    // client
    std::uint64_t request_bytes = 0;
    std::uint64_t expected_total = 0;
    bool handshake_only = false;
    bool request_acked = false;
    std::map<std::uint32_t, std::uint32_t> ooo;  // out-of-order [start, end)
    bool fin_seen = false;
    std::function<void(const FlowOutcome&)> on_done;
    SimTime start_time = 0, end_time = 0;
    SimTime last_progress = 0;
    std::uint64_t stall_epoch = 0;

    // server
    std::uint64_t send_total = 0;      // bytes promised in the current stream
    std::uint64_t next_unsent = 0;     // offset of the first unsent byte
    bool fin_sent = false;
    bool fin_pending = false;          // all bytes queued, FIN not yet sent
    ServerBehavior behavior;
    bool second_phase_armed = false;
    int peer_mss = 0;

    // congestion control and reliability
    double cwnd = 10;
    double ssthresh = 1e9;
    int dupacks = 0;
    bool in_recovery = false;
    std::uint32_t recover = 0;
    double srtt_us = 0, rttvar_us = 0;
    SimTime rto = 0;
    int backoffs = 0;
    std::uint64_t rto_epoch = 0;
    bool syn_retransmitted = false;
    std::uint32_t karn_until = 0;  // sequence below which sends are retransmissions
    std::map<std::uint32_t, SimTime> send_times;  // end_seq -> first-send time

    std::vector<metrics::PacketRecord> records;

    // the server's byte stream carries only payload: first data byte sits
    // right after the SYN+ACK's sequence number
    std::uint32_t data_start() const { return (is_client ? irs : iss) + 1; }
    std::uint64_t delivered() const {
      std::uint32_t start = data_start();
      return rcv_nxt >= start ? rcv_nxt - start : 0;
    }
  };
  using ConnPtr = std::shared_ptr<Conn>;

  // connections are keyed by wire kind plus the remote (ip, port) and local
  // port; both flows of a pair share the inner 4-tuple but not the wire kind
  using Key = std::tuple<bool, std::uint32_t, std::uint16_t, std::uint16_t>;

  static Key key_of(const Conn& c) {
    return {c.tunneled, c.remote_ip, c.remote_port, c.local_port};
  }

  EventLoop& loop() { return node_.loop(); }

  std::uint32_t next_iss() { return 1000 + 1000000u * iss_counter_++; }

  static std::uint64_t native_flow_id(const Conn& c) {
    // order-independent hash so both ends agree on the mapping key
    std::uint64_t lo = (static_cast<std::uint64_t>(std::min(c.local_ip, c.remote_ip)) << 16) |
                       std::min(c.local_port, c.remote_port);
    std::uint64_t hi = (static_cast<std::uint64_t>(std::max(c.local_ip, c.remote_ip)) << 16) |
                       std::max(c.local_port, c.remote_port);
    std::uint64_t h = 1469598103934665603ull;
    for (std::uint64_t v : {lo, hi}) {
      h ^= v;
      h *= 1099511628211ull;
    }
    return kFirstConnFlow + (h % (1ull << 62));
  }

  void emit(Conn& c, std::uint8_t flags, std::uint32_t seq, std::uint32_t ack,
            std::uint32_t payload_len, bool record_payload_seq_relative = false) {
    net::TcpSegmentSpec s;
    s.src_ip = c.local_ip;
    s.dst_ip = c.remote_ip;
    s.src_port = c.local_port;
    s.dst_port = c.remote_port;
    s.seq = seq;
    s.ack = ack;
    s.flags = flags;
    if (flags & net::kTcpSyn) s.mss_option = static_cast<std::uint16_t>(cfg_.mss);
    std::vector<std::uint8_t> payload;
    if (payload_len > 0) {
      payload.resize(payload_len);
      if (c.is_client && payload_len == 4) {
        net::store_be32(payload.data(), static_cast<std::uint32_t>(c.request_bytes));
      } else {
        for (std::uint32_t i = 0; i < payload_len; ++i) {
          payload[i] = static_cast<std::uint8_t>((seq + i) & 0xff);
        }
      }
      s.payload = payload;
    }
    net::Bytes wire = net::build_ipv4_tcp(s, ip_ident_++);

    metrics::PacketRecord rec;
    rec.t_us = loop().now();
    rec.dir = metrics::PacketRecord::Dir::out;
    rec.seq = record_payload_seq_relative ? seq - c.data_start() : seq;
    rec.payload_len = payload_len;
    rec.flags = flags;
    c.records.push_back(rec);

    if (c.tunneled) {
      node_.send_tunneled(std::move(wire));
    } else {
      node_.send_native(std::move(wire), native_flow_id(c));
    }
  }

  void send_syn(Conn& c) {
    c.snd_nxt = c.iss + 1;
    emit(c, net::kTcpSyn, c.iss, 0, 0);
  }

  void send_request(Conn& c) {
    emit(c, net::kTcpAck | net::kTcpPsh, c.iss + 1, c.rcv_nxt, 4);
    c.snd_nxt = c.iss + 5;
  }

  void send_ack(Conn& c) { emit(c, net::kTcpAck, c.snd_nxt, c.rcv_nxt, 0); }

  void send_rst(Conn& c) { emit(c, net::kTcpRst | net::kTcpAck, c.snd_nxt, c.rcv_nxt, 0); }

  // ---- timers ---------------------------------------------------------

  void arm_rto(ConnPtr c) {
    std::uint64_t epoch = ++c->rto_epoch;
    loop().schedule(loop().now() + c->rto, [c, epoch] {
      if (c->rto_epoch == epoch && c->state != State::done && c->state != State::failed) {
        c->host->on_rto(c);
      }
    });
  }

  void cancel_rto(Conn& c) { ++c.rto_epoch; }

  void arm_stall_timer(ConnPtr c) {
    if (!c->is_client || c->handshake_only) return;
    std::uint64_t epoch = ++c->stall_epoch;
    SimTime deadline = c->last_progress + cfg_.stall_timeout;
    loop().schedule(deadline, [c, epoch] {
      if (c->stall_epoch != epoch || c->state == State::done || c->state == State::failed) return;
      if (c->host->loop().now() - c->last_progress >= c->host->cfg_.stall_timeout) {
        c->host->fail(*c, FlowFailure::stall);
      } else {
        c->host->arm_stall_timer(c);
      }
    });
  }

  void note_progress(Conn& c) {
    c.last_progress = loop().now();
  }

  void on_rto(ConnPtr cp) {
    Conn& c = *cp;
    if (c.backoffs >= cfg_.max_rto_backoffs) {
      if (c.is_client) {
        fail(c, c.state == State::syn_sent ? FlowFailure::connect_timeout : FlowFailure::stall);
      } else {
        c.state = State::failed;  // server gives up quietly
      }
      return;
    }
    c.backoffs++;
    c.rto = std::min<SimTime>(c.rto * 2, cfg_.max_rto);
    c.send_times.clear();  // Karn: no sampling across retransmissions

    switch (c.state) {
      case State::syn_sent:
        c.syn_retransmitted = true;
        emit(c, net::kTcpSyn, c.iss, 0, 0);
        break;
      case State::syn_rcvd:
        emit(c, net::kTcpSyn | net::kTcpAck, c.iss, c.rcv_nxt, 0);
        break;
      case State::established:
        if (c.is_client) {
          if (!c.request_acked) send_request(c);
        } else {
          // classic timeout reaction: collapse the window and resend from
          // the hole (go-back-N); Karn's rule suppresses samples for the
          // rewound span
          c.ssthresh = std::max(flight_segments(c) / 2.0, 2.0);
          c.cwnd = 1;
          c.in_recovery = false;
          c.dupacks = 0;
          if (c.snd_nxt > c.snd_una) {
            c.karn_until = std::max(c.karn_until, c.snd_nxt);
            c.snd_nxt = c.snd_una;
            c.next_unsent = c.snd_una - c.data_start();
          }
          pump_sender(cp);
        }
        break;
      default:
        return;
    }
    arm_rto(cp);
  }

  // ---- sender side ----------------------------------------------------

  double flight_segments(const Conn& c) const {
    int mss = effective_mss(c);
    return static_cast<double>(c.snd_nxt - c.snd_una) / mss;
  }

  int effective_mss(const Conn& c) const {
    int mss = cfg_.mss;
    if (c.peer_mss > 0) mss = std::min(mss, c.peer_mss);
    return mss;
  }

  void retransmit_front(Conn& c) {
    std::uint32_t data_end = c.data_start() + static_cast<std::uint32_t>(c.send_total);
    if (c.snd_una < data_end) {
      std::uint32_t len = std::min<std::uint32_t>(static_cast<std::uint32_t>(effective_mss(c)),
                                                  data_end - c.snd_una);
      emit(c, net::kTcpAck, c.snd_una, c.rcv_nxt, len, true);
    } else if (c.fin_sent) {
      emit(c, net::kTcpFin | net::kTcpAck, data_end, c.rcv_nxt, 0);
    } else if (c.state == State::syn_rcvd) {
      emit(c, net::kTcpSyn | net::kTcpAck, c.iss, c.rcv_nxt, 0);
    }
  }

  void pump_sender(ConnPtr cp) {
    Conn& c = *cp;
    if (c.state != State::established || c.is_client) return;
    std::uint32_t data_start = c.data_start();
    std::uint32_t data_end = data_start + static_cast<std::uint32_t>(c.send_total);
    int mss = effective_mss(c);
    double cwnd_bytes = std::min(c.cwnd, cfg_.max_cwnd_segments) * mss;

    bool sent_any = false;
    while (true) {
      std::uint32_t next_seq = data_start + static_cast<std::uint32_t>(c.next_unsent);
      std::uint64_t flight = c.snd_nxt - c.snd_una;
      if (c.next_unsent >= c.send_total) break;
      if (static_cast<double>(flight) + mss > cwnd_bytes && flight > 0) break;
      std::uint32_t len = static_cast<std::uint32_t>(
          std::min<std::uint64_t>(mss, c.send_total - c.next_unsent));
      bool advances = next_seq == c.snd_nxt;
      emit(c, net::kTcpAck | (len < static_cast<std::uint32_t>(mss) ? net::kTcpPsh : 0), next_seq,
           c.rcv_nxt, len, true);
      if (advances) {
        if (next_seq >= c.karn_until) c.send_times[next_seq + len] = loop().now();
        c.snd_nxt = next_seq + len;
      }
      c.next_unsent += len;
      sent_any = true;
    }

    // FIN once the stream is complete and no second phase is pending; a
    // timeout rewind can leave the FIN unsent even though fin_sent is set
    if (c.next_unsent >= c.send_total && !second_phase_pending(c) &&
        (!c.fin_sent || c.snd_nxt == data_end)) {
      c.fin_sent = true;
      emit(c, net::kTcpFin | net::kTcpAck, data_end, c.rcv_nxt, 0);
      c.snd_nxt = data_end + 1;
      sent_any = true;
    }
    if (sent_any) {
      c.backoffs = 0;
      arm_rto(cp);
    }
  }

  bool second_phase_pending(const Conn& c) const {
    return c.behavior.second_phase && !c.second_phase_armed;
  }

  void maybe_arm_second_phase(ConnPtr cp) {
    Conn& c = *cp;
    if (!second_phase_pending(c)) return;
    std::uint32_t data_end = c.data_start() + static_cast<std::uint32_t>(c.send_total);
    if (c.snd_una != data_end) return;  // phase one not fully acknowledged yet
    c.second_phase_armed = true;
    auto phase = *c.behavior.second_phase;
    loop().schedule(loop().now() + phase.idle_gap, [cp, phase] {
      if (cp->state != State::established) return;
      cp->send_total += phase.bytes;
      cp->host->pump_sender(cp);
    });
  }

  void on_ack(ConnPtr cp, std::uint32_t ack) {
    Conn& c = *cp;
    if (ack <= c.snd_una) {
      if (!c.is_client && c.state == State::established && c.snd_nxt > c.snd_una &&
          ack == c.snd_una) {
        if (++c.dupacks == 3 && !c.in_recovery) {
          c.in_recovery = true;
          c.recover = c.snd_nxt;
          c.ssthresh = std::max(flight_segments(c) / 2.0, 2.0);
          c.cwnd = c.ssthresh + 3;
          c.send_times.clear();
          retransmit_front(c);
        } else if (c.in_recovery) {
          c.cwnd += 1;  // inflate while the hole persists
          pump_sender(cp);
        }
      }
      return;
    }

    // new data acknowledged
    std::uint32_t acked_bytes = ack - c.snd_una;
    c.snd_una = ack;
    c.dupacks = 0;
    c.backoffs = 0;
    c.rto = estimated_rto(c);  // forward progress undoes exponential backoff
    note_progress(c);

    // RTT sample from a cleanly timed segment (Karn)
    auto it = c.send_times.upper_bound(ack);
    if (it != c.send_times.begin()) {
      auto sample_it = std::prev(it);
      rtt_sample(c, loop().now() - sample_it->second);
    }
    c.send_times.erase(c.send_times.begin(), c.send_times.upper_bound(ack));

    if (!c.is_client && c.state == State::established) {
      int mss = effective_mss(c);
      double acked_segs = static_cast<double>(acked_bytes) / mss;
      if (c.in_recovery) {
        if (ack >= c.recover) {
          c.in_recovery = false;
          c.cwnd = c.ssthresh;
        } else {
          retransmit_front(c);  // partial ack: the next hole
        }
      } else if (c.cwnd < c.ssthresh) {
        c.cwnd += acked_segs;  // slow start
      } else {
        c.cwnd += acked_segs / c.cwnd;  // congestion avoidance
      }
      std::uint32_t stream_end =
          c.data_start() + static_cast<std::uint32_t>(c.send_total) + (c.fin_sent ? 1 : 0);
      if (c.snd_una == stream_end && c.fin_sent) {
        c.state = State::done;
        cancel_rto(c);
      } else {
        pump_sender(cp);
        maybe_arm_second_phase(cp);
        if (c.snd_nxt > c.snd_una) arm_rto(cp);
      }
    }
    if (c.is_client && !c.request_acked && ack >= c.iss + 5) {
      c.request_acked = true;
      cancel_rto(c);
    }
  }

  SimTime estimated_rto(const Conn& c) const {
    if (c.srtt_us == 0) return cfg_.initial_rto;
    SimTime rto = static_cast<SimTime>(c.srtt_us + std::max(4.0 * c.rttvar_us, 1000.0));
    return std::clamp(rto, cfg_.min_rto, cfg_.max_rto);
  }

  void rtt_sample(Conn& c, SimTime sample_us) {
    double r = static_cast<double>(sample_us);
    if (c.srtt_us == 0) {
      c.srtt_us = r;
      c.rttvar_us = r / 2;
    } else {
      c.rttvar_us = 0.75 * c.rttvar_us + 0.25 * std::abs(c.srtt_us - r);
      c.srtt_us = 0.875 * c.srtt_us + 0.125 * r;
    }
    c.rto = estimated_rto(c);
  }

  // ---- receiver side ---------------------------------------------------

  void on_data_segment(ConnPtr cp, const net::TcpView& tcp) {
    Conn& c = *cp;
    std::uint32_t s = tcp.seq;
    std::uint32_t e = s + static_cast<std::uint32_t>(tcp.payload().size());
    bool advanced = false;
    if (e > c.rcv_nxt && s <= c.rcv_nxt) {
      c.rcv_nxt = e;
      // absorb buffered intervals
      auto it = c.ooo.begin();
      while (it != c.ooo.end() && it->first <= c.rcv_nxt) {
        c.rcv_nxt = std::max(c.rcv_nxt, it->second);
        it = c.ooo.erase(it);
      }
      advanced = true;
    } else if (s > c.rcv_nxt) {
      auto [it, inserted] = c.ooo.emplace(s, e);
      if (!inserted) it->second = std::max(it->second, e);
    }

    if (tcp.fin()) {
      std::uint32_t fin_seq = e;
      if (c.rcv_nxt == fin_seq) {
        c.rcv_nxt = fin_seq + 1;
        c.fin_seen = true;
      }
    }

    send_ack(c);

    if (advanced) {
      note_progress(c);
      arm_stall_timer(cp);
      if (c.is_client && c.state == State::established && c.delivered() >= c.expected_total &&
          c.end_time == 0) {
        c.end_time = loop().now();
        complete_client(cp, true, FlowFailure::none);
      }
    }
  }

  void complete_client(ConnPtr cp, bool success, FlowFailure why) {
    Conn& c = *cp;
    if (c.state == State::done || c.state == State::failed) return;
    c.state = success ? State::done : State::failed;
    cancel_rto(c);
    ++c.stall_epoch;
    FlowOutcome out;
    out.success = success;
    out.failure = why;
    out.bytes_received = std::min<std::uint64_t>(c.delivered(), c.expected_total);
    out.start = c.start_time;
    out.end = success ? c.end_time : loop().now();
    out.client_records = c.records;
    if (c.on_done) c.on_done(out);
  }

  void fail(Conn& c, FlowFailure why) {
    // locate the shared_ptr for completion bookkeeping
    auto it = conns_.find(key_of(c));
    if (it == conns_.end()) return;
    if (c.is_client) {
      complete_client(it->second, false, why);
    } else {
      c.state = State::failed;
    }
  }

  // ---- demux -----------------------------------------------------------

  void on_segment(const net::Bytes& inner, bool tunneled, SimTime t) {
    auto ip = net::parse_ipv4(inner);
    if (!ip) return;
    auto tcp = net::parse_tcp(ip->payload());
    if (!tcp) return;
    if (ip->dst != node_.inner_ip()) return;

    Key key{tunneled, ip->src, tcp->src_port, tcp->dst_port};
    auto it = conns_.find(key);

    if (it == conns_.end()) {
      if (tcp->syn() && !tcp->ack_flag() && listeners_.count(tcp->dst_port)) {
        accept(tunneled, *ip, *tcp);
      } else if (!tcp->rst()) {
        // no listener: refuse so the peer learns the port is closed
        net::TcpSegmentSpec s;
        s.src_ip = node_.inner_ip();
        s.dst_ip = ip->src;
        s.src_port = tcp->dst_port;
        s.dst_port = tcp->src_port;
        s.seq = tcp->ack;
        s.ack = tcp->seq + 1;
        s.flags = net::kTcpRst | net::kTcpAck;
        net::Bytes rst = net::build_ipv4_tcp(s, ip_ident_++);
        if (tunneled) {
          node_.send_tunneled(std::move(rst));
        } else {
          Conn fake;
          fake.local_ip = s.src_ip;
          fake.remote_ip = s.dst_ip;
          fake.local_port = s.src_port;
          fake.remote_port = s.dst_port;
          node_.send_native(std::move(rst), native_flow_id(fake));
        }
      }
      return;
    }

    ConnPtr cp = it->second;
    Conn& c = *cp;
    if (c.state == State::done || c.state == State::failed) {
      // still consume and acknowledge a retransmitted FIN so the peer can finish
      if (tcp->fin() && c.is_client) {
        std::uint32_t fin_end = tcp->seq + static_cast<std::uint32_t>(tcp->payload().size());
        if (c.rcv_nxt == fin_end) c.rcv_nxt = fin_end + 1;
        send_ack(c);
      }
      return;
    }

    metrics::PacketRecord rec;
    rec.t_us = t;
    rec.dir = metrics::PacketRecord::Dir::in;
    rec.seq = tcp->payload().empty() ? tcp->seq : tcp->seq - c.data_start();
    rec.payload_len = static_cast<std::uint32_t>(tcp->payload().size());
    rec.flags = tcp->flags;
    c.records.push_back(rec);

    if (tcp->rst()) {
      if (c.is_client) {
        complete_client(cp, false, FlowFailure::reset);
      } else {
        c.state = State::failed;
        cancel_rto(c);
      }
      return;
    }

    switch (c.state) {
      case State::syn_sent:
        if (tcp->syn() && tcp->ack_flag() && tcp->ack == c.iss + 1) {
          c.irs = tcp->seq;
          c.rcv_nxt = tcp->seq + 1;
          c.snd_una = tcp->ack;
          if (!c.syn_retransmitted) rtt_sample(c, t - c.start_time);
          if (auto mss = net::read_syn_mss(inner)) c.peer_mss = *mss;
          if (c.handshake_only) {
            c.end_time = t;
            send_rst(c);
            complete_client(cp, true, FlowFailure::none);
            return;
          }
          c.state = State::established;
          note_progress(c);
          send_ack(c);
          send_request(c);
          c.backoffs = 0;
          c.rto = cfg_.initial_rto;
          arm_rto(cp);
          arm_stall_timer(cp);
        }
        break;

      case State::syn_rcvd:
        if (tcp->ack_flag() && tcp->ack >= c.iss + 1) {
          c.state = State::established;
          c.snd_una = std::max(c.snd_una, tcp->ack);
          cancel_rto(c);
        }
        [[fallthrough]];

      case State::established: {
        if (c.is_client && tcp->syn() && tcp->ack_flag()) {
          // our handshake ACK got lost; help the server leave syn_rcvd
          send_ack(c);
          if (!c.request_acked) send_request(c);
          break;
        }
        if (tcp->ack_flag()) on_ack(cp, tcp->ack);
        if (!c.is_client && !tcp->payload().empty()) {
          handle_request_bytes(cp, *tcp);
        } else if (c.is_client && (!tcp->payload().empty() || tcp->fin())) {
          on_data_segment(cp, *tcp);
        }
        break;
      }

      default:
        break;
    }
  }

  void accept(bool tunneled, const net::Ipv4View& ip, const net::TcpView& tcp) {
    auto conn = std::make_shared<Conn>();
    Conn& c = *conn;
    c.host = this;
    c.is_client = false;
    c.tunneled = tunneled;
    c.local_ip = node_.inner_ip();
    c.remote_ip = ip.src;
    c.local_port = tcp.dst_port;
    c.remote_port = tcp.src_port;
    c.behavior = listeners_[tcp.dst_port];
    c.iss = next_iss();
    c.irs = tcp.seq;
    c.rcv_nxt = tcp.seq + 1;
    c.snd_una = c.iss;
    c.snd_nxt = c.iss + 1;
    c.rto = cfg_.initial_rto;
    c.state = State::syn_rcvd;
    c.cwnd = cfg_.iw_segments;
    c.start_time = loop().now();
    if (auto mss = net::read_syn_mss(ip.packet)) c.peer_mss = *mss;
    conns_[key_of(c)] = conn;
    emit(c, net::kTcpSyn | net::kTcpAck, c.iss, c.rcv_nxt, 0);
    arm_rto(conn);
  }

  void handle_request_bytes(ConnPtr cp, const net::TcpView& tcp) {
    Conn& c = *cp;
    // the request is the first four bytes of the client stream
    std::uint32_t req_start = c.irs + 1;
    if (tcp.seq == req_start && tcp.payload().size() >= 4) {
      if (c.rcv_nxt < req_start + 4) {
        std::uint32_t requested = net::load_be32(tcp.payload().data());
        c.rcv_nxt = req_start + 4;
        if (requested == 0 || requested > c.behavior.max_request_bytes) {
          host_request_error(c);
          return;
        }
        c.send_total = requested;
        c.next_unsent = 0;
        send_ack(c);
        pump_sender(cp);
        return;
      }
      send_ack(c);  // duplicate request
      return;
    }
    if (tcp.payload().size() > 0 && tcp.payload().size() != 4) {
      host_request_error(c);
    }
  }

  void host_request_error(Conn& c) {
    request_errors_++;
    send_rst(c);
    c.state = State::failed;
    cancel_rto(c);
  }

  SimNode& node_;
  EngineConfig cfg_;
  std::map<std::uint16_t, ServerBehavior> listeners_;
  std::map<Key, ConnPtr> conns_;
  std::uint32_t iss_counter_ = 0;
  std::uint16_t ip_ident_ = 1;
  std::uint64_t request_errors_ = 0;
};

}  // namespace twinflow::sim
