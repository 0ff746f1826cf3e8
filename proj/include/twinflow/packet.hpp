#pragma once

// Minimal raw-packet views and builders for IPv4/IPv6, TCP, UDP and ICMP.
// Shared by the tunnel datapath (validation, MSS clamping), the path
// emulator (synthetic wire traffic) and the prober (probe assembly and
// response matching).

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace twinflow::net {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline std::uint16_t load_be16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}

inline std::uint32_t load_be32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void store_be16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v >> 8);
  p[1] = static_cast<std::uint8_t>(v & 0xff);
}

inline void store_be32(std::uint8_t* p, std::uint32_t v) {
  p[0] = static_cast<std::uint8_t>(v >> 24);
  p[1] = static_cast<std::uint8_t>((v >> 16) & 0xff);
  p[2] = static_cast<std::uint8_t>((v >> 8) & 0xff);
  p[3] = static_cast<std::uint8_t>(v & 0xff);
}

// RFC 1071 internet checksum. `seed` carries a partial sum (pseudo-header).
inline std::uint16_t inet_checksum(ByteView data, std::uint64_t seed = 0) {
  std::uint64_t sum = seed;
  std::size_t i = 0;
  for (; i + 1 < data.size(); i += 2) {
    sum += load_be16(data.data() + i);
  }
  if (i < data.size()) {
    sum += static_cast<std::uint64_t>(data[i]) << 8;
  }
  while (sum >> 16) {
    sum = (sum & 0xffff) + (sum >> 16);
  }
  return static_cast<std::uint16_t>(~sum & 0xffff);
}

// Partial sum of a TCP/UDP pseudo-header for checksum computation.
inline std::uint64_t pseudo_header_sum(std::uint32_t src_ip, std::uint32_t dst_ip,
                                       std::uint8_t proto, std::uint16_t length) {
  std::uint64_t sum = 0;
  sum += (src_ip >> 16) + (src_ip & 0xffff);
  sum += (dst_ip >> 16) + (dst_ip & 0xffff);
  sum += proto;
  sum += length;
  return sum;
}

enum class IpProto : std::uint8_t {
  icmp = 1,
  tcp = 6,
  udp = 17,
};

// TCP flag bits.
inline constexpr std::uint8_t kTcpFin = 0x01;
inline constexpr std::uint8_t kTcpSyn = 0x02;
inline constexpr std::uint8_t kTcpRst = 0x04;
inline constexpr std::uint8_t kTcpPsh = 0x08;
inline constexpr std::uint8_t kTcpAck = 0x10;

// ICMP types used here.
inline constexpr std::uint8_t kIcmpEchoReply = 0;
inline constexpr std::uint8_t kIcmpDestUnreachable = 3;
inline constexpr std::uint8_t kIcmpEchoRequest = 8;
inline constexpr std::uint8_t kIcmpTimeExceeded = 11;
inline constexpr std::uint8_t kIcmpCodePortUnreachable = 3;
inline constexpr std::uint8_t kIcmpCodeFragNeeded = 4;

inline constexpr std::size_t kIpv4HeaderLen = 20;
inline constexpr std::size_t kTcpHeaderLen = 20;
inline constexpr std::size_t kUdpHeaderLen = 8;
inline constexpr std::size_t kIcmpHeaderLen = 8;

// Returns 4 or 6 for plausible IP packets, 0 otherwise.
inline int ip_version(ByteView pkt) {
  if (pkt.empty()) return 0;
  int v = pkt[0] >> 4;
  return (v == 4 || v == 6) ? v : 0;
}

struct Ipv4View {
  ByteView packet;           // full packet, header included
  std::size_t header_len = 0;
  std::size_t total_len = 0;
  std::uint8_t protocol = 0;
  std::uint8_t ttl = 0;
  std::uint32_t src = 0;
  std::uint32_t dst = 0;
  std::uint16_t ident = 0;

  ByteView payload() const { return packet.subspan(header_len, total_len - header_len); }
};

// Parses a complete IPv4 packet. Rejects buffers whose length disagrees with
// the header's total-length field or whose header length is out of range.
inline std::optional<Ipv4View> parse_ipv4(ByteView pkt) {
  if (pkt.size() < kIpv4HeaderLen) return std::nullopt;
  if ((pkt[0] >> 4) != 4) return std::nullopt;
  std::size_t ihl = static_cast<std::size_t>(pkt[0] & 0x0f) * 4;
  if (ihl < kIpv4HeaderLen || ihl > pkt.size()) return std::nullopt;
  std::size_t total = load_be16(pkt.data() + 2);
  if (total < ihl || total != pkt.size()) return std::nullopt;
  Ipv4View v;
  v.packet = pkt;
  v.header_len = ihl;
  v.total_len = total;
  v.ttl = pkt[8];
  v.protocol = pkt[9];
  v.ident = load_be16(pkt.data() + 4);
  v.src = load_be32(pkt.data() + 12);
  v.dst = load_be32(pkt.data() + 16);
  return v;
}

// IPv6 fixed header sanity check: version nibble plus payload-length
// consistency. Extension headers are not walked.
inline bool is_well_formed_ipv6(ByteView pkt) {
  if (pkt.size() < 40) return false;
  if ((pkt[0] >> 4) != 6) return false;
  std::size_t payload_len = load_be16(pkt.data() + 4);
  return payload_len + 40 == pkt.size();
}

// A packet is acceptable tunnel cargo when it parses as a complete IPv4 or
// IPv6 packet with a consistent length field.
inline bool is_well_formed_ip(ByteView pkt) {
  int v = ip_version(pkt);
  if (v == 4) return parse_ipv4(pkt).has_value();
  if (v == 6) return is_well_formed_ipv6(pkt);
  return false;
}

struct TcpView {
  ByteView segment;          // TCP header + payload
  std::size_t header_len = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::uint8_t flags = 0;
  std::uint16_t window = 0;

  ByteView payload() const { return segment.subspan(header_len); }
  bool syn() const { return flags & kTcpSyn; }
  bool ack_flag() const { return flags & kTcpAck; }
  bool fin() const { return flags & kTcpFin; }
  bool rst() const { return flags & kTcpRst; }
};

inline std::optional<TcpView> parse_tcp(ByteView segment) {
  if (segment.size() < kTcpHeaderLen) return std::nullopt;
  std::size_t off = static_cast<std::size_t>(segment[12] >> 4) * 4;
  if (off < kTcpHeaderLen || off > segment.size()) return std::nullopt;
  TcpView v;
  v.segment = segment;
  v.header_len = off;
  v.src_port = load_be16(segment.data());
  v.dst_port = load_be16(segment.data() + 2);
  v.seq = load_be32(segment.data() + 4);
  v.ack = load_be32(segment.data() + 8);
  v.flags = segment[13];
  v.window = load_be16(segment.data() + 14);
  return v;
}

struct UdpView {
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  ByteView payload;
};

inline std::optional<UdpView> parse_udp(ByteView datagram) {
  if (datagram.size() < kUdpHeaderLen) return std::nullopt;
  std::size_t len = load_be16(datagram.data() + 4);
  if (len < kUdpHeaderLen || len > datagram.size()) return std::nullopt;
  UdpView v;
  v.src_port = load_be16(datagram.data());
  v.dst_port = load_be16(datagram.data() + 2);
  v.payload = datagram.subspan(kUdpHeaderLen, len - kUdpHeaderLen);
  return v;
}

struct IcmpView {
  std::uint8_t type = 0;
  std::uint8_t code = 0;
  std::uint16_t ident = 0;    // echo id / unused for errors
  std::uint16_t sequence = 0; // echo seq / unused for errors
  ByteView payload;           // echo data or quoted offending packet
};

inline std::optional<IcmpView> parse_icmp(ByteView msg) {
  if (msg.size() < kIcmpHeaderLen) return std::nullopt;
  IcmpView v;
  v.type = msg[0];
  v.code = msg[1];
  v.ident = load_be16(msg.data() + 4);
  v.sequence = load_be16(msg.data() + 6);
  v.payload = msg.subspan(kIcmpHeaderLen);
  return v;
}

// ---------------------------------------------------------------------------
// Builders. All produce complete IPv4 packets with valid checksums.

struct TcpSegmentSpec {
  std::uint32_t src_ip = 0;
  std::uint32_t dst_ip = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::uint8_t flags = 0;
  std::uint16_t window = 65535;
  std::uint8_t ttl = 64;
  std::optional<std::uint16_t> mss_option;  // emitted only on SYN segments
  ByteView payload{};
};

inline void finish_ipv4_header(std::uint8_t* h, std::size_t total_len,
                               std::uint8_t proto, std::uint8_t ttl,
                               std::uint32_t src, std::uint32_t dst,
                               std::uint16_t ident) {
  h[0] = 0x45;
  h[1] = 0;
  store_be16(h + 2, static_cast<std::uint16_t>(total_len));
  store_be16(h + 4, ident);
  store_be16(h + 6, 0x4000);  // DF, no fragmentation
  h[8] = ttl;
  h[9] = proto;
  store_be16(h + 10, 0);
  store_be32(h + 12, src);
  store_be32(h + 16, dst);
  std::uint16_t csum = inet_checksum(ByteView(h, kIpv4HeaderLen));
  store_be16(h + 10, csum);
}

inline Bytes build_ipv4_tcp(const TcpSegmentSpec& s, std::uint16_t ident = 0) {
  bool with_mss = s.mss_option.has_value() && (s.flags & kTcpSyn);
  std::size_t tcp_len = kTcpHeaderLen + (with_mss ? 4 : 0);
  std::size_t total = kIpv4HeaderLen + tcp_len + s.payload.size();
  Bytes pkt(total, 0);
  std::uint8_t* tcp = pkt.data() + kIpv4HeaderLen;
  store_be16(tcp, s.src_port);
  store_be16(tcp + 2, s.dst_port);
  store_be32(tcp + 4, s.seq);
  store_be32(tcp + 8, s.ack);
  tcp[12] = static_cast<std::uint8_t>((tcp_len / 4) << 4);
  tcp[13] = s.flags;
  store_be16(tcp + 14, s.window);
  if (with_mss) {
    tcp[20] = 2;  // kind: MSS
    tcp[21] = 4;  // length
    store_be16(tcp + 22, *s.mss_option);
  }
  if (!s.payload.empty()) {
    std::memcpy(pkt.data() + kIpv4HeaderLen + tcp_len, s.payload.data(), s.payload.size());
  }
  std::uint16_t seg_len = static_cast<std::uint16_t>(tcp_len + s.payload.size());
  std::uint64_t ph = pseudo_header_sum(s.src_ip, s.dst_ip,
                                       static_cast<std::uint8_t>(IpProto::tcp), seg_len);
  std::uint16_t csum = inet_checksum(ByteView(tcp, seg_len), ph);
  store_be16(tcp + 16, csum);
  finish_ipv4_header(pkt.data(), total, static_cast<std::uint8_t>(IpProto::tcp),
                     s.ttl, s.src_ip, s.dst_ip, ident);
  return pkt;
}

inline Bytes build_ipv4_udp(std::uint32_t src_ip, std::uint32_t dst_ip,
                            std::uint16_t src_port, std::uint16_t dst_port,
                            ByteView payload, std::uint8_t ttl = 64,
                            std::uint16_t ident = 0) {
  std::size_t total = kIpv4HeaderLen + kUdpHeaderLen + payload.size();
  Bytes pkt(total, 0);
  std::uint8_t* udp = pkt.data() + kIpv4HeaderLen;
  store_be16(udp, src_port);
  store_be16(udp + 2, dst_port);
  std::uint16_t udp_len = static_cast<std::uint16_t>(kUdpHeaderLen + payload.size());
  store_be16(udp + 4, udp_len);
  if (!payload.empty()) {
    std::memcpy(udp + kUdpHeaderLen, payload.data(), payload.size());
  }
  std::uint64_t ph = pseudo_header_sum(src_ip, dst_ip,
                                       static_cast<std::uint8_t>(IpProto::udp), udp_len);
  std::uint16_t csum = inet_checksum(ByteView(udp, udp_len), ph);
  if (csum == 0) csum = 0xffff;  // UDP: zero means "no checksum", transmit all-ones
  store_be16(udp + 6, csum);
  finish_ipv4_header(pkt.data(), total, static_cast<std::uint8_t>(IpProto::udp),
                     ttl, src_ip, dst_ip, ident);
  return pkt;
}

inline Bytes build_ipv4_icmp_echo(std::uint32_t src_ip, std::uint32_t dst_ip,
                                  bool request, std::uint16_t ident,
                                  std::uint16_t sequence, ByteView data,
                                  std::uint8_t ttl = 64) {
  std::size_t total = kIpv4HeaderLen + kIcmpHeaderLen + data.size();
  Bytes pkt(total, 0);
  std::uint8_t* icmp = pkt.data() + kIpv4HeaderLen;
  icmp[0] = request ? kIcmpEchoRequest : kIcmpEchoReply;
  icmp[1] = 0;
  store_be16(icmp + 4, ident);
  store_be16(icmp + 6, sequence);
  if (!data.empty()) {
    std::memcpy(icmp + kIcmpHeaderLen, data.data(), data.size());
  }
  std::uint16_t csum = inet_checksum(ByteView(icmp, kIcmpHeaderLen + data.size()));
  store_be16(icmp + 2, csum);
  finish_ipv4_header(pkt.data(), total, static_cast<std::uint8_t>(IpProto::icmp),
                     ttl, src_ip, dst_ip, 0);
  return pkt;
}

// ICMP error message quoting the offending packet's IP header plus the first
// eight bytes of its payload, per convention.
inline Bytes build_ipv4_icmp_error(std::uint32_t src_ip, std::uint32_t dst_ip,
                                   std::uint8_t type, std::uint8_t code,
                                   ByteView offending_packet,
                                   std::uint8_t ttl = 64) {
  std::size_t quote = std::min<std::size_t>(offending_packet.size(), kIpv4HeaderLen + 8);
  std::size_t total = kIpv4HeaderLen + kIcmpHeaderLen + quote;
  Bytes pkt(total, 0);
  std::uint8_t* icmp = pkt.data() + kIpv4HeaderLen;
  icmp[0] = type;
  icmp[1] = code;
  if (quote > 0) {
    std::memcpy(icmp + kIcmpHeaderLen, offending_packet.data(), quote);
  }
  std::uint16_t csum = inet_checksum(ByteView(icmp, kIcmpHeaderLen + quote));
  store_be16(icmp + 2, csum);
  finish_ipv4_header(pkt.data(), total, static_cast<std::uint8_t>(IpProto::icmp),
                     ttl, src_ip, dst_ip, 0);
  return pkt;
}

// ---------------------------------------------------------------------------
// TCP MSS option handling.

// Reads the MSS option of a TCP SYN inside an IPv4 packet.
inline std::optional<std::uint16_t> read_syn_mss(ByteView ipv4_packet) {
  auto ip = parse_ipv4(ipv4_packet);
  if (!ip || ip->protocol != static_cast<std::uint8_t>(IpProto::tcp)) return std::nullopt;
  auto tcp = parse_tcp(ip->payload());
  if (!tcp || !tcp->syn()) return std::nullopt;
  ByteView opts = tcp->segment.subspan(kTcpHeaderLen, tcp->header_len - kTcpHeaderLen);
  std::size_t i = 0;
  while (i < opts.size()) {
    std::uint8_t kind = opts[i];
    if (kind == 0) break;            // end of options
    if (kind == 1) { ++i; continue; }  // NOP
    if (i + 1 >= opts.size()) break;
    std::uint8_t len = opts[i + 1];
    if (len < 2 || i + len > opts.size()) break;
    if (kind == 2 && len == 4) {
      return load_be16(opts.data() + i + 2);
    }
    i += len;
  }
  return std::nullopt;
}

// Lowers the MSS option of a TCP SYN in place to at most `mss_ceiling`,
// patching the TCP checksum incrementally (RFC 1624). Returns true when the
// option was present and reduced.
inline bool clamp_syn_mss(std::span<std::uint8_t> ipv4_packet, std::uint16_t mss_ceiling) {
  auto ip = parse_ipv4(ipv4_packet);
  if (!ip || ip->protocol != static_cast<std::uint8_t>(IpProto::tcp)) return false;
  std::uint8_t* tcp = ipv4_packet.data() + ip->header_len;
  auto tcpv = parse_tcp(ip->payload());
  if (!tcpv || !tcpv->syn()) return false;
  std::size_t opt_begin = kTcpHeaderLen;
  std::size_t opt_end = tcpv->header_len;
  std::size_t i = opt_begin;
  while (i < opt_end) {
    std::uint8_t kind = tcp[i];
    if (kind == 0) break;
    if (kind == 1) { ++i; continue; }
    if (i + 1 >= opt_end) break;
    std::uint8_t len = tcp[i + 1];
    if (len < 2 || i + len > opt_end) break;
    if (kind == 2 && len == 4) {
      std::uint16_t old_mss = load_be16(tcp + i + 2);
      if (old_mss <= mss_ceiling) return false;
      store_be16(tcp + i + 2, mss_ceiling);
      // ~C' = ~C + ~m + m'
      std::uint32_t sum = static_cast<std::uint16_t>(~load_be16(tcp + 16) & 0xffff);
      sum += static_cast<std::uint16_t>(~old_mss & 0xffff);
      sum += mss_ceiling;
      while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
      store_be16(tcp + 16, static_cast<std::uint16_t>(~sum & 0xffff));
      return true;
    }
    i += len;
  }
  return false;
}

// Flow identity of the packet quoted inside an ICMP error payload. Quotes
// are truncated to the IP header plus eight payload bytes, so only the port
// fields (or the ICMP id/seq pair) are read; length fields are not validated.
struct QuotedFlow {
  std::uint8_t protocol = 0;
  std::uint32_t src = 0;
  std::uint32_t dst = 0;
  std::uint16_t src_port = 0;  // icmp: identifier
  std::uint16_t dst_port = 0;  // icmp: sequence
};

inline std::optional<QuotedFlow> parse_quoted_flow(ByteView quoted) {
  if (quoted.size() < kIpv4HeaderLen + 4) return std::nullopt;
  if ((quoted[0] >> 4) != 4) return std::nullopt;
  std::size_t ihl = static_cast<std::size_t>(quoted[0] & 0x0f) * 4;
  if (ihl < kIpv4HeaderLen || ihl + 4 > quoted.size()) return std::nullopt;
  QuotedFlow f;
  f.protocol = quoted[9];
  f.src = load_be32(quoted.data() + 12);
  f.dst = load_be32(quoted.data() + 16);
  if (f.protocol == static_cast<std::uint8_t>(IpProto::icmp)) {
    if (ihl + 8 > quoted.size()) return std::nullopt;
    f.src_port = load_be16(quoted.data() + ihl + 4);  // echo identifier
    f.dst_port = load_be16(quoted.data() + ihl + 6);  // echo sequence
  } else {
    f.src_port = load_be16(quoted.data() + ihl);
    f.dst_port = load_be16(quoted.data() + ihl + 2);
  }
  return f;
}

// Dotted-quad helpers for logs and result records.
inline std::string ipv4_to_string(std::uint32_t ip) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%u.%u.%u.%u", (ip >> 24) & 0xff, (ip >> 16) & 0xff,
                (ip >> 8) & 0xff, ip & 0xff);
  return buf;
}

inline std::optional<std::uint32_t> ipv4_from_string(const std::string& s) {
  unsigned a, b, c, d;
  char tail;
  if (std::sscanf(s.c_str(), "%u.%u.%u.%u%c", &a, &b, &c, &d, &tail) != 4) return std::nullopt;
  if (a > 255 || b > 255 || c > 255 || d > 255) return std::nullopt;
  return (a << 24) | (b << 16) | (c << 8) | d;
}

}  // namespace twinflow::net
