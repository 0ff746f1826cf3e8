#pragma once

// Userspace tunnel endpoint that gives TCP flows a UDP wire image. Inner IP
// packets read from a tun-style virtual interface are carried verbatim as
// UDP payloads toward the peer; inbound datagrams are validated and written
// back to the interface. The encapsulation codec is pure and separately
// testable; TunnelEndpoint binds it to a live tun device and UDP socket.

#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <fcntl.h>
#include <net/if.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/ioctl.h>
#include <sys/socket.h>
#include <unistd.h>
#include <linux/if_tun.h>

#include "twinflow/packet.hpp"

namespace twinflow::tunnel {

// Outer IPv4 header (20) plus UDP header (8). IPv6 outer headers cost 48;
// IPv4 is the default wire image.
inline constexpr int kIpv4Overhead = 28;
inline constexpr int kIpv6Overhead = 48;

struct TunnelConfig {
  std::string local_addr;           // outer source address
  std::string peer_addr;            // outer peer address
  std::uint16_t udp_port = 0;       // same port bound on both endpoints
  std::string virtual_if_name = "twf0";
  int interface_mtu = 1500;         // outer path MTU budget
  int encap_overhead = kIpv4Overhead;
  std::string inner_local_addr;     // address assigned to the virtual interface
  std::string inner_peer_addr;      // point-to-point peer on the virtual interface

  // Largest inner packet that still fits the outer MTU.
  int inner_mtu() const { return interface_mtu - encap_overhead; }

  void validate() const {
    if (udp_port == 0) throw std::invalid_argument("tunnel: udp_port must be 1-65535");
    if (encap_overhead != kIpv4Overhead && encap_overhead != kIpv6Overhead) {
      throw std::invalid_argument("tunnel: encap_overhead must be 28 (IPv4) or 48 (IPv6)");
    }
    if (inner_mtu() <= 0) {
      throw std::invalid_argument("tunnel: interface_mtu must exceed encap overhead");
    }
    if (virtual_if_name.empty() || virtual_if_name.size() >= IFNAMSIZ) {
      throw std::invalid_argument("tunnel: bad virtual interface name");
    }
  }
};

// MSS for the tunneled connection so that tunneled and native flows put
// equally sized packets on the wire.
inline int clamp_mss(int native_mss, int overhead) {
  if (native_mss <= overhead) {
    throw std::invalid_argument("clamp_mss: native MSS must exceed tunnel overhead");
  }
  return native_mss - overhead;
}

enum class EncapError { ok, not_ip, exceeds_mtu };

// A packet is accepted for encapsulation when it is a well-formed IP packet
// that will not push the outer datagram past the path MTU.
inline EncapError validate_inner(net::ByteView inner, const TunnelConfig& config) {
  if (!net::is_well_formed_ip(inner)) return EncapError::not_ip;
  if (static_cast<int>(inner.size()) > config.inner_mtu()) return EncapError::exceeds_mtu;
  return EncapError::ok;
}

struct OuterDatagram {
  net::Bytes payload;  // the inner packet, byte-identical
  std::string dst_addr;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;

  std::size_t wire_size(const TunnelConfig& config) const {
    return payload.size() + static_cast<std::size_t>(config.encap_overhead);
  }
};

inline std::optional<OuterDatagram> encapsulate(net::ByteView inner, const TunnelConfig& config) {
  if (validate_inner(inner, config) != EncapError::ok) return std::nullopt;
  OuterDatagram d;
  d.payload.assign(inner.begin(), inner.end());
  d.dst_addr = config.peer_addr;
  d.src_port = config.udp_port;
  d.dst_port = config.udp_port;
  return d;
}

// Datapath counters, one set per forwarding direction. Conservation:
// packets_in == packets_forwarded + packets_dropped.
struct DirectionCounters {
  std::uint64_t packets_in = 0;
  std::uint64_t packets_forwarded = 0;
  std::uint64_t packets_dropped = 0;
  std::uint64_t bytes_forwarded = 0;
  std::uint64_t drop_malformed = 0;
  std::uint64_t drop_spoofed = 0;
  std::uint64_t drop_oversize = 0;
  std::uint64_t drop_io_error = 0;
};

struct Counters {
  DirectionCounters egress;   // virtual interface -> UDP peer
  DirectionCounters ingress;  // UDP peer -> virtual interface
};

// Validates and unwraps one received datagram payload. Datagrams from
// unexpected peers and payloads that do not parse as IP packets are dropped
// and counted, never forwarded.
inline std::optional<net::Bytes> decapsulate(net::ByteView payload, const std::string& from_addr,
                                             const TunnelConfig& config, Counters& counters) {
  counters.ingress.packets_in++;
  if (from_addr != config.peer_addr) {
    counters.ingress.packets_dropped++;
    counters.ingress.drop_spoofed++;
    return std::nullopt;
  }
  if (!net::is_well_formed_ip(payload)) {
    counters.ingress.packets_dropped++;
    counters.ingress.drop_malformed++;
    return std::nullopt;
  }
  return net::Bytes(payload.begin(), payload.end());
}

enum class TunnelErrorCode {
  privilege,        // missing rights to create the virtual interface or raw device
  name_collision,   // virtual interface name already taken
  port_bound,       // UDP port already bound
  bad_config,
  device,           // other device/socket setup failure
};

class TunnelError : public std::runtime_error {
 public:
  TunnelError(TunnelErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  TunnelErrorCode code() const { return code_; }

 private:
  TunnelErrorCode code_;
};

namespace detail {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() { reset(); }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Fd& operator=(Fd&& o) noexcept {
    reset();
    fd_ = o.fd_;
    o.fd_ = -1;
    return *this;
  }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

 private:
  int fd_ = -1;
};

inline sockaddr_in make_sockaddr(const std::string& addr, std::uint16_t port) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(port);
  if (::inet_pton(AF_INET, addr.c_str(), &sa.sin_addr) != 1) {
    throw TunnelError(TunnelErrorCode::bad_config, "bad IPv4 address: " + addr);
  }
  return sa;
}

}  // namespace detail

// Live tunnel endpoint: tun device plus bound UDP socket plus a datapath
// thread. Requires privileges for the tun device; construction reports
// privilege, name-collision and port-bind failures distinctly.
class TunnelEndpoint {
 public:
  static std::unique_ptr<TunnelEndpoint> create(const TunnelConfig& config) {
    config.validate();
    return std::unique_ptr<TunnelEndpoint>(new TunnelEndpoint(config));
  }

  ~TunnelEndpoint() { stop(); }

  TunnelEndpoint(const TunnelEndpoint&) = delete;
  TunnelEndpoint& operator=(const TunnelEndpoint&) = delete;

  const TunnelConfig& config() const { return config_; }

  // Datapath loop until stop(): interface packets out via UDP, valid
  // datagrams back onto the interface. Transient I/O errors are counted and
  // survived; interface removal ends the loop with failed() set.
  void start() {
    if (thread_.joinable()) return;
    stop_requested_ = false;
    thread_ = std::thread([this] { run_datapath(); });
  }

  void stop() {
    if (!thread_.joinable()) return;
    stop_requested_ = true;
    std::uint64_t one = 1;
    [[maybe_unused]] ssize_t n = ::write(stop_event_.get(), &one, sizeof(one));
    thread_.join();
  }

  bool failed() const { return failed_; }
  std::string failure() const {
    std::lock_guard lock(mutex_);
    return failure_;
  }

  Counters counters() const {
    std::lock_guard lock(mutex_);
    return counters_;
  }

  // Blocking single-step helpers used by tests; the datapath thread must not
  // be running concurrently.
  bool forward_one_from_interface() { return pump_interface(); }
  bool forward_one_from_socket() { return pump_socket(); }

 private:
  explicit TunnelEndpoint(const TunnelConfig& config) : config_(config) {
    open_tun();
    configure_interface();
    open_socket();
    stop_event_ = detail::Fd(::eventfd(0, EFD_NONBLOCK));
    if (!stop_event_.valid()) {
      throw TunnelError(TunnelErrorCode::device, "eventfd failed");
    }
  }

  void open_tun() {
    detail::Fd fd(::open("/dev/net/tun", O_RDWR));
    if (!fd.valid()) {
      TunnelErrorCode code =
          (errno == EACCES || errno == EPERM) ? TunnelErrorCode::privilege : TunnelErrorCode::device;
      throw TunnelError(code, std::string("opening /dev/net/tun: ") + std::strerror(errno));
    }
    ifreq ifr{};
    ifr.ifr_flags = IFF_TUN | IFF_NO_PI;
    std::strncpy(ifr.ifr_name, config_.virtual_if_name.c_str(), IFNAMSIZ - 1);
    if (::ioctl(fd.get(), TUNSETIFF, &ifr) < 0) {
      TunnelErrorCode code = TunnelErrorCode::device;
      if (errno == EPERM || errno == EACCES) code = TunnelErrorCode::privilege;
      if (errno == EBUSY || errno == EINVAL) code = TunnelErrorCode::name_collision;
      throw TunnelError(code, std::string("TUNSETIFF ") + config_.virtual_if_name + ": " +
                                  std::strerror(errno));
    }
    tun_fd_ = std::move(fd);
  }

  void configure_interface() {
    detail::Fd ctl(::socket(AF_INET, SOCK_DGRAM, 0));
    if (!ctl.valid()) throw TunnelError(TunnelErrorCode::device, "control socket failed");
    ifreq ifr{};
    std::strncpy(ifr.ifr_name, config_.virtual_if_name.c_str(), IFNAMSIZ - 1);

    auto run = [&](unsigned long req, const char* what) {
      if (::ioctl(ctl.get(), req, &ifr) < 0) {
        TunnelErrorCode code =
            (errno == EPERM || errno == EACCES) ? TunnelErrorCode::privilege : TunnelErrorCode::device;
        throw TunnelError(code, std::string(what) + ": " + std::strerror(errno));
      }
    };

    if (!config_.inner_local_addr.empty()) {
      auto sa = detail::make_sockaddr(config_.inner_local_addr, 0);
      std::memcpy(&ifr.ifr_addr, &sa, sizeof(sa));
      run(SIOCSIFADDR, "SIOCSIFADDR");
    }
    if (!config_.inner_peer_addr.empty()) {
      auto sa = detail::make_sockaddr(config_.inner_peer_addr, 0);
      std::memcpy(&ifr.ifr_dstaddr, &sa, sizeof(sa));
      run(SIOCSIFDSTADDR, "SIOCSIFDSTADDR");
    }
    ifr.ifr_mtu = config_.inner_mtu();
    run(SIOCSIFMTU, "SIOCSIFMTU");
    run(SIOCGIFFLAGS, "SIOCGIFFLAGS");
    ifr.ifr_flags |= IFF_UP | IFF_RUNNING | IFF_POINTOPOINT;
    run(SIOCSIFFLAGS, "SIOCSIFFLAGS");
  }

  void open_socket() {
    detail::Fd fd(::socket(AF_INET, SOCK_DGRAM, 0));
    if (!fd.valid()) throw TunnelError(TunnelErrorCode::device, "UDP socket failed");
    auto sa = detail::make_sockaddr(config_.local_addr, config_.udp_port);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0) {
      TunnelErrorCode code =
          errno == EADDRINUSE ? TunnelErrorCode::port_bound : TunnelErrorCode::device;
      throw TunnelError(code, "bind " + config_.local_addr + ":" +
                                  std::to_string(config_.udp_port) + ": " + std::strerror(errno));
    }
    peer_sa_ = detail::make_sockaddr(config_.peer_addr, config_.udp_port);
    udp_fd_ = std::move(fd);
  }

  // One packet from the virtual interface toward the peer. SYN segments get
  // their MSS option clamped first so a tunneled connection never advertises
  // more than the inner MTU allows.
  bool pump_interface() {
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(config_.interface_mtu) + 4096);
    ssize_t n = ::read(tun_fd_.get(), buf.data(), buf.size());
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) return false;
      std::lock_guard lock(mutex_);
      counters_.egress.drop_io_error++;
      return false;
    }
    buf.resize(static_cast<std::size_t>(n));
    {
      std::lock_guard lock(mutex_);
      counters_.egress.packets_in++;
    }
    int mss_ceiling = config_.inner_mtu() - static_cast<int>(net::kIpv4HeaderLen + net::kTcpHeaderLen);
    if (mss_ceiling > 0) {
      net::clamp_syn_mss(buf, static_cast<std::uint16_t>(mss_ceiling));
    }
    auto outer = encapsulate(buf, config_);
    if (!outer) {
      std::lock_guard lock(mutex_);
      counters_.egress.packets_dropped++;
      if (validate_inner(buf, config_) == EncapError::exceeds_mtu) {
        counters_.egress.drop_oversize++;
      } else {
        counters_.egress.drop_malformed++;
      }
      return false;
    }
    ssize_t sent = ::sendto(udp_fd_.get(), outer->payload.data(), outer->payload.size(), 0,
                            reinterpret_cast<const sockaddr*>(&peer_sa_), sizeof(peer_sa_));
    std::lock_guard lock(mutex_);
    if (sent < 0) {
      counters_.egress.packets_dropped++;
      counters_.egress.drop_io_error++;
    } else {
      counters_.egress.packets_forwarded++;
      counters_.egress.bytes_forwarded += outer->payload.size();
    }
    return sent >= 0;
  }

  bool pump_socket() {
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(config_.interface_mtu) + 4096);
    sockaddr_in from{};
    socklen_t from_len = sizeof(from);
    ssize_t n = ::recvfrom(udp_fd_.get(), buf.data(), buf.size(), 0,
                           reinterpret_cast<sockaddr*>(&from), &from_len);
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) return false;
      std::lock_guard lock(mutex_);
      counters_.ingress.drop_io_error++;
      return false;
    }
    buf.resize(static_cast<std::size_t>(n));
    char from_str[INET_ADDRSTRLEN] = {0};
    ::inet_ntop(AF_INET, &from.sin_addr, from_str, sizeof(from_str));

    std::optional<net::Bytes> inner;
    {
      std::lock_guard lock(mutex_);
      inner = decapsulate(buf, from_str, config_, counters_);
    }
    if (!inner) return false;
    int mss_ceiling = config_.inner_mtu() - static_cast<int>(net::kIpv4HeaderLen + net::kTcpHeaderLen);
    if (mss_ceiling > 0) {
      net::clamp_syn_mss(*inner, static_cast<std::uint16_t>(mss_ceiling));
    }
    ssize_t written = ::write(tun_fd_.get(), inner->data(), inner->size());
    std::lock_guard lock(mutex_);
    if (written < 0) {
      counters_.ingress.packets_dropped++;
      counters_.ingress.drop_io_error++;
      return false;
    }
    counters_.ingress.packets_forwarded++;
    counters_.ingress.bytes_forwarded += inner->size();
    return true;
  }

  void run_datapath() {
    pollfd fds[3];
    fds[0] = {tun_fd_.get(), POLLIN, 0};
    fds[1] = {udp_fd_.get(), POLLIN, 0};
    fds[2] = {stop_event_.get(), POLLIN, 0};
    while (!stop_requested_) {
      int rc = ::poll(fds, 3, 1000);
      if (rc < 0) {
        if (errno == EINTR) continue;
        set_failure(std::string("poll: ") + std::strerror(errno));
        return;
      }
      if (fds[2].revents & POLLIN) return;
      if (fds[0].revents & (POLLERR | POLLHUP | POLLNVAL)) {
        set_failure("virtual interface removed");
        return;
      }
      if (fds[0].revents & POLLIN) pump_interface();
      if (fds[1].revents & POLLIN) pump_socket();
    }
  }

  void set_failure(const std::string& why) {
    std::lock_guard lock(mutex_);
    failure_ = why;
    failed_ = true;
  }

  TunnelConfig config_;
  detail::Fd tun_fd_;
  detail::Fd udp_fd_;
  detail::Fd stop_event_;
  sockaddr_in peer_sa_{};
  std::thread thread_;
  std::atomic<bool> stop_requested_{false};
  std::atomic<bool> failed_{false};
  std::string failure_;
  mutable std::mutex mutex_;
  Counters counters_;
};

inline std::unique_ptr<TunnelEndpoint> create_endpoint(const TunnelConfig& config) {
  return TunnelEndpoint::create(config);
}

}  // namespace twinflow::tunnel
