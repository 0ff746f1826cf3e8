#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <unordered_map>

#include "twinflow/metrics.hpp"

using namespace twinflow::metrics;

namespace {

// Independent route for the relative bias formulas: branch on which side is
// smaller and work with the absolute difference. Used as the oracle for the
// direct implementation.
double oracle_relative_bias(double favored, double other) {
  // positive when `favored` is larger
  if (favored == other) return 0.0;
  double lo = std::min(favored, other);
  double hi = std::max(favored, other);
  double magnitude = (hi - lo) / lo * 100.0;
  return favored > other ? magnitude : -magnitude;
}

double oracle_tp_bias(double tp_udp, double tp_tcp) { return oracle_relative_bias(tp_udp, tp_tcp); }

// RTT bias favors UDP when UDP's latency is smaller.
double oracle_rtt_bias(double rtt_tcp, double rtt_udp) { return oracle_relative_bias(rtt_tcp, rtt_udp); }

// Brute-force per-byte loss accounting.
double oracle_loss_pct(const std::vector<PacketRecord>& trace) {
  std::unordered_map<std::uint64_t, int> seen;
  std::uint64_t sent = 0;
  for (const auto& r : trace) {
    if (r.dir != PacketRecord::Dir::out) continue;
    for (std::uint32_t i = 0; i < r.payload_len; ++i) {
      seen[static_cast<std::uint64_t>(r.seq) + i]++;
      sent++;
    }
  }
  if (seen.empty()) return 0.0;
  std::uint64_t distinct = seen.size();
  return static_cast<double>(sent - distinct) * 100.0 / static_cast<double>(distinct);
}

std::vector<PacketRecord> data_trace(const std::vector<std::pair<std::uint32_t, std::uint32_t>>& segs) {
  std::vector<PacketRecord> t;
  std::int64_t ts = 0;
  for (auto [seq, len] : segs) {
    t.push_back({ts += 1000, PacketRecord::Dir::out, seq, len, kFlagAck});
  }
  return t;
}

}  // namespace

TEST_CASE("throughput bias matches stated examples") {
  CHECK(throughput_bias(100, 100) == 0.0);
  CHECK(throughput_bias(110, 100) == Catch::Approx(10.0));
  CHECK(throughput_bias(100, 110) == Catch::Approx(-10.0));
  CHECK_THROWS_AS(throughput_bias(0, 100), std::invalid_argument);
  CHECK_THROWS_AS(throughput_bias(100, -1), std::invalid_argument);
}

TEST_CASE("rtt bias matches stated examples") {
  CHECK(rtt_bias(50, 50) == 0.0);
  CHECK(rtt_bias(50, 40) == Catch::Approx(25.0));
  CHECK(rtt_bias(40, 50) == Catch::Approx(-25.0));
  CHECK_THROWS_AS(rtt_bias(0, 1), std::invalid_argument);
}

TEST_CASE("bias formulas agree with the branch oracle on random inputs") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> mag(1e-3, 1e6);
  for (int i = 0; i < 10000; ++i) {
    double a = mag(rng), b = mag(rng);
    double got = throughput_bias(a, b);
    double want = oracle_tp_bias(a, b);
    CHECK(std::abs(got - want) <= 1e-9 * std::max(1.0, std::abs(want)));
    double got_r = rtt_bias(a, b);
    double want_r = oracle_rtt_bias(a, b);
    CHECK(std::abs(got_r - want_r) <= 1e-9 * std::max(1.0, std::abs(want_r)));
  }
}

TEST_CASE("bias properties: antisymmetry, zero identity, scale invariance") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> mag(1e-3, 1e6);
  std::uniform_real_distribution<double> scale(1e-2, 1e3);
  for (int i = 0; i < 2000; ++i) {
    double a = mag(rng), b = mag(rng), k = scale(rng), x = mag(rng);
    CHECK(throughput_bias(a, b) == Catch::Approx(-throughput_bias(b, a)).margin(1e-9));
    CHECK(rtt_bias(a, b) == Catch::Approx(-rtt_bias(b, a)).margin(1e-9));
    CHECK(throughput_bias(x, x) == 0.0);
    CHECK(rtt_bias(x, x) == 0.0);
    CHECK(throughput_bias(k * a, k * b) ==
          Catch::Approx(throughput_bias(a, b)).epsilon(1e-9).margin(1e-9));
  }
}

TEST_CASE("loss_pct on clean and synthetic retransmission traces") {
  SECTION("no repeated ranges") {
    auto t = data_trace({{0, 100}, {100, 100}, {200, 100}});
    CHECK(loss_pct(t) == 0.0);
  }
  SECTION("3 of 30 equal segments re-sent gives exactly 10 percent") {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> segs;
    const std::uint32_t mss = 1432;
    for (std::uint32_t i = 0; i < 30; ++i) segs.push_back({i * mss, mss});
    segs.push_back({3 * mss, mss});
    segs.push_back({11 * mss, mss});
    segs.push_back({29 * mss, mss});
    auto t = data_trace(segs);
    CHECK(loss_pct(t) == 10.0);
    CHECK(loss_pct(t) == Catch::Approx(oracle_loss_pct(t)));
  }
  SECTION("10 percent of payload re-sent once") {
    auto t = data_trace({{0, 900}, {900, 100}, {900, 100}});
    CHECK(loss_pct(t) == 10.0);
  }
  SECTION("partial overlaps match the byte-level oracle") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::pair<std::uint32_t, std::uint32_t>> segs;
      int n = 1 + static_cast<int>(rng() % 20);
      for (int i = 0; i < n; ++i) {
        segs.push_back({static_cast<std::uint32_t>(rng() % 5000),
                        static_cast<std::uint32_t>(1 + rng() % 700)});
      }
      auto t = data_trace(segs);
      CHECK(loss_pct(t) == Catch::Approx(oracle_loss_pct(t)).margin(1e-12));
    }
  }
  SECTION("empty trace is an error, payload-free trace is zero") {
    CHECK_THROWS_AS(loss_pct({}), std::invalid_argument);
    std::vector<PacketRecord> acks{{0, PacketRecord::Dir::out, 0, 0, kFlagAck}};
    CHECK(loss_pct(acks) == 0.0);
  }
}

TEST_CASE("initial_rtt from handshake records") {
  SECTION("plain handshake") {
    std::vector<PacketRecord> t{
        {0, PacketRecord::Dir::out, 0, 0, kFlagSyn},
        {12000, PacketRecord::Dir::in, 0, 0, kFlagSyn | kFlagAck},
    };
    CHECK(initial_rtt_ms(t) == Catch::Approx(12.0));
  }
  SECTION("syn retransmission keeps the first send time") {
    std::vector<PacketRecord> t{
        {0, PacketRecord::Dir::out, 0, 0, kFlagSyn},
        {1000000, PacketRecord::Dir::out, 0, 0, kFlagSyn},
        {1012000, PacketRecord::Dir::in, 0, 0, kFlagSyn | kFlagAck},
    };
    CHECK(initial_rtt_ms(t) == Catch::Approx(1012.0));
  }
  SECTION("missing syn+ack is an error") {
    std::vector<PacketRecord> t{{0, PacketRecord::Dir::out, 0, 0, kFlagSyn}};
    CHECK_THROWS_AS(initial_rtt_ms(t), std::invalid_argument);
  }
}

TEST_CASE("conn_bias endpoints and fractions") {
  std::vector<ConnAttempt> all_udp(4, {false, true});
  CHECK(conn_bias(all_udp) == 1.0);
  std::vector<ConnAttempt> all_tcp(4, {true, false});
  CHECK(conn_bias(all_tcp) == -1.0);
  std::vector<ConnAttempt> mixed;
  for (int i = 0; i < 10; ++i) mixed.push_back({true, i < 8});
  CHECK(conn_bias(mixed) == Catch::Approx(-0.2));
  CHECK_THROWS_AS(conn_bias({}), std::invalid_argument);
}

TEST_CASE("conn_bias stays within the unit interval") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ConnAttempt> attempts;
    int n = 1 + static_cast<int>(rng() % 30);
    for (int i = 0; i < n; ++i) attempts.push_back({(rng() & 1) != 0, (rng() & 1) != 0});
    double b = conn_bias(attempts);
    CHECK(b >= -1.0);
    CHECK(b <= 1.0);
  }
}

TEST_CASE("classify_blocked rule and monotonicity") {
  std::vector<ConnAttempt> blocked(5, {true, false});
  CHECK(classify_blocked(blocked));
  std::vector<ConnAttempt> udp_only{{false, true}};
  CHECK_FALSE(classify_blocked(udp_only));
  std::vector<ConnAttempt> dead(3, {false, false});
  CHECK_FALSE(classify_blocked(dead));

  // adding a UDP success can only flip true -> false
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ConnAttempt> h;
    int n = 1 + static_cast<int>(rng() % 10);
    for (int i = 0; i < n; ++i) h.push_back({(rng() & 1) != 0, (rng() & 3) == 0});
    bool before = classify_blocked(h);
    h.push_back({false, true});
    bool after = classify_blocked(h);
    CHECK_FALSE(after);
    if (!before) CHECK_FALSE(after);
  }
}

TEST_CASE("aggregate_matrix medians and isolation") {
  auto obs = [](std::string src, std::string dst, bool tok, bool uok,
                std::optional<double> tp_b) {
    PairObservation o;
    o.src = std::move(src);
    o.dst = std::move(dst);
    o.tcp_ok = tok;
    o.udp_ok = uok;
    o.tp_bias = tp_b;
    if (tp_b) {
      o.tp_tcp_kBps = 100.0;
      o.rtt_bias = 0.0;
      o.rtt_tcp_ms = 10.0;
    }
    return o;
  };

  SECTION("median over single path") {
    std::vector<PairObservation> rs{
        obs("a", "b", true, true, -1.0),
        obs("a", "b", true, true, 0.0),
        obs("a", "b", true, true, 1.0),
    };
    auto m = aggregate_matrix(rs);
    REQUIRE(m.size() == 1);
    CHECK(m[0].median_tp_bias == 0.0);
    CHECK(m[0].conn_bias == 0.0);
    CHECK(m[0].n_pairs == 3);
  }

  SECTION("paths do not contaminate each other") {
    std::vector<PairObservation> rs{
        obs("a", "b", true, true, 10.0),
        obs("b", "a", true, true, -10.0),
    };
    auto m = aggregate_matrix(rs);
    REQUIRE(m.size() == 2);
    CHECK(m[0].median_tp_bias == 10.0);
    CHECK(m[1].median_tp_bias == -10.0);
  }

  SECTION("full mesh with one udp-blocked node") {
    std::vector<std::string> nodes{"n1", "n2", "n3"};
    std::vector<PairObservation> rs;
    for (const auto& s : nodes) {
      for (const auto& d : nodes) {
        if (s == d) continue;
        bool udp_works = (s != "n2" && d != "n2");
        for (int k = 0; k < 4; ++k) {
          rs.push_back(obs(s, d, true, udp_works,
                           udp_works ? std::optional<double>(0.0) : std::nullopt));
        }
      }
    }
    auto m = aggregate_matrix(rs);
    for (const auto& row : m) {
      if (row.src == "n2" || row.dst == "n2") {
        CHECK(row.conn_bias == -1.0);
        CHECK_FALSE(row.median_tp_bias.has_value());
      } else {
        CHECK(row.conn_bias == 0.0);
      }
    }
  }

  SECTION("region layout orders rows") {
    RegionLayout layout;
    layout.node_region = {{"na1", "NA"}, {"eu1", "EU"}, {"as1", "AS"}};
    layout.region_order = {"NA", "EU", "AS"};
    std::vector<PairObservation> rs{
        obs("as1", "na1", true, true, 0.0),
        obs("na1", "eu1", true, true, 0.0),
        obs("eu1", "as1", true, true, 0.0),
    };
    auto m = aggregate_matrix(rs, layout);
    REQUIRE(m.size() == 3);
    CHECK(m[0].src == "na1");
    CHECK(m[1].src == "eu1");
    CHECK(m[2].src == "as1");
  }
}

TEST_CASE("split_summary grouping, medians and tie rule") {
  auto obs = [](double tp_tcp, double tp_b, double rtt_tcp, double rtt_b) {
    PairObservation o;
    o.tcp_ok = o.udp_ok = true;
    o.tp_tcp_kBps = tp_tcp;
    o.tp_bias = tp_b;
    o.rtt_tcp_ms = rtt_tcp;
    o.rtt_bias = rtt_b;
    return o;
  };

  SECTION("six samples straddling 50 ms") {
    // latency below: biases {1, 2, 3} -> median 2; above: {10, 20, 30} -> 20
    std::vector<PairObservation> rs{
        obs(100, 0, 10, 1), obs(100, 0, 20, 2),  obs(100, 0, 30, 3),
        obs(100, 0, 60, 10), obs(100, 0, 70, 20), obs(100, 0, 80, 30),
    };
    auto groups = split_summary(rs);
    REQUIRE(groups.size() == 4);
    const auto& lat_low = groups[2];
    const auto& lat_high = groups[3];
    CHECK(lat_low.dimension == "latency");
    CHECK(lat_low.n_flows == 3);
    CHECK(lat_low.median_bias == 2.0);
    CHECK(lat_high.n_flows == 3);
    CHECK(lat_high.median_bias == 20.0);
    // throughput dimension: all six sit below 200
    CHECK(groups[0].n_flows == 6);
    CHECK(groups[1].n_flows == 0);
  }

  SECTION("sample exactly at a threshold goes to the lower group") {
    std::vector<PairObservation> rs{obs(200.0, 5.0, 50.0, 7.0)};
    auto groups = split_summary(rs);
    CHECK(groups[0].n_flows == 1);  // throughput <=
    CHECK(groups[1].n_flows == 0);
    CHECK(groups[2].n_flows == 1);  // latency <=
    CHECK(groups[3].n_flows == 0);
  }

  SECTION("groups partition the successful samples") {
    std::mt19937_64 rng(3);
    std::vector<PairObservation> rs;
    int n = 100;
    for (int i = 0; i < n; ++i) {
      rs.push_back(obs(1 + static_cast<double>(rng() % 400), 0.0,
                       1 + static_cast<double>(rng() % 100), 0.0));
    }
    auto groups = split_summary(rs);
    CHECK(groups[0].n_flows + groups[1].n_flows == n);
    CHECK(groups[2].n_flows + groups[3].n_flows == n);
  }
}

TEST_CASE("export_cdf shape and sort oracle") {
  SECTION("all-equal input collapses to one step") {
    auto s = export_cdf({0, 0, 0, 0});
    REQUIRE(s.size() == 1);
    CHECK(s[0].first == 0.0);
    CHECK(s[0].second == 1.0);
  }
  SECTION("three distinct values") {
    auto s = export_cdf({10, -10, 0});
    REQUIRE(s.size() == 3);
    CHECK(s[0] == std::pair{-10.0, 1.0 / 3});
    CHECK(s[1] == std::pair{0.0, 2.0 / 3});
    CHECK(s[2] == std::pair{10.0, 1.0});
  }
  SECTION("empty input") { CHECK(export_cdf({}).empty()); }
  SECTION("1000 random samples: valid CDF, 99th percentile matches plain sort") {
    std::mt19937_64 rng(17);
    std::vector<double> vals;
    for (int i = 0; i < 1000; ++i) {
      vals.push_back(static_cast<double>(static_cast<std::int64_t>(rng() % 20001)) - 10000.0);
    }
    auto s = export_cdf(vals);
    for (std::size_t i = 1; i < s.size(); ++i) {
      CHECK(s[i].first > s[i - 1].first);
      CHECK(s[i].second > s[i - 1].second);
    }
    CHECK(s.back().second == 1.0);
    std::vector<double> sorted = vals;
    std::sort(sorted.begin(), sorted.end());
    double p99 = sorted[static_cast<std::size_t>(0.99 * 1000) - 1];
    // smallest series value whose cumulative fraction reaches 0.99
    double got = 0;
    for (const auto& [v, f] : s) {
      if (f >= 0.99) {
        got = v;
        break;
      }
    }
    CHECK(got >= p99);
    std::size_t below = 0;
    for (double v : sorted) {
      if (v < got) below++;
    }
    CHECK(static_cast<double>(below) / 1000.0 < 0.99);
  }
}

TEST_CASE("median conventions") {
  CHECK(median({1, 2, 3}) == 2.0);
  CHECK(median({1, 2, 3, 4}) == 2.5);
  CHECK_THROWS_AS(median({}), std::invalid_argument);
}
