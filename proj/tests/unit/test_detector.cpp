#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "resilsim/detector.hpp"
#include "resilsim/pipeline.hpp"

using namespace resilsim;
using resilsim::testing::batch;
using resilsim::testing::cfg_of;
using resilsim::testing::uniform_docs;

namespace {

double sorted_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Straight from the definition, no shared code with the detector.
bool oracle_flags(const std::vector<double>& series, int w, double kappa) {
  if (static_cast<int>(series.size()) < w + 1) return false;
  std::vector<double> win(series.end() - 1 - w, series.end() - 1);
  const double med = sorted_median(win);
  std::vector<double> dev;
  for (double x : win) dev.push_back(std::abs(x - med));
  return std::abs(series.back() - med) > kappa * sorted_median(dev) + 1e-9 * std::abs(med);
}

FailureEvent stop(int device, double t) { return {FailureKind::FailStop, device, {}, t, std::nullopt, 1.0}; }
FailureEvent slow(int device, double severity) {
  return {FailureKind::FailSlowCompute, device, {}, 0.0, std::nullopt, severity};
}

}  // namespace

TEST_CASE("heartbeat: declaration at the first tick after m misses") {
  HeartbeatConfig hb;
  CHECK(heartbeat_declaration_time(10.0, hb) == 13.0);
  CHECK(heartbeat_declaration_time(10.2, hb) == 14.0);
  hb.interval = 0.5;
  hb.miss_threshold = 2;
  CHECK(heartbeat_declaration_time(10.1, hb) == 11.5);
  hb.interval = 0.0;
  CHECK_THROWS_AS(hb.check(), std::invalid_argument);
  hb.interval = 1.0;
  hb.miss_threshold = 0;
  CHECK_THROWS_AS(hb.check(), std::invalid_argument);
}

TEST_CASE("heartbeat: no failures gives no decisions") {
  auto cfg = cfg_of(4, 2, 2, 8);
  auto state = make_cluster(2, 8, cfg, 300e9, 25e9);
  HeartbeatMonitor mon({}, state, {});
  for (double t : {0.0, 1.0, 100.0, 1e6}) CHECK(mon.scan(t).empty());
}

TEST_CASE("heartbeat: a whole node fails as one decision") {
  auto cfg = cfg_of(4, 2, 2, 8);
  auto state = make_cluster(2, 8, cfg, 300e9, 25e9);
  std::vector<FailureEvent> events;
  for (int d = 8; d < 16; ++d) events.push_back(stop(d, 10.0));
  events.push_back(stop(2, 10.0));
  HeartbeatMonitor mon({}, state, events);
  CHECK(mon.scan(12.9).empty());
  auto out = mon.scan(13.0);
  REQUIRE(out.size() == 2);
  CHECK(out[0].node == 0);
  CHECK(out[0].devices == std::vector<int>{2});
  CHECK(out[1].node == 1);
  CHECK(out[1].devices == std::vector<int>{8, 9, 10, 11, 12, 13, 14, 15});
  CHECK(mon.scan(20.0).empty());
}

TEST_CASE("heartbeat: repeated fail-stop uses the earliest start") {
  auto cfg = cfg_of(4, 2, 2, 8);
  auto state = make_cluster(2, 8, cfg, 300e9, 25e9);
  std::vector<FailureEvent> events{stop(3, 7.0), stop(3, 2.0)};
  HeartbeatMonitor mon({}, state, events);
  auto out = mon.scan(100.0);
  REQUIRE(out.size() == 1);
  CHECK(out[0].time == 5.0);
  std::vector<FailureEvent> bad{stop(99, 1.0)};
  CHECK_THROWS_AS(HeartbeatMonitor({}, state, bad), std::out_of_range);
}

TEST_CASE("heartbeat latency is within m*interval + interval") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> t0(0.0, 1000.0), iv(0.05, 5.0);
  for (int trial = 0; trial < 5000; ++trial) {
    HeartbeatConfig hb;
    hb.interval = iv(rng);
    hb.miss_threshold = 1 + static_cast<int>(rng() % 6);
    const double start = t0(rng);
    const double t = heartbeat_declaration_time(start, hb);
    CHECK(t - start >= hb.miss_threshold * hb.interval - 1e-9);
    CHECK(t - start <= (hb.miss_threshold + 1) * hb.interval + 1e-9);
    const double ticks = t / hb.interval;
    CHECK(std::abs(ticks - std::round(ticks)) < 1e-9 * std::max(1.0, ticks));
  }
}

TEST_CASE("change point: examples") {
  ChangePointConfig cp;
  std::vector<double> flat(25, 10.0);
  CHECK_FALSE(detect_change_point(flat, cp).has_value());

  std::vector<double> jitter;
  for (int i = 0; i < 24; ++i) jitter.push_back(10.0 + (i % 3 - 1) * 0.1);
  jitter.push_back(14.0);
  auto hit = detect_change_point(jitter, cp);
  REQUIRE(hit.has_value());
  CHECK(*hit == 24);
  // hand check: window median 10.0, MAD 0.1, |14 - 10| > 0.3
  std::vector<double> win(jitter.end() - 21, jitter.end() - 1);
  CHECK(sorted_median(win) == doctest::Approx(10.0));

  std::vector<double> ramp;
  for (int i = 0; i < 40; ++i) ramp.push_back(10.0 + 0.01 * i);
  for (std::size_t n = 21; n <= ramp.size(); ++n) {
    std::vector<double> prefix(ramp.begin(), ramp.begin() + static_cast<std::ptrdiff_t>(n));
    CHECK_FALSE(detect_change_point(prefix, cp).has_value());
    // slope 0.01: newest sits ~10.5 steps above the median, MAD is 5 steps
    std::vector<double> w(prefix.end() - 21, prefix.end() - 1);
    const double med = sorted_median(w);
    std::vector<double> dev;
    for (double x : w) dev.push_back(std::abs(x - med));
    CHECK(prefix.back() - med < cp.kappa * sorted_median(dev));
  }
}

TEST_CASE("change point: insufficient history is never a candidate") {
  ChangePointConfig cp;
  std::vector<double> s(20, 10.0);
  s.back() = 1000.0;
  CHECK_FALSE(detect_change_point(s, cp).has_value());
}

TEST_CASE("change point agrees with a sort-based oracle") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> noise(0.0, 0.2);
  ChangePointConfig cp;
  int flagged = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    cp.window = 3 + static_cast<int>(rng() % 25);
    cp.kappa = 1.0 + static_cast<double>(rng() % 4);
    std::vector<double> s;
    const int n = cp.window + 1 + static_cast<int>(rng() % 10);
    for (int i = 0; i < n; ++i) s.push_back(10.0 + noise(rng));
    if (rng() % 3 == 0) s.back() += 2.0;
    const bool got = detect_change_point(s, cp).has_value();
    CHECK(got == oracle_flags(s, cp.window, cp.kappa));
    flagged += got;
  }
  CHECK(flagged > 0);
}

TEST_CASE("filter: 25% boundary") {
  CHECK(filter_candidate(12.4, 10.0) == FilterVerdict::Benign);
  CHECK(filter_candidate(12.6, 10.0) == FilterVerdict::Escalate);
  CHECK(filter_candidate(12.5, 10.0) == FilterVerdict::Benign);
}

TEST_CASE("filter absorbs a heavy-quadratic iteration") {
  auto cfg = cfg_of(2, 2, 2, 8);
  auto state = make_cluster(1, 8, cfg, 300e9, 25e9);
  CostModel model{2.5e-6, 1.5e-10};
  std::vector<MicroBatch> light, heavy;
  for (int j = 0; j < 8; ++j) {
    light.push_back(uniform_docs(j, 8, 4096));
    heavy.push_back(uniform_docs(j, 1, 32768));
  }
  CHECK(quad_load(heavy[0]) / quad_load(light[0]) >= 8.0);

  FailSlowDetector det(DetectorConfig{});
  SimConfig sim;
  sim.noise_sigma = 0.01;
  for (int it = 0; it < 20; ++it) {
    sim.noise_seed = static_cast<std::uint64_t>(it);
    const double obs = simulate_iteration(state, cfg, light, model, nullptr, sim).observed_time;
    const double pred = predict_iteration_time(state, cfg, light, model, nullptr, {});
    CHECK(det.observe(obs, pred).verdict == ScreenVerdict::Quiet);
  }
  sim.noise_seed = 99;
  const double obs = simulate_iteration(state, cfg, heavy, model, nullptr, sim).observed_time;
  const double pred = predict_iteration_time(state, cfg, heavy, model, nullptr, {});
  CHECK(obs > 1.25 * det.series().back());
  auto r = det.observe(obs, pred);
  CHECK(r.verdict == ScreenVerdict::Benign);
  CHECK(r.cost == doctest::Approx(0.05));
  CHECK(det.series().size() == 20);

  DetectorConfig off;
  off.filter_enabled = false;
  FailSlowDetector raw(off);
  for (double x : det.series()) raw.observe(x, x);
  auto unfiltered = raw.observe(obs, pred);
  CHECK(unfiltered.verdict == ScreenVerdict::Escalate);
  CHECK(unfiltered.cost == 0.0);
}

TEST_CASE("detector: unconfirmed escalations leave the series") {
  FailSlowDetector det(DetectorConfig{});
  for (int i = 0; i < 20; ++i) det.observe(10.0, 10.0);
  CHECK(det.observe(20.0, 10.0).verdict == ScreenVerdict::Escalate);
  CHECK(det.series().size() == 21);
  det.resolve(false);
  CHECK(det.series().size() == 20);
  CHECK(det.observe(20.0, 10.0).verdict == ScreenVerdict::Escalate);
  det.resolve(true);
  CHECK(det.series().size() == 21);
  det.reset();
  CHECK(det.series().empty());
}

TEST_CASE("detector: after a reset the filter screens every point until the window refills") {
  DetectorConfig cfg;
  FailSlowDetector det(cfg);
  // a fresh detector stays quiet through its first window
  for (int i = 0; i < 5; ++i) CHECK(det.observe(20.0, 10.0).verdict == ScreenVerdict::Quiet);
  det.reset();
  for (int i = 0; i < 4; ++i) {
    const auto r = det.observe(10.5, 10.0);
    CHECK(r.verdict == ScreenVerdict::Checked);
    CHECK(r.cost == cfg.filter_cost);
  }
  CHECK(det.series().size() == 4);
  CHECK(det.observe(13.0, 10.0).verdict == ScreenVerdict::Escalate);
  det.resolve(false);
  for (int i = 0; i < 16; ++i) CHECK(det.observe(10.0, 10.0).verdict == ScreenVerdict::Checked);
  CHECK(det.series().size() == 20);
  // window full: back to change-point screening
  CHECK(det.observe(10.0, 10.0).verdict == ScreenVerdict::Quiet);

  cfg.filter_enabled = false;
  FailSlowDetector raw(cfg);
  raw.reset();
  CHECK(raw.observe(20.0, 10.0).verdict == ScreenVerdict::Quiet);
}

TEST_CASE("detector config checks") {
  DetectorConfig c;
  CHECK_NOTHROW(c.check());
  CHECK(c.validation_cost / c.filter_cost >= 40.0);
  c.escalation_factor = 1.0;
  CHECK_THROWS_AS(c.check(), std::invalid_argument);
  c = {};
  c.change_point.window = 0;
  CHECK_THROWS_AS(c.check(), std::invalid_argument);
}

namespace {

// Per-group compute time measured on the true cluster against the healthy prediction.
std::vector<GroupTiming> group_timings(const ClusterState& truth, const ClusterState& healthy,
                                       const ParallelismConfig& cfg, const std::vector<MicroBatch>& mbs,
                                       const CostModel& model) {
  SimConfig sim;
  ExecutionResult real, ideal;
  simulate_iteration(truth, cfg, mbs, model, nullptr, sim, &real);
  simulate_iteration(healthy, cfg, mbs, model, nullptr, sim, &ideal);
  std::vector<GroupTiming> out;
  for (int d = 0; d < cfg.dp; ++d)
    for (int s = 0; s < cfg.pp; ++s) {
      const auto g = static_cast<std::size_t>(d * cfg.pp + s);
      out.push_back({{d, s}, real.group_busy[g], ideal.group_busy[g]});
    }
  return out;
}

}  // namespace

TEST_CASE("validate: localizes degraded stages from simulated ground truth") {
  auto cfg = cfg_of(2, 2, 2, 8);
  auto healthy = make_cluster(1, 8, cfg, 300e9, 25e9);
  CostModel model{2.5e-6, 1.5e-10};
  auto mbs = batch(8, 8192);

  std::vector<FailureEvent> one{slow(2, 0.5)};
  auto truth = apply_failures(healthy, one, 1.0);
  auto r = validate(group_timings(truth, healthy, cfg, mbs, model), 1.25, 3.0);
  CHECK(r.confirmed);
  REQUIRE(r.degraded.size() == 1);
  CHECK(r.degraded[0] == GroupId{0, 1});
  CHECK(r.severity[0] == doctest::Approx(0.5));
  CHECK(r.cost == 3.0);

  std::vector<FailureEvent> two{slow(2, 0.5), slow(6, 0.7)};
  truth = apply_failures(healthy, two, 1.0);
  r = validate(group_timings(truth, healthy, cfg, mbs, model), 1.25, 3.0);
  REQUIRE(r.degraded.size() == 2);
  CHECK(r.degraded[0] == GroupId{0, 1});
  CHECK(r.degraded[1] == GroupId{1, 1});
  CHECK(r.severity[0] == doctest::Approx(0.5));
  CHECK(r.severity[1] == doctest::Approx(0.7));

  r = validate(group_timings(healthy, healthy, cfg, mbs, model), 1.25, 3.0);
  CHECK_FALSE(r.confirmed);
  CHECK(r.degraded.empty());
  CHECK(r.cost == 3.0);
}
