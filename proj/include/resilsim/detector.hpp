#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "resilsim/core.hpp"

namespace resilsim {

struct HeartbeatConfig {
  double interval = 1.0;
  int miss_threshold = 3;

  void check() const;
};

/// One node-local monitor decision covering every device it lost at a tick.
struct FailStopDecision {
  double time = 0.0;
  int node = 0;
  std::vector<int> devices;
};

/// First heartbeat tick at or after t0 + m * interval.
double heartbeat_declaration_time(double failure_start, const HeartbeatConfig& cfg);

/// Two-level heartbeat: node monitors watch their devices, the coordinator
/// only sees per-node decisions.
class HeartbeatMonitor {
 public:
  HeartbeatMonitor(HeartbeatConfig cfg, const ClusterState& state, std::span<const FailureEvent> events);

  /// Decisions whose tick is <= t and were not reported by an earlier scan.
  std::vector<FailStopDecision> scan(double t);

  const HeartbeatConfig& config() const { return cfg_; }

 private:
  HeartbeatConfig cfg_;
  std::vector<FailStopDecision> pending_;  // sorted by (time, node)
  std::size_t next_ = 0;
};

struct ChangePointConfig {
  int window = 20;
  double kappa = 3.0;
};

/// Median of a non-empty sample.
double median(std::vector<double> values);

/// Flags the newest point when it departs from the median of the preceding
/// `window` points by more than kappa * MAD. Returns its index.
std::optional<std::size_t> detect_change_point(std::span<const double> series, const ChangePointConfig& cfg);

enum class FilterVerdict { Benign, Escalate };

/// Escalate iff observed > factor * predicted.
FilterVerdict filter_candidate(double observed, double predicted, double factor = 1.25);

struct GroupTiming {
  GroupId group;
  double measured = 0.0;
  double predicted = 0.0;
};

struct ValidationResult {
  bool confirmed = false;
  std::vector<GroupId> degraded;
  /// predicted / measured per degraded group.
  std::vector<double> severity;
  double cost = 0.0;
};

/// Localizes groups whose measured compute time exceeds factor * prediction.
ValidationResult validate(std::span<const GroupTiming> timings, double factor, double cost);

struct DetectorConfig {
  HeartbeatConfig heartbeat;
  ChangePointConfig change_point;
  double escalation_factor = 1.25;
  double filter_cost = 0.05;
  double validation_cost = 3.0;
  bool filter_enabled = true;

  void check() const;
};

/// Checked: a re-arming point the filter passed; it stays in the series.
enum class ScreenVerdict { Quiet, Checked, Benign, Escalate };

struct ScreenResult {
  ScreenVerdict verdict = ScreenVerdict::Quiet;
  double cost = 0.0;
};

/// Iteration-time series with change-point screening and the workload-aware
/// filter. Validation outcomes are fed back through resolve().
class FailSlowDetector {
 public:
  explicit FailSlowDetector(DetectorConfig cfg);

  ScreenResult observe(double observed, double predicted);
  /// After an escalation: unconfirmed points leave the series.
  void resolve(bool confirmed);
  /// Drops history, e.g. after the configuration changed. Until the window
  /// refills, every point goes straight to the filter.
  void reset();

  const std::vector<double>& series() const { return series_; }
  const DetectorConfig& config() const { return cfg_; }

 private:
  DetectorConfig cfg_;
  std::vector<double> series_;
  bool rearming_ = false;
};

}  // namespace resilsim
