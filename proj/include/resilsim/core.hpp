#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace resilsim {

enum class DeviceStatus { Healthy, FailSlow, FailStop, Standby };

const char* to_string(DeviceStatus status);

/// One accelerator. `speed` is the normalized throughput relative to the
/// device's healthy peak; `base_speed` is the value failures are applied to.
struct Device {
  int id = 0;
  int node_id = 0;
  double speed = 1.0;
  double base_speed = 1.0;
  DeviceStatus status = DeviceStatus::Healthy;

  bool executable() const { return status != DeviceStatus::FailStop; }
};

enum class Schedule { OneFOneB, ZBH };

const char* to_string(Schedule schedule);
Schedule schedule_from_string(const std::string& name);

struct ParallelismConfig {
  int tp = 1;
  int dp = 1;
  int pp = 1;
  Schedule schedule = Schedule::OneFOneB;
  int num_layers = 1;
  std::vector<int> layer_partition;

  /// Even split, earlier stages take the remainder.
  static std::vector<int> even_partition(int num_layers, int pp);
};

/// (replica, stage) coordinate of a TP group.
struct GroupId {
  int replica = 0;
  int stage = 0;

  friend auto operator<=>(const GroupId&, const GroupId&) = default;
};

/// The simulated world. TP groups are stored replica-major: index
/// `replica * pp + stage`. An empty group has been excluded.
struct ClusterState {
  std::vector<Device> devices;
  int devices_per_node = 1;
  int dp = 1;
  int pp = 1;
  int nominal_tp = 1;
  std::vector<std::vector<int>> tp_groups;
  double intra_bw = 1.0;
  double inter_bw = 1.0;
  /// Bandwidth multiplier per node pair (a <= b); (n, n) is the intra-node fabric.
  std::map<std::pair<int, int>, double> link_factor;
  double now = 0.0;

  int num_nodes() const;
  std::vector<int> node_devices(int node) const;

  std::size_t group_index(GroupId g) const { return static_cast<std::size_t>(g.replica * pp + g.stage); }
  const std::vector<int>& group(GroupId g) const { return tp_groups.at(group_index(g)); }
  std::vector<int>& group(GroupId g) { return tp_groups.at(group_index(g)); }

  /// Node hosting a group, or -1 for an excluded group.
  int group_node(GroupId g) const;
  bool group_failed(GroupId g) const;

  /// (active members / nominal degree) * slowest member speed; 0 when failed.
  double group_speed(GroupId g) const;

  double link_bandwidth(int node_a, int node_b) const;
  int active_device_count() const;
};

/// Builds a healthy cluster. Groups are packed contiguously so that
/// group g owns devices [g*tp, (g+1)*tp); leftover devices are Standby.
ClusterState make_cluster(int nodes, int devices_per_node, const ParallelismConfig& cfg, double intra_bw,
                          double inter_bw);

struct MicroBatch {
  int id = 0;
  std::vector<std::int64_t> doc_lengths;
  std::int64_t token_budget = 0;
};

enum class FailureKind { FailStop, FailSlowCompute, FailSlowComm };

const char* to_string(FailureKind kind);
FailureKind failure_kind_from_string(const std::string& name);

struct FailureEvent {
  FailureKind kind = FailureKind::FailStop;
  int device = -1;
  std::pair<int, int> link{-1, -1};
  double start = 0.0;
  std::optional<double> end;
  double severity = 1.0;

  bool active_at(double t) const;
};

/// Rejects malformed events (severity outside (0,1) for fail-slow, end <= start).
void check_event(const FailureEvent& ev);

enum class AlarmKind { Candidate, Benign, Escalated, Confirmed, Unconfirmed, FailStopDeclared, Adapted, Aborted };

const char* to_string(AlarmKind kind);

struct Alarm {
  AlarmKind kind = AlarmKind::Candidate;
  double time = 0.0;
  std::vector<int> devices;
  std::vector<GroupId> groups;
  std::string note;
};

struct IterationRecord {
  int iteration = 0;
  double observed_time = 0.0;
  double predicted_healthy_time = 0.0;
  /// Detector, validation and reconfiguration charges added to wall-clock.
  double overhead = 0.0;
  std::vector<double> per_device_busy;
  std::vector<double> per_device_idle;
  std::vector<Alarm> alarms;
  int active_devices = 0;
  int migrations = 0;
};

/// Every violated invariant, or an empty list.
std::vector<std::string> validate_cluster(const ClusterState& state, const ParallelismConfig& cfg);

/// Device speeds, statuses and link factors at time t, recomputed from the
/// base speeds so the call is idempotent. Overlapping fail-slow events stack
/// multiplicatively. Fail-stop is permanent.
ClusterState apply_failures(ClusterState state, std::span<const FailureEvent> events, double t);

}  // namespace resilsim
