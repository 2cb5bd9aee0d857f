#pragma once

#include <deque>
#include <string>
#include <vector>

#include "resilsim/core.hpp"

namespace resilsim {

/// Stage `stage` of micro-batch `micro_batch` (index local to `source`) runs
/// on replica `executor` instead of its own replica.
struct Migration {
  int micro_batch = 0;
  int stage = 0;
  int source = 0;
  int executor = 0;

  friend bool operator==(const Migration&, const Migration&) = default;
};

/// P[d][i]: forward workloads of stage i resolved by replica d in the current
/// iteration. Completed forwards count for the executor (local or migrated).
/// A hand-off updates both ends at once: the source gains one, the executor
/// owes one until the migrated forward completes.
struct ProgressTable {
  std::vector<std::vector<int>> progress;  // [replica][stage]
  int delta = 0;

  int dp() const { return static_cast<int>(progress.size()); }
  int pp() const { return progress.empty() ? 0 : static_cast<int>(progress.front().size()); }
  int at(int replica, int stage) const {
    return progress.at(static_cast<std::size_t>(replica)).at(static_cast<std::size_t>(stage));
  }
};

/// What the migration planner sees at one scheduling slot.
struct SlotView {
  ProgressTable table;
  /// Per group (replica-major): local micro-batch indices whose stage
  /// workload has not started and has not been migrated, in schedule order.
  std::vector<std::deque<int>> pending;
  /// Live activations per group plus migrated forwards queued but not started.
  std::vector<int> projected_live;
  /// Live-activation capacity per group; 0 = unbounded.
  int capacity = 0;
  std::vector<bool> failed;
};

/// Device set chosen for one TP group; `standby` are the executable devices
/// left out of it.
struct TpChoice {
  GroupId group;
  std::vector<int> members;
  std::vector<int> standby;
};

enum class MigrationMode { None, Static, ProgressAware };

struct AdaptationPlan {
  std::vector<TpChoice> tp_subgroups;
  /// Groups excluded wholesale (their stage workloads must be migrated).
  std::vector<GroupId> excluded_groups;
  /// New layer partition; empty keeps the current one.
  std::vector<int> layer_partition;
  /// Micro-batches per replica; empty splits the global batch evenly.
  std::vector<int> replica_micro_batches;
  MigrationMode migration_mode = MigrationMode::None;
  int delta = 0;
  /// Concrete migrations for one iteration's workload.
  std::vector<Migration> migrations;
  double reconfig_cost = 0.0;
  double predicted_makespan = 0.0;
  std::string policy;

  bool empty() const {
    return tp_subgroups.empty() && excluded_groups.empty() && layer_partition.empty() &&
           replica_micro_batches.empty() && migrations.empty() && migration_mode == MigrationMode::None;
  }
};

}  // namespace resilsim
