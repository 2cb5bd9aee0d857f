#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "resilsim/core.hpp"
#include "resilsim/pipeline.hpp"
#include "resilsim/plan.hpp"
#include "resilsim/workload.hpp"

namespace resilsim {

/// RecycleGreyhound is the strengthened baseline: the ReCycle-style
/// fail-stop handling with Greyhound-style redistribution chained after it.
enum class PolicyKind { None, Recycle, Greyhound, RecycleGreyhound, ResiHP };

const char* to_string(PolicyKind kind);
PolicyKind policy_from_string(const std::string& name);

/// What a policy may look at when an adaptation is triggered. `known` is the
/// current layout with the speeds and fail-stops the detector has confirmed;
/// true speeds stay hidden.
struct AdaptContext {
  const ClusterState& known;
  const ParallelismConfig& cfg;
  const AdaptationPlan& current;
  std::span<const MicroBatch> workload;
  const CostModel& model;
  SimConfig sim;
  int k_min = 1;
  int delta = 0;
  /// Recently observed batches. ResiHP scores its candidate plans on these
  /// together with `workload`, so one unusual batch does not pick the plan.
  std::span<const std::vector<MicroBatch>> recent = {};
};

/// Micro-batch count per replica under the current plan.
std::vector<int> replica_counts(const AdaptationPlan& plan, int dp, int total_micro_batches);

/// Splits `total` proportionally to `weights` by largest remainder, ties to
/// the lower index. Zero weights get nothing.
std::vector<int> proportional_split(std::span<const double> weights, int total);

/// ReCycle-style: any known fail-stop excludes its whole TP group, and every
/// micro-batch of an excluded group is rerouted round-robin to live peers of
/// the same stage. Fail-slow is ignored. Throws ExecutionError when every
/// replica of a stage is gone.
AdaptationPlan recycle_adapt(const AdaptContext& ctx);

/// Greyhound-style: micro-batch counts per replica proportional to replica
/// speed (slowest live stage). Stage imbalance inside a replica is left alone.
AdaptationPlan greyhound_adapt(const AdaptContext& ctx);

/// Fewer-replica fallback for Greyhound under fail-stop: a replica with a
/// failed device is dropped whole and its batch share is redistributed.
AdaptationPlan drop_replica_adapt(const AdaptContext& ctx);

/// Progressive TP -> PP -> DP adaptation: shrink affected TP groups to the
/// best power-of-two subgroup (reusing node-local standby devices),
/// repartition layers by stage speed, then enable progress-aware migration.
/// PP and DP steps are kept only when they lower the predicted makespan.
AdaptationPlan resihp_adapt(const AdaptContext& ctx);

/// Dispatches a trigger to the policy; nullopt means the policy ignores it.
/// A fail-stop the policy cannot absorb throws ExecutionError.
std::optional<AdaptationPlan> adapt(PolicyKind kind, const AdaptContext& ctx, bool fail_stop_trigger);

}  // namespace resilsim
