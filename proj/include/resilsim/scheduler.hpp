#pragma once

#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "resilsim/core.hpp"
#include "resilsim/pipeline.hpp"
#include "resilsim/plan.hpp"
#include "resilsim/workload.hpp"

namespace resilsim {

struct GroupUnrecoverable : std::runtime_error {
  GroupUnrecoverable() : std::runtime_error("group unrecoverable") {}
};

/// Powers of two in [k_min, min(|G| - fail_stop_count, k_max)].
/// Throws GroupUnrecoverable when the set is empty.
std::vector<int> candidate_tp_degrees(int group_size, int fail_stop_count, int k_min, int k_max = 1 << 30);

struct SubgroupChoice {
  std::vector<int> members;
  std::vector<int> standby;
  int degree = 0;
  double score = 0.0;
};

/// Top-k by speed for every k in K, keeping the k with the largest
/// k * min speed; ties go to the smaller k. Equal speeds rank by device id.
SubgroupChoice select_tp_subgroup(std::span<const std::pair<int, double>> devices, std::span<const int> degrees);

/// Integer layer counts proportional to stage speeds: largest remainder,
/// then single-layer moves while they strictly lower max(layers / speed).
/// Remainder ties go to the earlier stage.
std::vector<int> repartition_layers(std::span<const double> stage_speeds, int num_layers, int min_layers = 1);

/// Effective speed per stage: the slowest live replica of it.
std::vector<double> stage_speeds(const ClusterState& state);

/// The PP adaptation step. The bottleneck rule above is blind to pipeline
/// fill and drain, so with few micro-batches it can lengthen the iteration;
/// the new partition is kept only when the prediction under `plan` does not
/// get worse, otherwise the plan's current partition is returned.
std::vector<int> pp_step(const AdaptationPlan& plan, const ClusterState& state, const ParallelismConfig& cfg,
                         std::span<const MicroBatch> micro_batches, const CostModel& model, const SimConfig& sim);

/// Max over stages of layers / speed.
double partition_bottleneck(std::span<const int> layers, std::span<const double> stage_speeds);

/// Progress-aware migration for one scheduling slot. Per stage, the slowest
/// replica with pending work hands one micro-batch to the fastest live peer
/// when it is fail-stopped or the progress gap exceeds delta. A failed
/// source gives up its next-scheduled micro-batch and may fall back to any
/// memory-feasible peer; a slow source gives up its last-scheduled one and
/// only to the fastest peer. Ties go to the lowest replica index.
/// Throws ExecutionError("stranded workload") when a failed group has
/// pending work and no live peer exists.
std::vector<Migration> plan_migration(const SlotView& view);

/// Round-robin static reroute of every micro-batch of the excluded groups to
/// live peers of the same stage, ignoring progress and speed.
std::vector<Migration> static_reroute(const ClusterState& state, std::span<const GroupId> excluded,
                                      std::span<const int> micro_batches_per_replica);

/// Predicted iteration time of `state` under `plan`, including DP sync.
double evaluate_plan(const AdaptationPlan& plan, const ClusterState& state, const ParallelismConfig& cfg,
                     std::span<const MicroBatch> micro_batches, const CostModel& model, const SimConfig& sim);

struct ReconfigParams {
  double group_rebuild = 2.0;   // s, whenever any communicator changes
  double bytes_per_layer = 0.5e9;  // parameter + optimizer state of one layer
};

/// Group rebuild plus transferred state over the inter-node bandwidth:
/// moved layers (once; replicas move in parallel) and the largest TP reshard
/// (resharding groups proceed in parallel).
double reconfig_cost(const AdaptationPlan& plan, const ClusterState& before, std::span<const int> old_partition,
                     const ReconfigParams& params);

/// Installs the plan's TP subgroups and exclusions into the layout.
ClusterState apply_plan(ClusterState state, const AdaptationPlan& plan);

}  // namespace resilsim
