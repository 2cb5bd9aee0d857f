#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <span>
#include <utility>
#include <vector>

#include "resilsim/core.hpp"
#include "resilsim/plan.hpp"
#include "resilsim/workload.hpp"

namespace resilsim {

/// One computation chunk. `replica` owns the micro-batch, `executor` is the
/// replica whose stage group runs it. Sync (DP all-reduce) vertices have
/// micro_batch == -1.
struct ChunkVertex {
  ChunkKind kind = ChunkKind::F;
  int micro_batch = 0;
  int stage = 0;
  int replica = 0;
  int executor = 0;
  double cost = 0.0;

  bool is_sync() const { return micro_batch < 0; }
};

enum class EdgeKind { Data, Resource };

struct DagEdge {
  int from = 0;
  int to = 0;
  double weight = 0.0;
  EdgeKind kind = EdgeKind::Data;
};

struct ChunkDag {
  std::vector<ChunkVertex> vertices;
  std::vector<DagEdge> edges;

  int add_vertex(const ChunkVertex& v);
  void add_edge(int from, int to, double weight, EdgeKind kind);
  std::size_t count(EdgeKind kind) const;
};

struct CriticalPath {
  std::vector<double> start;
  double makespan = 0.0;
};

/// Earliest start times by topological traversal; throws std::runtime_error
/// naming one cycle when the graph is cyclic.
CriticalPath critical_path(const ChunkDag& dag);

/// Per-stage chunk order for one pipeline replica with `num_micro_batches`
/// micro-batches.
///
/// 1F1B: min(pp-s-1, M) warm-up forwards, then alternating F/BW, then the
/// remaining BW chunks.
///
/// ZBH: the same warm-up and steady phase, with each backward split into B
/// followed immediately by its W. B chunks carry the gradient upstream, so
/// the W work fills the wait for the next downstream gradient during the
/// drain. This ordering is normative for the tests.
std::vector<std::pair<ChunkKind, int>> stage_order(Schedule schedule, int stage, int pp, int num_micro_batches);

/// Everything needed to cost and order one iteration.
struct PipelineInputs {
  Schedule schedule = Schedule::OneFOneB;
  int pp = 1;
  int dp = 1;
  std::vector<int> layer_partition;
  /// Micro-batches owned by each replica.
  std::vector<std::vector<MicroBatch>> micro_batches;
  CostModel model;
  /// Effective speed per group (replica-major); 0 marks a failed group.
  std::vector<double> group_speed;
  /// Seconds to move one activation/gradient tensor between two groups.
  std::function<double(GroupId, GroupId)> p2p;
  /// Per-stage all-reduce seconds; empty omits the sync vertices.
  std::vector<double> sync_cost;

  double speed(GroupId g) const { return group_speed.at(static_cast<std::size_t>(g.replica * pp + g.stage)); }
  int total_micro_batches() const;
};

/// Static DAG: schedule-ordered resource edges per (stage, replica), data
/// edges between adjacent stages, and optional per-stage sync vertices.
ChunkDag build_dag(const PipelineInputs& in);

/// Called at every scheduling slot (chunk completion) to request migrations.
using SlotPlanner = std::function<std::vector<Migration>(const SlotView&)>;

struct ExecOptions {
  /// Live-activation capacity per stage group; 0 = unbounded.
  int memory_capacity = 0;
  /// Multiplicative cost perturbation per vertex; null = none.
  std::function<double(const ChunkVertex&)> noise;
  SlotPlanner planner;
  int delta = 0;
};

struct ExecutionResult {
  ChunkDag dag;  // realized: includes executor order and trigger edges
  std::vector<double> start;
  double makespan = 0.0;
  std::vector<Migration> migrations;
  std::vector<double> group_busy;  // per executor group
  std::vector<int> peak_live;      // per executor group
  std::vector<double> replica_finish;
  /// (micro_batch, stage, owner) -> number of times executed; each must be 1.
  std::vector<int> executions;
  int slots = 0;
};

/// Thrown when work cannot be completed: a chunk is stuck on a failed group
/// or the run stalls (e.g. no memory-feasible destination).
struct ExecutionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Event-driven execution. Each group runs its own chunks strictly in
/// schedule order; migrated-in chunks are interleaved first-ready-first.
/// Without migrations and memory limits this reproduces critical_path on
/// build_dag exactly.
ExecutionResult execute(const PipelineInputs& in, std::span<const Migration> migrations, const ExecOptions& opts);

/// Knobs that turn a ClusterState into PipelineInputs.
struct SimConfig {
  double activation_bytes_per_token = 8192.0;
  double grad_bytes_per_layer = 4.0e8;
  int memory_capacity = 0;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  bool p2p_optimized = true;
  bool dp_sync = true;
};

/// Splits the global batch across replicas in order, using per-replica
/// counts when given and an even split otherwise.
std::vector<std::vector<MicroBatch>> distribute_micro_batches(std::span<const MicroBatch> micro_batches, int dp,
                                                              std::span<const int> counts);

PipelineInputs make_inputs(const ClusterState& state, const ParallelismConfig& cfg,
                           std::span<const MicroBatch> micro_batches, const CostModel& model,
                           const AdaptationPlan* plan, const SimConfig& sim);

/// Deterministic N(0, sigma) factor 1 + e per vertex identity and seed.
double chunk_noise(const ChunkVertex& v, std::uint64_t seed, double sigma);

/// One iteration on the actual cluster. observed_time is the critical path
/// of the realized DAG; busy is per-device compute time and idle the rest.
IterationRecord simulate_iteration(const ClusterState& state, const ParallelismConfig& cfg,
                                   std::span<const MicroBatch> micro_batches, const CostModel& model,
                                   const AdaptationPlan* plan, const SimConfig& sim,
                                   ExecutionResult* detail = nullptr);

/// Critical path on the static DAG with every group at its given speed
/// (the analytical predictor).
double predict_iteration_time(const ClusterState& state, const ParallelismConfig& cfg,
                              std::span<const MicroBatch> micro_batches, const CostModel& model,
                              const AdaptationPlan* plan, const SimConfig& sim);

}  // namespace resilsim
