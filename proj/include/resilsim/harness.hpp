#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "resilsim/core.hpp"
#include "resilsim/detector.hpp"
#include "resilsim/pipeline.hpp"
#include "resilsim/plan.hpp"
#include "resilsim/policies.hpp"
#include "resilsim/scheduler.hpp"
#include "resilsim/workload.hpp"

namespace resilsim {

struct ScenarioError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ClusterSpec {
  int nodes = 1;
  int devices_per_node = 8;
  double intra_bw = 300e9;  // bytes/s
  double inter_bw = 25e9;
};

enum class DocGenerator { Lognormal, Trace };

struct WorkloadSpec {
  DocGenerator generator = DocGenerator::Lognormal;
  std::int64_t tokens_per_micro_batch = 8192;
  /// Global micro-batches per iteration, split across replicas.
  int micro_batches = 8;
  /// Lognormal document lengths, clamped to [1, tokens_per_micro_batch].
  double mu = 7.0;
  double sigma = 1.0;
  /// Trace lengths, consumed cyclically.
  std::vector<std::int64_t> trace;
};

/// A failure whose start or end may be pinned to an iteration boundary
/// instead of a wall-clock second.
struct FailureSpec {
  FailureEvent event;
  std::optional<int> start_iteration;
  std::optional<int> end_iteration;
};

struct Scenario {
  std::string name = "scenario";
  std::uint64_t seed = 0;
  int iterations = 100;
  PolicyKind policy = PolicyKind::ResiHP;
  ClusterSpec cluster;
  ParallelismConfig parallelism;
  CostModel model{2.5e-6, 1.5e-10};
  WorkloadSpec workload;
  SimConfig sim;
  DetectorConfig detector;
  ReconfigParams reconfig;
  int k_min = 1;
  int delta = 0;
  std::vector<FailureSpec> failures;
};

/// Parses a YAML document (JSON is accepted as well). Relative trace paths
/// resolve against `base_dir`.
Scenario parse_scenario(const std::string& text, const std::filesystem::path& base_dir = {});
Scenario load_scenario(const std::filesystem::path& path);
/// Throws ScenarioError naming the first problem.
void check_scenario(const Scenario& sc);

/// One length per line; blank lines and '#' comments are skipped.
std::vector<std::int64_t> read_length_trace(const std::filesystem::path& path);

/// Calibration samples, one per line: measured single-layer forward seconds
/// followed by the micro-batch's document lengths, whitespace separated.
std::vector<std::pair<MicroBatch, double>> read_calibration_trace(const std::filesystem::path& path);

/// Deterministic per-iteration packed workload, in shuffled order.
class WorkloadGenerator {
 public:
  WorkloadGenerator(WorkloadSpec spec, std::uint64_t seed);
  std::vector<MicroBatch> next();

 private:
  std::int64_t draw();

  WorkloadSpec spec_;
  std::mt19937_64 rng_;
  std::size_t trace_pos_ = 0;
  int next_id_ = 0;
};

struct DetectionRecord {
  FailureKind kind = FailureKind::FailSlowCompute;
  int device = -1;
  double start = 0.0;
  int first_iteration = -1;  // first iteration the fault was in effect
  bool detected = false;
  double detected_at = 0.0;
  int detected_iteration = -1;
  bool localized = false;

  double latency() const { return detected_at - start; }
  /// Affected iterations observed up to and including the detecting one.
  int latency_iterations() const { return detected_iteration - first_iteration + 1; }
};

struct AdaptationRecord {
  int iteration = 0;
  double time = 0.0;
  std::string trigger;  // "fail_stop" or "fail_slow"
  AdaptationPlan plan;
};

/// Extra idle time, against the healthy cluster on the same workload, of the
/// active devices that share the faulty device's TP group, its replica's
/// other stages, and the other replicas.
struct IdleBreakdown {
  bool available = false;
  int faulty_device = -1;
  double tp = 0.0;
  double pp = 0.0;
  double dp = 0.0;
  double faulty_extra_busy = 0.0;
};

struct OverheadBreakdown {
  double filter = 0.0;
  double validation = 0.0;
  double reconfig = 0.0;
  double lost = 0.0;  // work discarded by fail-stop until declaration

  double total() const { return filter + validation + reconfig + lost; }
};

struct RunResult {
  std::string scenario;
  PolicyKind policy = PolicyKind::None;
  std::uint64_t seed = 0;
  int iterations_requested = 0;
  int micro_batches_per_iteration = 0;
  std::vector<IterationRecord> iterations;
  std::vector<AdaptationRecord> adaptations;
  std::vector<DetectionRecord> detections;
  std::vector<double> healthy_time;  // per completed iteration, no failures, no noise
  std::vector<std::vector<double>> idle_extra;  // per completed iteration: tp, pp, dp
  bool aborted = false;
  int aborted_at = -1;
  std::string abort_reason;
  OverheadBreakdown overhead;
  int candidates = 0;
  int benign = 0;
  int escalations = 0;
  int confirmed = 0;
  int unconfirmed = 0;
  int false_alarms = 0;
  IdleBreakdown idle;

  double wall_clock() const;
  double avg_iteration_time() const;  // observed + overhead
  double throughput() const;          // micro-batches / avg iteration time
  double healthy_throughput() const;
};

RunResult run_scenario(const Scenario& sc);

/// Creates `out` and proves it writable; throws before any simulation work.
void prepare_output_dir(const std::filesystem::path& out);

/// iterations.csv, adaptations.jsonl, summary.json and plotdata/*.csv.
void emit_outputs(const RunResult& result, const std::filesystem::path& out);

std::string iterations_csv(const RunResult& result);
std::string adaptations_jsonl(const RunResult& result);
std::string summary_json(const RunResult& result);

/// Shortest round-trip decimal form; the output format of every number.
std::string format_number(double x);

}  // namespace resilsim
