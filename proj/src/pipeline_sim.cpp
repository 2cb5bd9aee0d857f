#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>

#include "resilsim/comm.hpp"
#include "resilsim/pipeline.hpp"
#include "resilsim/scheduler.hpp"

namespace resilsim {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double unit(std::uint64_t bits) { return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53; }

}  // namespace

double chunk_noise(const ChunkVertex& v, std::uint64_t seed, double sigma) {
  if (sigma <= 0.0) return 1.0;
  std::uint64_t state = seed;
  state ^= static_cast<std::uint64_t>(v.micro_batch) * 0x100000001b3ULL;
  state ^= static_cast<std::uint64_t>(v.stage) << 20;
  state ^= static_cast<std::uint64_t>(v.replica) << 40;
  state ^= static_cast<std::uint64_t>(v.kind) << 58;
  splitmix64(state);
  const double u1 = unit(splitmix64(state));
  const double u2 = unit(splitmix64(state));
  const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  return std::max(0.05, 1.0 + sigma * z);
}

std::vector<std::vector<MicroBatch>> distribute_micro_batches(std::span<const MicroBatch> micro_batches, int dp,
                                                              std::span<const int> counts) {
  if (dp <= 0) throw std::invalid_argument("dp must be positive");
  std::vector<int> per(static_cast<std::size_t>(dp), 0);
  const int total = static_cast<int>(micro_batches.size());
  if (counts.empty()) {
    for (int d = 0; d < dp; ++d) per[static_cast<std::size_t>(d)] = total / dp + (d < total % dp ? 1 : 0);
  } else {
    if (static_cast<int>(counts.size()) != dp) throw std::invalid_argument("replica counts must have dp entries");
    int sum = 0;
    for (int d = 0; d < dp; ++d) {
      if (counts[static_cast<std::size_t>(d)] < 0) throw std::invalid_argument("negative micro-batch count");
      per[static_cast<std::size_t>(d)] = counts[static_cast<std::size_t>(d)];
      sum += counts[static_cast<std::size_t>(d)];
    }
    if (sum != total) throw std::invalid_argument("replica counts do not cover the global batch");
  }
  std::vector<std::vector<MicroBatch>> out(static_cast<std::size_t>(dp));
  std::size_t next = 0;
  for (int d = 0; d < dp; ++d)
    for (int k = 0; k < per[static_cast<std::size_t>(d)]; ++k) out[static_cast<std::size_t>(d)].push_back(micro_batches[next++]);
  return out;
}

PipelineInputs make_inputs(const ClusterState& state, const ParallelismConfig& cfg,
                           std::span<const MicroBatch> micro_batches, const CostModel& model,
                           const AdaptationPlan* plan, const SimConfig& sim) {
  if (micro_batches.empty()) throw std::invalid_argument("zero micro-batches");
  PipelineInputs in;
  in.schedule = cfg.schedule;
  in.pp = cfg.pp;
  in.dp = cfg.dp;
  in.model = model;
  in.layer_partition = plan && !plan->layer_partition.empty() ? plan->layer_partition : cfg.layer_partition;
  std::span<const int> counts;
  if (plan) counts = plan->replica_micro_batches;
  in.micro_batches = distribute_micro_batches(micro_batches, cfg.dp, counts);

  in.group_speed.assign(static_cast<std::size_t>(cfg.dp * cfg.pp), 0.0);
  for (int d = 0; d < cfg.dp; ++d)
    for (int s = 0; s < cfg.pp; ++s) {
      GroupId g{d, s};
      bool excluded = plan && std::find(plan->excluded_groups.begin(), plan->excluded_groups.end(), g) !=
                                  plan->excluded_groups.end();
      in.group_speed[state.group_index(g)] = excluded ? 0.0 : state.group_speed(g);
    }

  auto shared = std::make_shared<const ClusterState>(state);
  const double tensor_bytes = sim.activation_bytes_per_token * static_cast<double>(micro_batches.front().token_budget);
  const bool optimized = sim.p2p_optimized;
  in.p2p = [shared, tensor_bytes, optimized](GroupId a, GroupId b) {
    const int na = shared->group_node(a);
    const int nb = shared->group_node(b);
    if (na < 0 || nb < 0) return 0.0;
    if (na == nb) return tensor_bytes / shared->link_bandwidth(na, na);
    const int ta = static_cast<int>(shared->group(a).size());
    const int tb = static_cast<int>(shared->group(b).size());
    return p2p_cost(tensor_bytes, ta, tb, optimized, LinkModel::between(*shared, na, nb)).seconds;
  };

  if (sim.dp_sync) {
    in.sync_cost.assign(static_cast<std::size_t>(cfg.pp), 0.0);
    for (int s = 0; s < cfg.pp; ++s) {
      std::vector<int> nodes;
      for (int d = 0; d < cfg.dp; ++d)
        if (in.speed({d, s}) > 0.0 && !in.micro_batches[static_cast<std::size_t>(d)].empty())
          nodes.push_back(state.group_node({d, s}));
      const int n = static_cast<int>(nodes.size());
      if (n <= 1) continue;
      double bw = std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < nodes.size(); ++a)
        for (std::size_t b = a + 1; b < nodes.size(); ++b) bw = std::min(bw, state.link_bandwidth(nodes[a], nodes[b]));
      const double bytes = in.layer_partition[static_cast<std::size_t>(s)] * sim.grad_bytes_per_layer /
                           static_cast<double>(state.nominal_tp);
      in.sync_cost[static_cast<std::size_t>(s)] = allreduce_cost(bytes, n, bw);
    }
  }
  return in;
}

IterationRecord simulate_iteration(const ClusterState& state, const ParallelismConfig& cfg,
                                   std::span<const MicroBatch> micro_batches, const CostModel& model,
                                   const AdaptationPlan* plan, const SimConfig& sim, ExecutionResult* detail) {
  const PipelineInputs in = make_inputs(state, cfg, micro_batches, model, plan, sim);
  ExecOptions opts;
  opts.memory_capacity = sim.memory_capacity;
  if (sim.noise_sigma > 0.0) {
    const auto seed = sim.noise_seed;
    const double sigma = sim.noise_sigma;
    opts.noise = [seed, sigma](const ChunkVertex& v) { return chunk_noise(v, seed, sigma); };
  }
  std::span<const Migration> migrations;
  if (plan) {
    migrations = plan->migrations;
    if (plan->migration_mode == MigrationMode::ProgressAware) {
      opts.planner = plan_migration;
      opts.delta = plan->delta;
    }
  }
  ExecutionResult res = execute(in, migrations, opts);

  IterationRecord rec;
  rec.observed_time = res.makespan;
  rec.migrations = static_cast<int>(res.migrations.size());
  rec.per_device_busy.assign(state.devices.size(), 0.0);
  rec.per_device_idle.assign(state.devices.size(), 0.0);
  for (int d = 0; d < cfg.dp; ++d) {
    for (int s = 0; s < cfg.pp; ++s) {
      GroupId g{d, s};
      if (!(in.speed(g) > 0.0)) continue;
      const auto& members = state.group(g);
      double slowest = 1.0;
      for (int id : members) slowest = std::min(slowest, state.devices[static_cast<std::size_t>(id)].speed);
      const double group_busy = res.group_busy[state.group_index(g)];
      for (int id : members) {
        const auto i = static_cast<std::size_t>(id);
        rec.per_device_busy[i] = group_busy * slowest / state.devices[i].speed;
        rec.per_device_idle[i] = rec.observed_time - rec.per_device_busy[i];
        ++rec.active_devices;
      }
    }
  }
  if (detail) *detail = std::move(res);
  return rec;
}

double predict_iteration_time(const ClusterState& state, const ParallelismConfig& cfg,
                              std::span<const MicroBatch> micro_batches, const CostModel& model,
                              const AdaptationPlan* plan, const SimConfig& sim) {
  SimConfig quiet = sim;
  quiet.noise_sigma = 0.0;
  const PipelineInputs in = make_inputs(state, cfg, micro_batches, model, plan, quiet);
  if (plan && (!plan->migrations.empty() || plan->migration_mode == MigrationMode::ProgressAware)) {
    ExecOptions opts;
    opts.memory_capacity = quiet.memory_capacity;
    if (plan->migration_mode == MigrationMode::ProgressAware) {
      opts.planner = plan_migration;
      opts.delta = plan->delta;
    }
    return execute(in, plan->migrations, opts).makespan;
  }
  return critical_path(build_dag(in)).makespan;
}

}  // namespace resilsim
