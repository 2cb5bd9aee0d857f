#include "resilsim/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "resilsim/comm.hpp"

namespace resilsim {

std::vector<int> candidate_tp_degrees(int group_size, int fail_stop_count, int k_min, int k_max) {
  if (!is_power_of_two(k_min)) throw std::invalid_argument("k_min must be a power of two");
  if (fail_stop_count < 0 || fail_stop_count > group_size) throw std::invalid_argument("bad fail-stop count");
  const int upper = std::min(group_size - fail_stop_count, k_max);
  std::vector<int> out;
  for (int k = k_min; k <= upper; k *= 2) out.push_back(k);
  if (out.empty()) throw GroupUnrecoverable();
  return out;
}

SubgroupChoice select_tp_subgroup(std::span<const std::pair<int, double>> devices, std::span<const int> degrees) {
  if (degrees.empty()) throw GroupUnrecoverable();
  std::vector<std::pair<int, double>> ranked(devices.begin(), devices.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<int> ks(degrees.begin(), degrees.end());
  std::sort(ks.begin(), ks.end());

  SubgroupChoice best;
  best.score = -1.0;
  for (int k : ks) {
    if (k < 1 || k > static_cast<int>(ranked.size())) continue;
    const double score = k * ranked[static_cast<std::size_t>(k - 1)].second;
    if (score > best.score) {
      best.score = score;
      best.degree = k;
    }
  }
  if (best.degree == 0) throw GroupUnrecoverable();
  for (std::size_t i = 0; i < ranked.size(); ++i)
    (static_cast<int>(i) < best.degree ? best.members : best.standby).push_back(ranked[i].first);
  return best;
}

double partition_bottleneck(std::span<const int> layers, std::span<const double> stage_speeds) {
  double worst = 0.0;
  for (std::size_t i = 0; i < layers.size(); ++i) worst = std::max(worst, layers[i] / stage_speeds[i]);
  return worst;
}

std::vector<int> repartition_layers(std::span<const double> stage_speeds, int num_layers, int min_layers) {
  const int n = static_cast<int>(stage_speeds.size());
  if (n == 0) throw std::invalid_argument("no stages to partition");
  if (min_layers < 0 || num_layers < n * min_layers)
    throw std::invalid_argument("infeasible min_layers: " + std::to_string(n) + " stages x " +
                                std::to_string(min_layers) + " > " + std::to_string(num_layers) + " layers");
  for (double s : stage_speeds)
    if (!(s > 0.0)) throw std::invalid_argument("stage speeds must be positive");

  const double total = std::accumulate(stage_speeds.begin(), stage_speeds.end(), 0.0);
  std::vector<double> target(static_cast<std::size_t>(n));
  std::vector<int> layers(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i] = num_layers * stage_speeds[i] / total;
    layers[i] = std::max(min_layers, static_cast<int>(std::floor(target[i])));
  }
  int sum = std::accumulate(layers.begin(), layers.end(), 0);
  while (sum > num_layers) {
    std::size_t pick = layers.size();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i] <= min_layers) continue;
      if (pick == layers.size() || layers[i] - target[i] >= layers[pick] - target[pick]) pick = i;
    }
    --layers[pick];
    --sum;
  }
  while (sum < num_layers) {
    std::size_t pick = 0;
    for (std::size_t i = 1; i < layers.size(); ++i)
      if (target[i] - layers[i] > target[pick] - layers[pick]) pick = i;
    ++layers[pick];
    ++sum;
  }

  for (int guard = 0; guard < num_layers * n; ++guard) {
    const double current = partition_bottleneck(layers, stage_speeds);
    double best = current;
    std::size_t from = 0, to = 0;
    for (std::size_t a = 0; a < layers.size(); ++a) {
      if (layers[a] <= min_layers) continue;
      for (std::size_t b = 0; b < layers.size(); ++b) {
        if (a == b) continue;
        --layers[a];
        ++layers[b];
        const double after = partition_bottleneck(layers, stage_speeds);
        ++layers[a];
        --layers[b];
        if (after < best - 1e-12 * current) {
          best = after;
          from = a;
          to = b;
        }
      }
    }
    if (from == to) break;
    --layers[from];
    ++layers[to];
  }
  return layers;
}

std::vector<double> stage_speeds(const ClusterState& state) {
  std::vector<double> out(static_cast<std::size_t>(state.pp), 0.0);
  for (int s = 0; s < state.pp; ++s) {
    double slowest = -1.0;
    for (int d = 0; d < state.dp; ++d) {
      if (state.group_failed({d, s})) continue;
      const double v = state.group_speed({d, s});
      slowest = slowest < 0.0 ? v : std::min(slowest, v);
    }
    out[static_cast<std::size_t>(s)] = std::max(0.0, slowest);
  }
  return out;
}

std::vector<int> pp_step(const AdaptationPlan& plan, const ClusterState& state, const ParallelismConfig& cfg,
                         std::span<const MicroBatch> micro_batches, const CostModel& model, const SimConfig& sim) {
  const std::vector<int> current = plan.layer_partition.empty() ? cfg.layer_partition : plan.layer_partition;
  const auto candidate = repartition_layers(stage_speeds(state), cfg.num_layers);
  if (candidate == current) return current;
  AdaptationPlan trial = plan;
  trial.layer_partition = candidate;
  const double before = evaluate_plan(plan, state, cfg, micro_batches, model, sim);
  return evaluate_plan(trial, state, cfg, micro_batches, model, sim) <= before ? candidate : current;
}

std::vector<Migration> plan_migration(const SlotView& view) {
  const int dp = view.table.dp();
  const int pp = view.table.pp();
  std::vector<Migration> out;
  std::vector<int> projected = view.projected_live;
  auto gi = [pp](int d, int s) { return static_cast<std::size_t>(d * pp + s); };
  auto feasible = [&](int d, int s) { return view.capacity <= 0 || projected[gi(d, s)] + 1 <= view.capacity; };

  for (int s = 0; s < pp; ++s) {
    int d_min = -1;
    for (int d = 0; d < dp; ++d) {
      if (view.pending[gi(d, s)].empty()) continue;
      if (d_min < 0) {
        d_min = d;
        continue;
      }
      const bool f = view.failed[gi(d, s)], fm = view.failed[gi(d_min, s)];
      if ((f && !fm) || (f == fm && view.table.at(d, s) < view.table.at(d_min, s))) d_min = d;
    }
    if (d_min < 0) continue;

    std::vector<int> peers;
    for (int d = 0; d < dp; ++d)
      if (d != d_min && !view.failed[gi(d, s)]) peers.push_back(d);
    const bool src_failed = view.failed[gi(d_min, s)];
    if (peers.empty()) {
      if (src_failed)
        throw ExecutionError("stranded workload: stage " + std::to_string(s) + " of replica " +
                             std::to_string(d_min) + " has no live peer");
      continue;
    }
    std::stable_sort(peers.begin(), peers.end(),
                     [&](int a, int b) { return view.table.at(a, s) > view.table.at(b, s); });
    const int d_max = peers.front();
    if (!src_failed && view.table.at(d_max, s) - view.table.at(d_min, s) <= view.table.delta) continue;

    int dest = -1;
    if (src_failed) {
      for (int d : peers)
        if (feasible(d, s)) {
          dest = d;
          break;
        }
    } else if (feasible(d_max, s)) {
      dest = d_max;
    }
    if (dest < 0) continue;
    const auto& pend = view.pending[gi(d_min, s)];
    out.push_back({src_failed ? pend.front() : pend.back(), s, d_min, dest});
    ++projected[gi(dest, s)];
  }
  return out;
}

std::vector<Migration> static_reroute(const ClusterState& state, std::span<const GroupId> excluded,
                                      std::span<const int> micro_batches_per_replica) {
  std::vector<Migration> out;
  auto is_excluded = [&](GroupId g) {
    return std::find(excluded.begin(), excluded.end(), g) != excluded.end() || state.group_failed(g);
  };
  for (const auto& g : excluded) {
    std::vector<int> peers;
    for (int d = 0; d < state.dp; ++d)
      if (d != g.replica && !is_excluded({d, g.stage})) peers.push_back(d);
    const int m = micro_batches_per_replica[static_cast<std::size_t>(g.replica)];
    if (m == 0) continue;
    if (peers.empty())
      throw ExecutionError("stranded workload: every replica of stage " + std::to_string(g.stage) + " failed");
    for (int j = 0; j < m; ++j)
      out.push_back({j, g.stage, g.replica, peers[static_cast<std::size_t>(j) % peers.size()]});
  }
  return out;
}

double evaluate_plan(const AdaptationPlan& plan, const ClusterState& state, const ParallelismConfig& cfg,
                     std::span<const MicroBatch> micro_batches, const CostModel& model, const SimConfig& sim) {
  return predict_iteration_time(state, cfg, micro_batches, model, &plan, sim);
}

double reconfig_cost(const AdaptationPlan& plan, const ClusterState& before, std::span<const int> old_partition,
                     const ReconfigParams& params) {
  bool rebuild = false;
  double reshard_bytes = 0.0;
  const std::vector<int> partition(plan.layer_partition.empty()
                                       ? std::vector<int>(old_partition.begin(), old_partition.end())
                                       : plan.layer_partition);
  for (const auto& choice : plan.tp_subgroups) {
    auto old_members = before.group(choice.group);
    auto new_members = choice.members;
    std::sort(old_members.begin(), old_members.end());
    std::sort(new_members.begin(), new_members.end());
    if (old_members == new_members) continue;
    rebuild = true;
    const double stage_bytes = partition.at(static_cast<std::size_t>(choice.group.stage)) * params.bytes_per_layer;
    const bool degree_changed = old_members.size() != new_members.size();
    const double bytes = degree_changed ? stage_bytes : stage_bytes / static_cast<double>(new_members.size());
    reshard_bytes = std::max(reshard_bytes, bytes);
  }
  for (const auto& g : plan.excluded_groups)
    if (!before.group(g).empty()) rebuild = true;

  double moved_layers = 0.0;
  if (!plan.layer_partition.empty()) {
    for (std::size_t i = 0; i < partition.size(); ++i)
      moved_layers += std::max(0, partition[i] - old_partition[i]);
    if (moved_layers > 0) rebuild = true;
  }
  if (!rebuild) return 0.0;
  return params.group_rebuild + (moved_layers * params.bytes_per_layer + reshard_bytes) / before.inter_bw;
}

ClusterState apply_plan(ClusterState state, const AdaptationPlan& plan) {
  auto set_active = [&](int id) {
    auto& d = state.devices[static_cast<std::size_t>(id)];
    if (d.status == DeviceStatus::Standby) d.status = d.speed < d.base_speed ? DeviceStatus::FailSlow : DeviceStatus::Healthy;
  };
  auto set_standby = [&](int id) {
    auto& d = state.devices[static_cast<std::size_t>(id)];
    if (d.executable()) d.status = DeviceStatus::Standby;
  };
  for (const auto& choice : plan.tp_subgroups) {
    for (int id : state.group(choice.group)) set_standby(id);
    state.group(choice.group) = choice.members;
    for (int id : choice.members) set_active(id);
    for (int id : choice.standby) set_standby(id);
  }
  for (const auto& g : plan.excluded_groups) {
    for (int id : state.group(g)) set_standby(id);
    state.group(g).clear();
  }
  return state;
}

}  // namespace resilsim
