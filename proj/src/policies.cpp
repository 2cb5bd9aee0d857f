#include "resilsim/policies.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "resilsim/scheduler.hpp"

namespace resilsim {

const char* to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::None: return "none";
    case PolicyKind::Recycle: return "recycle";
    case PolicyKind::Greyhound: return "greyhound";
    case PolicyKind::RecycleGreyhound: return "recycle_greyhound";
    case PolicyKind::ResiHP: return "resihp";
  }
  return "?";
}

PolicyKind policy_from_string(const std::string& name) {
  if (name == "none") return PolicyKind::None;
  if (name == "recycle") return PolicyKind::Recycle;
  if (name == "greyhound") return PolicyKind::Greyhound;
  if (name == "recycle_greyhound" || name == "recycle+greyhound") return PolicyKind::RecycleGreyhound;
  if (name == "resihp") return PolicyKind::ResiHP;
  throw std::invalid_argument("unknown policy: " + name);
}

std::vector<int> replica_counts(const AdaptationPlan& plan, int dp, int total_micro_batches) {
  if (!plan.replica_micro_batches.empty()) return plan.replica_micro_batches;
  std::vector<int> out(static_cast<std::size_t>(dp));
  for (int d = 0; d < dp; ++d) out[static_cast<std::size_t>(d)] = total_micro_batches / dp + (d < total_micro_batches % dp);
  return out;
}

std::vector<int> proportional_split(std::span<const double> weights, int total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum > 0.0)) throw std::invalid_argument("proportional split needs a positive weight");
  std::vector<int> out(weights.size());
  std::vector<double> rem(weights.size());
  int given = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double share = total * weights[i] / sum;
    out[i] = static_cast<int>(std::floor(share + 1e-9));
    rem[i] = weights[i] > 0.0 ? share - out[i] : -1.0;
    given += out[i];
  }
  while (given < total) {
    const auto i = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++out[i];
    rem[i] -= 1.0;
    ++given;
  }
  return out;
}

namespace {

bool has_fail_stop(const ClusterState& st, GroupId g) {
  const auto& members = st.group(g);
  return std::any_of(members.begin(), members.end(),
                     [&](int id) { return !st.devices[static_cast<std::size_t>(id)].executable(); });
}

bool contains(const std::vector<GroupId>& v, GroupId g) { return std::find(v.begin(), v.end(), g) != v.end(); }

AdaptationPlan start_from(const AdaptContext& ctx, const char* policy) {
  AdaptationPlan plan = ctx.current;
  plan.tp_subgroups.clear();
  plan.policy = policy;
  return plan;
}

double predict(const AdaptContext& ctx, const ClusterState& st, const AdaptationPlan& plan) {
  return evaluate_plan(plan, st, ctx.cfg, ctx.workload, ctx.model, ctx.sim);
}

// Mean prediction over the trigger batch and the recent ones.
double predict_recent(const AdaptContext& ctx, const ClusterState& st, const AdaptationPlan& plan) {
  double sum = predict(ctx, st, plan);
  for (const auto& batch : ctx.recent) sum += evaluate_plan(plan, st, ctx.cfg, batch, ctx.model, ctx.sim);
  return sum / static_cast<double>(ctx.recent.size() + 1);
}

void check_stages_alive(const ClusterState& st, const std::vector<GroupId>& excluded) {
  for (int s = 0; s < st.pp; ++s) {
    bool alive = false;
    for (int d = 0; d < st.dp; ++d)
      if (!contains(excluded, {d, s}) && !st.group_failed({d, s})) alive = true;
    if (!alive)
      throw ExecutionError("stranded workload: every replica of stage " + std::to_string(s) + " failed");
  }
}

// Slowest live stage of each replica; 0 for a replica with no live stage.
std::vector<double> replica_speeds(const ClusterState& st, const std::vector<GroupId>& excluded,
                                   const std::vector<bool>& dropped) {
  std::vector<double> out(static_cast<std::size_t>(st.dp), 0.0);
  for (int d = 0; d < st.dp; ++d) {
    if (dropped[static_cast<std::size_t>(d)]) continue;
    double slowest = -1.0;
    for (int s = 0; s < st.pp; ++s) {
      if (contains(excluded, {d, s}) || st.group_failed({d, s})) continue;
      const double v = st.group_speed({d, s});
      slowest = slowest < 0.0 ? v : std::min(slowest, v);
    }
    out[static_cast<std::size_t>(d)] = std::max(0.0, slowest);
  }
  return out;
}

}  // namespace

AdaptationPlan recycle_adapt(const AdaptContext& ctx) {
  AdaptationPlan plan = start_from(ctx, "recycle");
  const auto& st = ctx.known;
  for (int d = 0; d < st.dp; ++d)
    for (int s = 0; s < st.pp; ++s)
      if (!contains(plan.excluded_groups, {d, s}) && has_fail_stop(st, {d, s})) plan.excluded_groups.push_back({d, s});
  check_stages_alive(st, plan.excluded_groups);
  const auto counts = replica_counts(plan, st.dp, static_cast<int>(ctx.workload.size()));
  plan.migrations = static_reroute(st, plan.excluded_groups, counts);
  plan.migration_mode = plan.migrations.empty() ? MigrationMode::None : MigrationMode::Static;
  const auto after = apply_plan(st, plan);
  plan.predicted_makespan = predict(ctx, after, plan);
  return plan;
}

AdaptationPlan greyhound_adapt(const AdaptContext& ctx) {
  const bool chained = ctx.current.policy == "recycle" || ctx.current.policy == "recycle_greyhound";
  AdaptationPlan plan = start_from(ctx, chained ? "recycle_greyhound" : "greyhound");
  const auto& st = ctx.known;
  const auto old_counts = replica_counts(plan, st.dp, static_cast<int>(ctx.workload.size()));
  std::vector<bool> dropped(static_cast<std::size_t>(st.dp), false);
  for (int d = 0; d < st.dp; ++d) {
    bool all = true;
    for (int s = 0; s < st.pp; ++s) all = all && contains(plan.excluded_groups, {d, s});
    dropped[static_cast<std::size_t>(d)] = all;
  }
  const auto speeds = replica_speeds(st, plan.excluded_groups, dropped);
  plan.replica_micro_batches = proportional_split(speeds, static_cast<int>(ctx.workload.size()));
  if (plan.migration_mode == MigrationMode::Static && plan.replica_micro_batches != old_counts)
    plan.migrations = static_reroute(st, plan.excluded_groups, plan.replica_micro_batches);
  const auto after = apply_plan(st, plan);
  plan.predicted_makespan = predict(ctx, after, plan);
  return plan;
}

AdaptationPlan drop_replica_adapt(const AdaptContext& ctx) {
  AdaptationPlan plan = start_from(ctx, "greyhound");
  const auto& st = ctx.known;
  std::vector<bool> dropped(static_cast<std::size_t>(st.dp), false);
  for (int d = 0; d < st.dp; ++d) {
    bool lost = false;
    for (int s = 0; s < st.pp; ++s) lost = lost || contains(plan.excluded_groups, {d, s}) || has_fail_stop(st, {d, s});
    if (!lost) continue;
    dropped[static_cast<std::size_t>(d)] = true;
    for (int s = 0; s < st.pp; ++s)
      if (!contains(plan.excluded_groups, {d, s})) plan.excluded_groups.push_back({d, s});
  }
  if (std::all_of(dropped.begin(), dropped.end(), [](bool b) { return b; }))
    throw ExecutionError("stranded workload: every replica has a failed stage");
  const auto speeds = replica_speeds(st, plan.excluded_groups, dropped);
  plan.replica_micro_batches = proportional_split(speeds, static_cast<int>(ctx.workload.size()));
  plan.migrations.clear();
  plan.migration_mode = MigrationMode::None;
  const auto after = apply_plan(st, plan);
  plan.predicted_makespan = predict(ctx, after, plan);
  return plan;
}

AdaptationPlan resihp_adapt(const AdaptContext& ctx) {
  AdaptationPlan plan = start_from(ctx, "resihp");
  plan.migrations.clear();
  ClusterState st = ctx.known;

  // TP: shrink affected groups to the best power-of-two subgroup.
  std::map<int, std::vector<int>> pool;  // node -> standby devices
  for (const auto& d : st.devices)
    if (d.status == DeviceStatus::Standby) pool[d.node_id].push_back(d.id);
  for (int d = 0; d < st.dp; ++d) {
    for (int s = 0; s < st.pp; ++s) {
      const GroupId g{d, s};
      const auto& members = st.group(g);
      if (members.empty()) continue;
      const int node = st.group_node(g);
      auto& spare = pool[node];
      bool affected = static_cast<int>(members.size()) < st.nominal_tp && !spare.empty();
      for (int id : members) {
        const auto& dev = st.devices[static_cast<std::size_t>(id)];
        if (!dev.executable() || dev.speed < dev.base_speed) affected = true;
      }
      if (!affected) continue;
      std::vector<std::pair<int, double>> candidates;
      for (int id : members)
        if (st.devices[static_cast<std::size_t>(id)].executable())
          candidates.emplace_back(id, st.devices[static_cast<std::size_t>(id)].speed);
      for (int id : spare) candidates.emplace_back(id, st.devices[static_cast<std::size_t>(id)].speed);
      try {
        const auto degrees =
            candidate_tp_degrees(static_cast<int>(candidates.size()), 0, ctx.k_min, st.nominal_tp);
        const auto choice = select_tp_subgroup(candidates, degrees);
        plan.tp_subgroups.push_back({g, choice.members, choice.standby});
        spare = choice.standby;
      } catch (const GroupUnrecoverable&) {
        plan.excluded_groups.push_back(g);
        spare.clear();
        for (const auto& [id, speed] : candidates) spare.push_back(id);
      }
    }
  }
  for (auto& choice : plan.tp_subgroups) {
    // standby lists are per node; report what is left after the last group on it
    choice.standby = pool[st.devices[static_cast<std::size_t>(choice.members.front())].node_id];
  }
  st = apply_plan(st, plan);
  check_stages_alive(st, plan.excluded_groups);

  // PP: layer repartition by the slowest live replica of each stage.
  bool any_excluded = false;
  for (int d = 0; d < st.dp; ++d)
    for (int s = 0; s < st.pp; ++s) any_excluded = any_excluded || st.group({d, s}).empty();
  const std::vector<int> old_partition = ctx.current.layer_partition.empty() ? ctx.cfg.layer_partition
                                                                             : ctx.current.layer_partition;
  AdaptationPlan base = plan;
  base.layer_partition = old_partition;
  base.migration_mode = any_excluded ? MigrationMode::ProgressAware : MigrationMode::None;
  base.delta = ctx.delta;
  const auto candidate = pp_step(base, st, ctx.cfg, ctx.workload, ctx.model, ctx.sim);

  // DP: progress-aware migration. With a threshold of 0, two replicas slow at
  // different stages trade chunks back and forth, so a couple of looser
  // thresholds above the configured one are tried as well. Partitions tried
  // are the old one, pp_step's and the configured one. Keep whichever
  // combination predicts best on average over the recent batches.
  double best = std::numeric_limits<double>::infinity();
  AdaptationPlan chosen = plan;
  std::vector<std::vector<int>> partitions{old_partition};
  for (const auto* p : {&candidate, &ctx.cfg.layer_partition})
    if (std::find(partitions.begin(), partitions.end(), *p) == partitions.end()) partitions.push_back(*p);
  for (const auto& partition : partitions) {
    for (auto mode : {MigrationMode::None, MigrationMode::ProgressAware}) {
      if (mode == MigrationMode::None && any_excluded) continue;
      const int tries = mode == MigrationMode::ProgressAware ? 3 : 1;
      for (int extra = 0; extra < tries; ++extra) {
        AdaptationPlan trial = plan;
        trial.layer_partition = partition == ctx.cfg.layer_partition ? std::vector<int>{} : partition;
        trial.migration_mode = mode;
        trial.delta = ctx.delta + extra;
        double t;
        try {
          t = predict_recent(ctx, st, trial);
        } catch (const ExecutionError&) {
          continue;
        }
        if (t < best * (1.0 - 1e-9)) {
          best = t;
          chosen = std::move(trial);
        }
      }
    }
  }
  if (!std::isfinite(best)) throw ExecutionError("stranded workload: no executable ResiHP plan");
  chosen.predicted_makespan = predict(ctx, st, chosen);
  return chosen;
}

std::optional<AdaptationPlan> adapt(PolicyKind kind, const AdaptContext& ctx, bool fail_stop_trigger) {
  switch (kind) {
    case PolicyKind::None:
      if (fail_stop_trigger) throw ExecutionError("stranded workload: no fail-stop handling");
      return std::nullopt;
    case PolicyKind::Recycle:
      if (!fail_stop_trigger) return std::nullopt;
      return recycle_adapt(ctx);
    case PolicyKind::Greyhound:
      return fail_stop_trigger ? drop_replica_adapt(ctx) : greyhound_adapt(ctx);
    case PolicyKind::RecycleGreyhound: {
      if (!fail_stop_trigger) return greyhound_adapt(ctx);
      auto first = recycle_adapt(ctx);
      const auto layout = apply_plan(ctx.known, first);
      AdaptContext next{layout, ctx.cfg, first, ctx.workload, ctx.model, ctx.sim, ctx.k_min, ctx.delta, ctx.recent};
      auto plan = greyhound_adapt(next);
      plan.excluded_groups = first.excluded_groups;
      plan.policy = "recycle_greyhound";
      return plan;
    }
    case PolicyKind::ResiHP:
      return resihp_adapt(ctx);
  }
  return std::nullopt;
}

}  // namespace resilsim
