#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "resilsim/policies.hpp"
#include "resilsim/scheduler.hpp"

using namespace resilsim;
using resilsim::testing::batch;
using resilsim::testing::cfg_of;

namespace {

FailureEvent stop(int device) { return {FailureKind::FailStop, device, {}, 0.0, std::nullopt, 1.0}; }
FailureEvent slow(int device, double severity) {
  return {FailureKind::FailSlowCompute, device, {}, 0.0, std::nullopt, severity};
}

struct Fixture {
  ParallelismConfig cfg;
  ClusterState known;
  std::vector<MicroBatch> mbs;
  CostModel model{2.5e-6, 1.5e-10};
  AdaptationPlan current;

  Fixture(ParallelismConfig c, int nodes, int per_node, std::vector<FailureEvent> events, int micro_batches)
      : cfg(std::move(c)), mbs(batch(micro_batches, 8192)) {
    known = apply_failures(make_cluster(nodes, per_node, cfg, 300e9, 25e9), events, 1.0);
  }
  AdaptContext ctx() const { return {known, cfg, current, mbs, model, SimConfig{}}; }
};

}  // namespace

TEST_CASE("policy names round-trip") {
  for (auto k : {PolicyKind::None, PolicyKind::Recycle, PolicyKind::Greyhound, PolicyKind::RecycleGreyhound,
                 PolicyKind::ResiHP})
    CHECK(policy_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(policy_from_string("oobleck"), std::invalid_argument);
}

TEST_CASE("proportional split") {
  std::vector<double> half{0.5, 1.0}, eq{1.0, 1.0, 1.0}, some{0.0, 1.0, 3.0}, none{0.0, 0.0};
  CHECK(proportional_split(half, 12) == std::vector<int>{4, 8});
  CHECK(proportional_split(eq, 10) == std::vector<int>{4, 3, 3});
  CHECK(proportional_split(some, 8) == std::vector<int>{0, 2, 6});
  CHECK_THROWS_AS(proportional_split(none, 4), std::invalid_argument);
}

TEST_CASE("recycle: one failed device excludes its whole TP group") {
  Fixture f(cfg_of(4, 2, 2, 8), 2, 8, {stop(1)}, 8);
  auto plan = recycle_adapt(f.ctx());
  REQUIRE(plan.excluded_groups.size() == 1);
  CHECK(plan.excluded_groups[0] == GroupId{0, 0});
  CHECK(plan.migration_mode == MigrationMode::Static);
  auto after = apply_plan(f.known, plan);
  CHECK(after.group({0, 0}).empty());
  for (int id : {0, 2, 3}) CHECK(after.devices[static_cast<std::size_t>(id)].status == DeviceStatus::Standby);

  ExecutionResult detail;
  simulate_iteration(after, f.cfg, f.mbs, f.model, &plan, {}, &detail);
  for (const auto& v : detail.dag.vertices)
    if (!v.is_sync() && v.stage == 0) CHECK(v.executor == 1);
  for (int n : detail.executions) CHECK(n == 1);
  CHECK(plan.predicted_makespan > predict_iteration_time(make_cluster(2, 8, f.cfg, 300e9, 25e9), f.cfg, f.mbs,
                                                         f.model, nullptr, {}));
}

TEST_CASE("recycle: no failures gives an empty plan; a lost stage aborts") {
  Fixture healthy(cfg_of(4, 2, 2, 8), 2, 8, {}, 8);
  CHECK(recycle_adapt(healthy.ctx()).empty());
  Fixture lost(cfg_of(4, 2, 2, 8), 2, 8, {stop(0), stop(9)}, 8);
  CHECK_THROWS_AS(recycle_adapt(lost.ctx()), ExecutionError);
}

TEST_CASE("greyhound: batch split follows replica speed") {
  Fixture f(cfg_of(1, 2, 2, 4), 1, 4, {slow(0, 0.5)}, 12);
  auto plan = greyhound_adapt(f.ctx());
  CHECK(plan.replica_micro_batches == std::vector<int>{4, 8});
  Fixture eq(cfg_of(1, 2, 2, 4), 1, 4, {}, 12);
  CHECK(greyhound_adapt(eq.ctx()).replica_micro_batches == std::vector<int>{6, 6});
}

TEST_CASE("greyhound: the intra-replica bubble persists") {
  Fixture f(cfg_of(1, 2, 2, 4), 1, 4, {slow(0, 0.5)}, 12);
  auto plan = greyhound_adapt(f.ctx());
  const double even = predict_iteration_time(f.known, f.cfg, f.mbs, f.model, nullptr, {});
  CHECK(plan.predicted_makespan < even);
  auto rec = simulate_iteration(f.known, f.cfg, f.mbs, f.model, &plan, {});
  // device 1 runs the healthy stage of the slowed replica and waits on its slow neighbour
  CHECK(rec.per_device_idle[1] > rec.per_device_busy[1]);
  CHECK(rec.per_device_idle[1] > rec.per_device_idle[3]);
}

TEST_CASE("greyhound under fail-stop drops the replica") {
  Fixture f(cfg_of(1, 3, 2, 4), 1, 6, {stop(3)}, 12);
  auto plan = drop_replica_adapt(f.ctx());
  CHECK(plan.replica_micro_batches == std::vector<int>{6, 0, 6});
  CHECK(plan.excluded_groups == std::vector<GroupId>{{1, 0}, {1, 1}});
  auto after = apply_plan(f.known, plan);
  auto rec = simulate_iteration(after, f.cfg, f.mbs, f.model, &plan, {});
  CHECK(rec.observed_time == doctest::Approx(plan.predicted_makespan));
  Fixture all(cfg_of(1, 2, 2, 4), 1, 4, {stop(0), stop(3)}, 12);
  CHECK_THROWS_AS(drop_replica_adapt(all.ctx()), ExecutionError);
}

TEST_CASE("resihp: fail-stop shrinks the TP group instead of dropping it") {
  Fixture f(cfg_of(4, 2, 2, 8), 2, 8, {stop(1)}, 8);
  auto plan = resihp_adapt(f.ctx());
  REQUIRE(plan.tp_subgroups.size() == 1);
  CHECK(plan.tp_subgroups[0].group == GroupId{0, 0});
  CHECK(plan.tp_subgroups[0].members == std::vector<int>{0, 2});
  CHECK(plan.tp_subgroups[0].standby == std::vector<int>{3});
  CHECK(plan.excluded_groups.empty());
  CHECK(plan.predicted_makespan <= recycle_adapt(f.ctx()).predicted_makespan);
}

TEST_CASE("resihp: node-local standby devices are re-admitted") {
  Fixture f(cfg_of(2, 1, 2, 8), 1, 6, {stop(1)}, 8);
  REQUIRE(f.known.devices[4].status == DeviceStatus::Standby);
  auto plan = resihp_adapt(f.ctx());
  REQUIRE(plan.tp_subgroups.size() == 1);
  CHECK(plan.tp_subgroups[0].members == std::vector<int>{0, 4});
  CHECK(plan.tp_subgroups[0].standby == std::vector<int>{5});
  auto after = apply_plan(f.known, plan);
  CHECK(after.group_speed({0, 0}) == 1.0);
}

TEST_CASE("resihp: an unrecoverable only replica of a stage aborts") {
  Fixture f(cfg_of(2, 1, 2, 8), 1, 4, {stop(0), stop(1)}, 8);
  AdaptContext ctx = f.ctx();
  ctx.k_min = 1;
  CHECK_THROWS_AS(resihp_adapt(ctx), ExecutionError);
}

TEST_CASE("resihp: a slow stage gets fewer layers") {
  Fixture f(cfg_of(1, 1, 3, 12), 1, 3, {slow(1, 0.5)}, 8);
  auto plan = resihp_adapt(f.ctx());
  CHECK(plan.layer_partition == std::vector<int>{5, 2, 5});
  CHECK(plan.predicted_makespan < predict_iteration_time(f.known, f.cfg, f.mbs, f.model, nullptr, {}));
}

TEST_CASE("resihp: migration covers an excluded group") {
  Fixture f(cfg_of(2, 2, 2, 8), 1, 8, {stop(2), stop(3)}, 8);
  auto plan = resihp_adapt(f.ctx());
  CHECK(plan.excluded_groups == std::vector<GroupId>{{0, 1}});
  CHECK(plan.migration_mode == MigrationMode::ProgressAware);
  auto after = apply_plan(f.known, plan);
  ExecutionResult detail;
  auto rec = simulate_iteration(after, f.cfg, f.mbs, f.model, &plan, {}, &detail);
  CHECK(rec.observed_time == doctest::Approx(plan.predicted_makespan));
  for (int n : detail.executions) CHECK(n == 1);
}

TEST_CASE("resihp: candidates are scored on the recent batches too") {
  Fixture f(cfg_of(1, 2, 2, 8), 1, 4, {slow(0, 0.5), slow(3, 0.6)}, 8);
  std::vector<std::vector<MicroBatch>> recent;
  for (std::int64_t n : {2048, 16384, 4096}) recent.push_back(batch(8, n));
  auto ctx = f.ctx();
  ctx.recent = recent;
  auto plan = resihp_adapt(ctx);

  auto mean = [&](const AdaptationPlan& p) {
    double s = predict_iteration_time(f.known, f.cfg, f.mbs, f.model, &p, {});
    for (const auto& b : recent) s += predict_iteration_time(f.known, f.cfg, b, f.model, &p, {});
    return s / 4.0;
  };
  CHECK(plan.predicted_makespan == doctest::Approx(predict_iteration_time(f.known, f.cfg, f.mbs, f.model, &plan, {})));
  // no other migration setting on either partition does better on average
  const double chosen = mean(plan);
  for (const auto& part : {std::vector<int>{}, plan.layer_partition})
    for (int mode = 0; mode < 4; ++mode) {
      AdaptationPlan trial = plan;
      trial.layer_partition = part;
      trial.migration_mode = mode == 0 ? MigrationMode::None : MigrationMode::ProgressAware;
      trial.delta = mode == 0 ? 0 : mode - 1;
      CHECK(chosen <= mean(trial) + 1e-12);
    }
}

TEST_CASE("adapt dispatch") {
  Fixture stopped(cfg_of(1, 2, 2, 4), 1, 4, {stop(0)}, 8);
  Fixture slowed(cfg_of(1, 2, 2, 4), 1, 4, {slow(0, 0.5)}, 12);
  CHECK_THROWS_AS(adapt(PolicyKind::None, stopped.ctx(), true), ExecutionError);
  CHECK_FALSE(adapt(PolicyKind::None, slowed.ctx(), false).has_value());
  CHECK_FALSE(adapt(PolicyKind::Recycle, slowed.ctx(), false).has_value());
  CHECK(adapt(PolicyKind::Greyhound, slowed.ctx(), false)->replica_micro_batches == std::vector<int>{4, 8});

  auto chained = adapt(PolicyKind::RecycleGreyhound, stopped.ctx(), true);
  REQUIRE(chained.has_value());
  CHECK(chained->policy == "recycle_greyhound");
  CHECK(chained->excluded_groups == std::vector<GroupId>{{0, 0}});
  CHECK(chained->migration_mode == MigrationMode::Static);
  for (const auto& m : chained->migrations) CHECK(m.executor == 1);
  CHECK(adapt(PolicyKind::ResiHP, slowed.ctx(), false)->policy == "resihp");
}
