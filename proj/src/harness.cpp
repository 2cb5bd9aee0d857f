#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "resilsim/harness.hpp"

namespace resilsim {

namespace {

std::uint64_t iteration_seed(std::uint64_t seed, int iteration) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(iteration + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<int> active_devices(const ClusterState& st) {
  std::vector<int> out;
  for (const auto& g : st.tp_groups) out.insert(out.end(), g.begin(), g.end());
  std::sort(out.begin(), out.end());
  return out;
}

bool is_active(const std::vector<int>& sorted_active, int device) {
  return std::binary_search(sorted_active.begin(), sorted_active.end(), device);
}

std::vector<int> effective_partition(const AdaptationPlan& plan, const ParallelismConfig& cfg) {
  return plan.layer_partition.empty() ? cfg.layer_partition : plan.layer_partition;
}

// Measured compute per executor group against the same chunks at known speeds.
std::vector<GroupTiming> group_timings(const ExecutionResult& detail, const ClusterState& known,
                                       const ParallelismConfig& cfg, std::span<const MicroBatch> mbs,
                                       const CostModel& model, const AdaptationPlan& plan) {
  const auto split = distribute_micro_batches(mbs, cfg.dp, plan.replica_micro_batches);
  const auto layers = effective_partition(plan, cfg);
  std::vector<GroupTiming> out;
  for (int d = 0; d < cfg.dp; ++d)
    for (int s = 0; s < cfg.pp; ++s) out.push_back({{d, s}, 0.0, 0.0});
  for (const auto& v : detail.dag.vertices) {
    if (v.is_sync()) continue;
    auto& t = out[static_cast<std::size_t>(v.executor * cfg.pp + v.stage)];
    const auto& mb = split[static_cast<std::size_t>(v.replica)][static_cast<std::size_t>(v.micro_batch)];
    t.measured += v.cost;
    t.predicted += predict_chunk_time(mb, v.kind, model, layers[static_cast<std::size_t>(v.stage)],
                                      known.group_speed({v.executor, v.stage}));
  }
  return out;
}

class Runner {
 public:
  explicit Runner(const Scenario& sc)
      : sc_(sc),
        cfg_(sc.parallelism),
        initial_(make_cluster(sc.cluster.nodes, sc.cluster.devices_per_node, sc.parallelism, sc.cluster.intra_bw,
                              sc.cluster.inter_bw)),
        layout_(initial_),
        known_(initial_),
        detector_(sc.detector),
        workload_(sc.workload, sc.seed),
        materialized_(sc.failures.size(), -1) {
    plan_.policy = to_string(sc.policy);
    quiet_ = sc.sim;
    quiet_.noise_sigma = 0.0;
    out_.scenario = sc.name;
    out_.policy = sc.policy;
    out_.seed = sc.seed;
    out_.iterations_requested = sc.iterations;
    out_.micro_batches_per_iteration = sc.workload.micro_batches;
    for (std::size_t i = 0; i < sc.failures.size(); ++i)
      if (sc.failures[i].event.kind == FailureKind::FailSlowCompute) {
        faulty_spec_ = static_cast<int>(i);
        break;
      }
  }

  RunResult run() {
    for (int it = 0; it < sc_.iterations; ++it) {
      if (!step(it)) break;
    }
    finish_idle();
    return std::move(out_);
  }

 private:
  bool step(int it) {
    materialize(it);
    const auto mbs = workload_.next();
    SimConfig noisy = sc_.sim;
    noisy.noise_seed = iteration_seed(sc_.seed, it);

    IterationRecord rec;
    ExecutionResult detail;
    double overhead = 0.0;
    std::vector<Alarm> alarms;
    declare_standby_failures(alarms);

    for (int attempt = 0;; ++attempt) {
      if (attempt > 2 * static_cast<int>(initial_.devices.size()) + 2)
        return abort(it, "policy left a failed device in an active group");
      const auto truth = apply_failures(layout_, events_, clock_);
      const auto active = active_devices(truth);
      auto hit = first_stop_on(active, clock_, true);
      if (!hit) {
        try {
          rec = simulate_iteration(truth, cfg_, mbs, sc_.model, &plan_, noisy, &detail);
        } catch (const ExecutionError& e) {
          return abort(it, e.what());
        }
        hit = first_stop_on(active, clock_ + rec.observed_time, false);
      }
      if (!hit) break;

      // the iteration is lost until the heartbeat declares the failure
      const double declared = std::max(clock_, heartbeat_declaration_time(*hit, sc_.detector.heartbeat));
      overhead += declared - clock_;
      out_.overhead.lost += declared - clock_;
      clock_ = declared;
      declare_until(clock_, alarms);
      if (!adapt_now(it, true, mbs, alarms, overhead)) return abort(it, abort_reason_);
    }

    rec.iteration = it;
    rec.predicted_healthy_time = predict_iteration_time(known_, cfg_, mbs, sc_.model, &plan_, quiet_);
    const ClusterState ran_on = layout_;  // screen() may adapt before the iteration is recorded
    track_slow_faults(it);
    const double finished = clock_ + rec.observed_time;
    double extra = 0.0;
    if (sc_.policy != PolicyKind::Recycle) {
      // an adaptation that cannot be carried out ends the run before this iteration counts
      if (!screen(it, rec, detail, mbs, finished, alarms, extra)) return abort(it, abort_reason_);
    }
    overhead += extra;
    record(rec, overhead, alarms, mbs, noisy, ran_on);
    if (recent_.size() == kRecentBatches) recent_.erase(recent_.begin());
    recent_.push_back(mbs);
    clock_ = finished + extra;
    return true;
  }

  // Fail-slow path: change-point screen, filter, validation, adaptation.
  bool screen(int it, const IterationRecord& rec, const ExecutionResult& detail, std::span<const MicroBatch> mbs,
              double finished, std::vector<Alarm>& alarms, double& extra) {
    const auto verdict = detector_.observe(rec.observed_time, rec.predicted_healthy_time);
    if (verdict.verdict == ScreenVerdict::Quiet) return true;
    extra += verdict.cost;
    out_.overhead.filter += verdict.cost;
    if (verdict.verdict == ScreenVerdict::Checked) return true;
    ++out_.candidates;
    alarms.push_back({AlarmKind::Candidate, finished, {}, {}, ""});
    if (verdict.verdict == ScreenVerdict::Benign) {
      ++out_.benign;
      alarms.push_back({AlarmKind::Benign, finished + extra, {}, {}, ""});
      return true;
    }
    ++out_.escalations;
    alarms.push_back({AlarmKind::Escalated, finished + extra, {}, {}, ""});

    const auto timings = group_timings(detail, known_, cfg_, mbs, sc_.model, plan_);
    const auto v = validate(timings, sc_.detector.escalation_factor, sc_.detector.validation_cost);
    extra += v.cost;
    out_.overhead.validation += v.cost;
    const double at = finished + extra;

    // links are benchmarked too, so a degraded fabric is found even with healthy compute
    const auto truth = apply_failures(layout_, events_, clock_);
    std::vector<std::pair<int, int>> slow_links;
    for (const auto& [link, factor] : truth.link_factor) {
      auto it_known = known_.link_factor.find(link);
      const double was = it_known == known_.link_factor.end() ? 1.0 : it_known->second;
      if (factor * sc_.detector.escalation_factor < was) slow_links.push_back(link);
    }

    if (!v.confirmed && slow_links.empty()) {
      ++out_.unconfirmed;
      ++out_.false_alarms;
      detector_.resolve(false);
      alarms.push_back({AlarmKind::Unconfirmed, at, {}, {}, ""});
      return true;
    }
    ++out_.confirmed;
    detector_.resolve(true);
    Alarm conf{AlarmKind::Confirmed, at, {}, v.degraded, ""};
    bool real = false;
    for (const auto& g : v.degraded)
      for (int id : truth.group(g)) {
        const auto i = static_cast<std::size_t>(id);
        conf.devices.push_back(id);
        known_.devices[i].speed = truth.devices[i].speed;
        if (known_.devices[i].status == DeviceStatus::Healthy && truth.devices[i].speed < truth.devices[i].base_speed)
          known_.devices[i].status = DeviceStatus::FailSlow;
        real = real || truth.devices[i].speed < truth.devices[i].base_speed;
      }
    for (const auto& link : slow_links) {
      known_.link_factor[link] = truth.link_factor.at(link);
      real = true;
      conf.note += (conf.note.empty() ? "" : " ") + std::string("link ") + std::to_string(link.first) + "-" +
                   std::to_string(link.second);
    }
    if (!real) ++out_.false_alarms;
    alarms.push_back(conf);
    mark_detected(it, at, v.degraded, slow_links);

    const double before = clock_;
    clock_ = at;
    const bool ok = adapt_now(it, false, mbs, alarms, extra);
    clock_ = before;
    return ok;
  }

  bool adapt_now(int it, bool fail_stop, std::span<const MicroBatch> mbs, std::vector<Alarm>& alarms,
                 double& overhead) {
    std::optional<AdaptationPlan> next;
    try {
      AdaptContext ctx{known_, cfg_, plan_, mbs, sc_.model, quiet_, sc_.k_min, sc_.delta, recent_};
      next = adapt(sc_.policy, ctx, fail_stop);
    } catch (const ExecutionError& e) {
      abort_reason_ = e.what();
      alarms.push_back({AlarmKind::Aborted, clock_, {}, {}, abort_reason_});
      return false;
    }
    if (!next) return true;
    AdaptationPlan explicit_plan = *next;
    explicit_plan.layer_partition = effective_partition(*next, cfg_);
    const auto old = effective_partition(plan_, cfg_);
    const double cost = reconfig_cost(explicit_plan, known_, old, sc_.reconfig);
    next->reconfig_cost = cost;
    plan_ = *next;
    layout_ = apply_plan(layout_, plan_);
    known_ = apply_plan(known_, plan_);
    detector_.reset();
    overhead += cost;
    out_.overhead.reconfig += cost;
    clock_ += cost;
    out_.adaptations.push_back({it, clock_, fail_stop ? "fail_stop" : "fail_slow", plan_});
    alarms.push_back({AlarmKind::Adapted, clock_, {}, {}, plan_.policy});
    return true;
  }

  bool abort(int it, const std::string& reason) {
    out_.aborted = true;
    out_.aborted_at = it;
    out_.abort_reason = reason;
    return false;
  }

  void record(IterationRecord& rec, double overhead, std::vector<Alarm>& alarms,
              std::span<const MicroBatch> mbs, const SimConfig& noisy, const ClusterState& ran_on) {
    rec.overhead = overhead;
    rec.alarms = std::move(alarms);
    out_.iterations.push_back(rec);
    out_.healthy_time.push_back(predict_iteration_time(initial_, cfg_, mbs, sc_.model, nullptr, quiet_));
    accumulate_idle(rec, mbs, noisy, ran_on);
  }

  // Events pinned to iteration boundaries get their wall-clock times here.
  void materialize(int it) {
    bool new_stop = false;
    for (std::size_t i = 0; i < sc_.failures.size(); ++i) {
      const auto& spec = sc_.failures[i];
      if (materialized_[i] < 0 && (!spec.start_iteration || *spec.start_iteration == it)) {
        FailureEvent ev = spec.event;
        if (spec.start_iteration) ev.start = clock_;
        materialized_[i] = static_cast<int>(events_.size());
        events_.push_back(ev);
        new_stop = new_stop || ev.kind == FailureKind::FailStop;
      }
      if (materialized_[i] >= 0 && spec.end_iteration && *spec.end_iteration == it)
        events_[static_cast<std::size_t>(materialized_[i])].end = clock_;
    }
    if (new_stop) heartbeat_.emplace(sc_.detector.heartbeat, initial_, events_);
  }

  std::optional<double> first_stop_on(const std::vector<int>& active, double horizon, bool inclusive) const {
    std::optional<double> first;
    for (const auto& ev : events_) {
      if (ev.kind != FailureKind::FailStop || !is_active(active, ev.device)) continue;
      if (inclusive ? ev.start > horizon : ev.start >= horizon) continue;
      if (!first || ev.start < *first) first = ev.start;
    }
    return first;
  }

  void declare_until(double t, std::vector<Alarm>& alarms) {
    if (!heartbeat_) return;
    for (auto& d : heartbeat_->scan(t)) {
      std::vector<int> fresh;
      for (int id : d.devices)
        if (declared_.insert(id).second) fresh.push_back(id);
      if (fresh.empty()) continue;
      for (int id : fresh) {
        known_.devices[static_cast<std::size_t>(id)].status = DeviceStatus::FailStop;
        for (const auto& ev : events_)
          if (ev.kind == FailureKind::FailStop && ev.device == id) {
            DetectionRecord r;
            r.kind = FailureKind::FailStop;
            r.device = id;
            r.start = ev.start;
            r.detected = true;
            r.detected_at = d.time;
            r.localized = true;
            out_.detections.push_back(r);
            break;
          }
      }
      alarms.push_back({AlarmKind::FailStopDeclared, d.time, fresh, {}, "node " + std::to_string(d.node)});
    }
  }

  // Failures of idle (standby or excluded) devices only update the known state.
  void declare_standby_failures(std::vector<Alarm>& alarms) { declare_until(clock_, alarms); }

  void track_slow_faults(int it) {
    const auto active = active_devices(layout_);
    for (std::size_t i = 0; i < events_.size(); ++i) {
      const auto& ev = events_[i];
      if (ev.kind == FailureKind::FailStop || !ev.active_at(clock_) || slow_record_.count(i)) continue;
      if (ev.kind == FailureKind::FailSlowCompute && !is_active(active, ev.device)) continue;
      DetectionRecord r;
      r.kind = ev.kind;
      r.device = ev.kind == FailureKind::FailSlowComm ? -1 : ev.device;
      r.start = ev.start;
      r.first_iteration = it;
      slow_record_[i] = out_.detections.size();
      out_.detections.push_back(r);
    }
  }

  void mark_detected(int it, double at, const std::vector<GroupId>& groups,
                     const std::vector<std::pair<int, int>>& links) {
    for (const auto& [ev_index, rec_index] : slow_record_) {
      auto& r = out_.detections[rec_index];
      if (r.detected) continue;
      const auto& ev = events_[ev_index];
      bool hit = false;
      if (ev.kind == FailureKind::FailSlowComm) {
        const std::pair<int, int> key{std::min(ev.link.first, ev.link.second), std::max(ev.link.first, ev.link.second)};
        hit = std::find(links.begin(), links.end(), key) != links.end();
      } else {
        for (const auto& g : groups) {
          const auto& members = layout_.group(g);
          hit = hit || std::find(members.begin(), members.end(), ev.device) != members.end();
        }
      }
      if (!hit) continue;
      r.detected = true;
      r.localized = true;
      r.detected_at = at;
      r.detected_iteration = it;
    }
  }

  void accumulate_idle(const IterationRecord& rec, std::span<const MicroBatch> mbs, const SimConfig& noisy,
                       const ClusterState& ran_on) {
    if (faulty_spec_ < 0 || materialized_[static_cast<std::size_t>(faulty_spec_)] < 0) return;
    const auto& ev = events_[static_cast<std::size_t>(materialized_[static_cast<std::size_t>(faulty_spec_)])];
    if (!ev.active_at(clock_)) return;
    const int f = ev.device;
    GroupId home{-1, -1};
    for (int d = 0; d < cfg_.dp; ++d)
      for (int s = 0; s < cfg_.pp; ++s) {
        const auto& g = initial_.group({d, s});
        if (std::find(g.begin(), g.end(), f) != g.end()) home = {d, s};
      }
    if (home.replica < 0) return;
    const auto healthy = simulate_iteration(initial_, cfg_, mbs, sc_.model, nullptr, noisy);
    std::vector<double> extra(3, 0.0);
    for (int d = 0; d < cfg_.dp; ++d)
      for (int s = 0; s < cfg_.pp; ++s)
        for (int id : ran_on.group({d, s})) {
          if (id == f) continue;
          const auto i = static_cast<std::size_t>(id);
          const double more = rec.per_device_idle[i] - healthy.per_device_idle[i];
          if (d != home.replica) extra[2] += more;
          else if (s != home.stage) extra[1] += more;
          else extra[0] += more;
        }
    const auto active = active_devices(ran_on);
    const auto fi = static_cast<std::size_t>(f);
    if (is_active(active, f)) out_.idle.faulty_extra_busy += rec.per_device_busy[fi] - healthy.per_device_busy[fi];
    out_.idle.available = true;
    out_.idle.faulty_device = f;
    out_.idle.tp += extra[0];
    out_.idle.pp += extra[1];
    out_.idle.dp += extra[2];
    while (out_.idle_extra.size() + 1 < out_.iterations.size()) out_.idle_extra.push_back({0.0, 0.0, 0.0});
    out_.idle_extra.push_back(extra);
  }

  void finish_idle() {
    if (out_.idle.available)
      while (out_.idle_extra.size() < out_.iterations.size()) out_.idle_extra.push_back({0.0, 0.0, 0.0});
  }

  const Scenario& sc_;
  const ParallelismConfig& cfg_;
  const ClusterState initial_;
  ClusterState layout_;  // groups and standby, no failures applied
  ClusterState known_;   // layout plus confirmed speeds and declared fail-stops
  AdaptationPlan plan_;
  FailSlowDetector detector_;
  WorkloadGenerator workload_;
  static constexpr std::size_t kRecentBatches = 3;
  std::vector<std::vector<MicroBatch>> recent_;
  SimConfig quiet_;
  std::vector<FailureEvent> events_;
  std::vector<int> materialized_;  // spec index -> events_ index, -1 until known
  std::optional<HeartbeatMonitor> heartbeat_;
  std::set<int> declared_;
  std::map<std::size_t, std::size_t> slow_record_;  // events_ index -> detections index
  int faulty_spec_ = -1;
  double clock_ = 0.0;
  std::string abort_reason_;
  RunResult out_;
};

}  // namespace

double RunResult::wall_clock() const {
  double t = 0.0;
  for (const auto& r : iterations) t += r.observed_time + r.overhead;
  return t;
}

double RunResult::avg_iteration_time() const {
  return iterations.empty() ? 0.0 : wall_clock() / static_cast<double>(iterations.size());
}

double RunResult::throughput() const {
  const double avg = avg_iteration_time();
  return avg > 0.0 ? micro_batches_per_iteration / avg : 0.0;
}

double RunResult::healthy_throughput() const {
  if (healthy_time.empty()) return 0.0;
  const double avg = std::accumulate(healthy_time.begin(), healthy_time.end(), 0.0) /
                     static_cast<double>(healthy_time.size());
  return micro_batches_per_iteration / avg;
}

RunResult run_scenario(const Scenario& sc) {
  check_scenario(sc);
  return Runner(sc).run();
}

}  // namespace resilsim
