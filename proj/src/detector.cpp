#include "resilsim/detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace resilsim {

void HeartbeatConfig::check() const {
  if (!(interval > 0.0)) throw std::invalid_argument("heartbeat interval must be positive");
  if (miss_threshold < 1) throw std::invalid_argument("heartbeat miss threshold must be >= 1");
}

double heartbeat_declaration_time(double failure_start, const HeartbeatConfig& cfg) {
  const double due = failure_start + cfg.miss_threshold * cfg.interval;
  // relative slack so that a due time sitting on a tick is not pushed past it
  const double k = std::ceil(due / cfg.interval - 1e-9);
  return k * cfg.interval;
}

HeartbeatMonitor::HeartbeatMonitor(HeartbeatConfig cfg, const ClusterState& state,
                                   std::span<const FailureEvent> events)
    : cfg_(cfg) {
  cfg_.check();
  std::map<int, double> first_stop;
  for (const auto& ev : events) {
    if (ev.kind != FailureKind::FailStop) continue;
    if (ev.device < 0 || ev.device >= static_cast<int>(state.devices.size()))
      throw std::out_of_range("fail-stop targets unknown device " + std::to_string(ev.device));
    auto [it, fresh] = first_stop.emplace(ev.device, ev.start);
    if (!fresh) it->second = std::min(it->second, ev.start);
  }
  std::map<std::pair<double, int>, std::vector<int>> by_tick;
  for (auto [dev, t0] : first_stop)
    by_tick[{heartbeat_declaration_time(t0, cfg_), state.devices[static_cast<std::size_t>(dev)].node_id}].push_back(dev);
  for (auto& [key, devs] : by_tick) pending_.push_back({key.first, key.second, std::move(devs)});
}

std::vector<FailStopDecision> HeartbeatMonitor::scan(double t) {
  std::vector<FailStopDecision> out;
  while (next_ < pending_.size() && pending_[next_].time <= t) out.push_back(pending_[next_++]);
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of empty sample");
  const auto mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

std::optional<std::size_t> detect_change_point(std::span<const double> series, const ChangePointConfig& cfg) {
  const auto w = static_cast<std::size_t>(cfg.window);
  if (w == 0 || series.size() < w + 1) return std::nullopt;
  const auto newest = series.size() - 1;
  std::vector<double> window(series.begin() + static_cast<std::ptrdiff_t>(newest - w),
                             series.begin() + static_cast<std::ptrdiff_t>(newest));
  const double med = median(window);
  for (auto& x : window) x = std::abs(x - med);
  const double mad = median(window);
  // tolerance keeps a flat noiseless series from flagging rounding error
  const double slack = 1e-9 * std::abs(med);
  if (std::abs(series[newest] - med) > cfg.kappa * mad + slack) return newest;
  return std::nullopt;
}

FilterVerdict filter_candidate(double observed, double predicted, double factor) {
  return observed > factor * predicted ? FilterVerdict::Escalate : FilterVerdict::Benign;
}

ValidationResult validate(std::span<const GroupTiming> timings, double factor, double cost) {
  ValidationResult r;
  r.cost = cost;
  for (const auto& g : timings) {
    if (!(g.predicted > 0.0)) continue;
    if (g.measured > factor * g.predicted) {
      r.degraded.push_back(g.group);
      r.severity.push_back(g.predicted / g.measured);
    }
  }
  r.confirmed = !r.degraded.empty();
  return r;
}

void DetectorConfig::check() const {
  heartbeat.check();
  if (change_point.window < 1) throw std::invalid_argument("change-point window must be >= 1");
  if (!(change_point.kappa > 0.0)) throw std::invalid_argument("kappa must be positive");
  if (!(escalation_factor > 1.0)) throw std::invalid_argument("escalation factor must exceed 1");
  if (filter_cost < 0.0 || validation_cost < 0.0) throw std::invalid_argument("detector costs must be >= 0");
}

FailSlowDetector::FailSlowDetector(DetectorConfig cfg) : cfg_(cfg) { cfg_.check(); }

ScreenResult FailSlowDetector::observe(double observed, double predicted) {
  series_.push_back(observed);
  ScreenResult r;
  // Re-arming after a reset: the window is too short for the change-point
  // test, and the config-aware predictor stands in for the missing history.
  if (rearming_ && cfg_.filter_enabled && series_.size() <= static_cast<std::size_t>(cfg_.change_point.window)) {
    r.cost = cfg_.filter_cost;
    r.verdict = filter_candidate(observed, predicted, cfg_.escalation_factor) == FilterVerdict::Escalate
                    ? ScreenVerdict::Escalate
                    : ScreenVerdict::Checked;
    return r;
  }
  if (!detect_change_point(series_, cfg_.change_point)) return r;
  if (!cfg_.filter_enabled) {
    r.verdict = ScreenVerdict::Escalate;
    return r;
  }
  r.cost = cfg_.filter_cost;
  if (filter_candidate(observed, predicted, cfg_.escalation_factor) == FilterVerdict::Escalate) {
    r.verdict = ScreenVerdict::Escalate;
  } else {
    r.verdict = ScreenVerdict::Benign;
    series_.pop_back();
  }
  return r;
}

void FailSlowDetector::resolve(bool confirmed) {
  if (!confirmed && !series_.empty()) series_.pop_back();
}

void FailSlowDetector::reset() {
  series_.clear();
  rearming_ = true;
}

}  // namespace resilsim
