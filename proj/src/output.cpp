#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "resilsim/harness.hpp"

namespace resilsim {

namespace {

using nlohmann::ordered_json;

const char* to_string(MigrationMode mode) {
  switch (mode) {
    case MigrationMode::None: return "none";
    case MigrationMode::Static: return "static";
    case MigrationMode::ProgressAware: return "progress_aware";
  }
  return "none";
}

ordered_json group_json(GroupId g) { return ordered_json::array({g.replica, g.stage}); }

ordered_json plan_json(const AdaptationRecord& a) {
  const auto& p = a.plan;
  ordered_json tp = ordered_json::array();
  for (const auto& c : p.tp_subgroups)
    tp.push_back({{"group", group_json(c.group)}, {"members", c.members}, {"standby", c.standby}});
  ordered_json excluded = ordered_json::array();
  for (const auto& g : p.excluded_groups) excluded.push_back(group_json(g));
  return {{"iteration", a.iteration},
          {"time_s", a.time},
          {"trigger", a.trigger},
          {"policy", p.policy},
          {"tp_subgroups", tp},
          {"excluded_groups", excluded},
          {"layer_partition", p.layer_partition},
          {"replica_micro_batches", p.replica_micro_batches},
          {"migration_mode", to_string(p.migration_mode)},
          {"delta", p.delta},
          {"migrations", p.migrations.size()},
          {"reconfig_cost_s", p.reconfig_cost},
          {"predicted_makespan_s", p.predicted_makespan}};
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f.flush()) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string iterations_csv(const RunResult& result) {
  std::ostringstream os;
  os << "iteration,observed_s,predicted_s,alarms,active_devices,migrations\n";
  for (const auto& r : result.iterations) {
    std::string alarms;
    for (const auto& a : r.alarms) {
      if (!alarms.empty()) alarms += ';';
      alarms += to_string(a.kind);
    }
    os << r.iteration << ',' << format_number(r.observed_time) << ',' << format_number(r.predicted_healthy_time)
       << ',' << alarms << ',' << r.active_devices << ',' << r.migrations << '\n';
  }
  return os.str();
}

std::string adaptations_jsonl(const RunResult& result) {
  std::string out;
  for (const auto& a : result.adaptations) out += plan_json(a).dump() + '\n';
  return out;
}

std::string summary_json(const RunResult& result) {
  ordered_json detections = ordered_json::array();
  for (const auto& d : result.detections) {
    ordered_json j{{"kind", to_string(d.kind)},
                   {"device", d.device},
                   {"start_s", d.start},
                   {"detected", d.detected},
                   {"localized", d.localized}};
    if (d.detected) {
      j["detected_at_s"] = d.detected_at;
      j["latency_s"] = d.latency();
      if (d.detected_iteration >= 0 && d.first_iteration >= 0) j["latency_iterations"] = d.latency_iterations();
    }
    detections.push_back(j);
  }
  ordered_json idle = nullptr;
  if (result.idle.available) {
    const auto& b = result.idle;
    const double base = b.faulty_extra_busy;
    auto amp = [&](double x) -> ordered_json {
      if (base > 0) return x / base;
      return nullptr;
    };
    idle = {{"faulty_device", b.faulty_device},
            {"faulty_extra_busy_s", base},
            {"tp_extra_idle_s", b.tp},
            {"pp_extra_idle_s", b.pp},
            {"dp_extra_idle_s", b.dp},
            {"tp", amp(b.tp)},
            {"pp", amp(b.pp)},
            {"dp", amp(b.dp)}};
  }
  const auto& o = result.overhead;
  ordered_json j{
      {"scenario", result.scenario},
      {"policy", to_string(result.policy)},
      {"seed", result.seed},
      {"status", result.aborted ? "aborted" : "completed"},
      {"iterations_requested", result.iterations_requested},
      {"iterations_completed", result.iterations.size()},
      {"aborted_at", result.aborted ? ordered_json(result.aborted_at) : ordered_json(nullptr)},
      {"abort_reason", result.abort_reason},
      {"micro_batches_per_iteration", result.micro_batches_per_iteration},
      {"throughput_samples_per_s", result.throughput()},
      {"healthy_throughput_samples_per_s", result.healthy_throughput()},
      {"avg_iteration_time_s", result.avg_iteration_time()},
      {"wall_clock_s", result.wall_clock()},
      {"overhead_s",
       {{"filter", o.filter},
        {"validation", o.validation},
        {"reconfig", o.reconfig},
        {"lost", o.lost},
        {"total", o.total()}}},
      {"detector",
       {{"candidates", result.candidates},
        {"benign", result.benign},
        {"escalations", result.escalations},
        {"confirmed", result.confirmed},
        {"unconfirmed", result.unconfirmed},
        {"false_alarms", result.false_alarms}}},
      {"detections", detections},
      {"adaptations", result.adaptations.size()},
      {"idle_amplification", idle}};
  return j.dump(2) + '\n';
}

void prepare_output_dir(const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(out / "plotdata", ec);
  if (ec) throw std::runtime_error("cannot create output directory " + out.string() + ": " + ec.message());
  const auto probe = out / ".write_probe";
  write_file(probe, "");
  std::filesystem::remove(probe, ec);
}

void emit_outputs(const RunResult& result, const std::filesystem::path& out) {
  prepare_output_dir(out);
  write_file(out / "iterations.csv", iterations_csv(result));
  write_file(out / "adaptations.jsonl", adaptations_jsonl(result));
  write_file(out / "summary.json", summary_json(result));

  std::ostringstream tp;
  tp << "iteration,wall_clock_s,iteration_time_s,overhead_s,samples_per_s\n";
  double clock = 0.0;
  for (const auto& r : result.iterations) {
    const double t = r.observed_time + r.overhead;
    clock += t;
    tp << r.iteration << ',' << format_number(clock) << ',' << format_number(r.observed_time) << ','
       << format_number(r.overhead) << ',' << format_number(result.micro_batches_per_iteration / t) << '\n';
  }
  write_file(out / "plotdata" / "throughput.csv", tp.str());

  if (result.idle.available) {
    std::ostringstream idle;
    idle << "iteration,tp_extra_idle_s,pp_extra_idle_s,dp_extra_idle_s\n";
    for (std::size_t i = 0; i < result.idle_extra.size() && i < result.iterations.size(); ++i) {
      const auto& e = result.idle_extra[i];
      idle << result.iterations[i].iteration << ',' << format_number(e[0]) << ',' << format_number(e[1]) << ','
           << format_number(e[2]) << '\n';
    }
    write_file(out / "plotdata" / "idle.csv", idle.str());
  }
}

}  // namespace resilsim
