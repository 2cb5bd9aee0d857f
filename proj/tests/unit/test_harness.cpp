#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "resilsim/harness.hpp"

using namespace resilsim;
namespace fs = std::filesystem;

namespace {

const char* kBase = R"(
name: unit
seed: 11
iterations: 30
policy: resihp
cluster: {nodes: 2, devices_per_node: 8}
parallelism: {tp: 2, dp: 2, pp: 4, layers: 16}
)";
const char* kShort = "workload: {tokens_per_micro_batch: 4096, micro_batches: 8}\n";
// 16 micro-batches per replica, so one slow stage dominates the iteration.
const char* kLong = "workload: {tokens_per_micro_batch: 4096, micro_batches: 32}\n";

Scenario base_with(const std::string& extra = "") { return parse_scenario(std::string(kBase) + kShort + extra); }

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("resilsim_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("scenario defaults and overrides") {
  const auto sc = base_with();
  CHECK(sc.name == "unit");
  CHECK(sc.seed == 11);
  CHECK(sc.policy == PolicyKind::ResiHP);
  CHECK(sc.parallelism.layer_partition == std::vector<int>{4, 4, 4, 4});
  CHECK(sc.workload.generator == DocGenerator::Lognormal);

  const auto d = parse_scenario("cluster: {nodes: 1, devices_per_node: 8}\nparallelism: {tp: 2, dp: 1, pp: 2}\n");
  CHECK(d.parallelism.num_layers == 8);
  CHECK(d.iterations == 100);
}

TEST_CASE("JSON is accepted as scenario input") {
  const auto sc = parse_scenario(R"({"name": "j", "cluster": {"nodes": 1, "devices_per_node": 4},
    "parallelism": {"tp": 1, "dp": 2, "pp": 2, "schedule": "zbh"}, "policy": "recycle"})");
  CHECK(sc.name == "j");
  CHECK(sc.parallelism.schedule == Schedule::ZBH);
  CHECK(sc.policy == PolicyKind::Recycle);
}

TEST_CASE("scenario errors name the problem") {
  CHECK_THROWS_AS(base_with("bogus: 1\n"), ScenarioError);
  CHECK_THROWS_AS(base_with("seed: 4\n"), ScenarioError);  // duplicate key
  CHECK_THROWS_AS(parse_scenario("cluster: {nodes: 1, devices_per_node: 8}\nparallelism: {tp: 4, dp: 2, pp: 2}\n"),
                  ScenarioError);  // 16 devices needed
  CHECK_THROWS_AS(parse_scenario("parallelism: {tp: 1, dp: 1, pp: 2, layers: 4, layer_partition: [1, 2]}\n"),
                  ScenarioError);
  CHECK_THROWS_AS(base_with("failures:\n  - {kind: fail_stop, device: 99, start: 1}\n"), ScenarioError);
  CHECK_THROWS_AS(base_with("failures:\n  - {kind: fail_slow_compute, device: 1, start: 1, severity: 1.5}\n"),
                  ScenarioError);
  CHECK_THROWS_AS(base_with("failures:\n  - {kind: fail_stop, device: 1, start: 1, start_iteration: 2}\n"),
                  ScenarioError);
  CHECK_THROWS_AS(base_with("failures:\n  - {kind: fail_slow_comm, link: [0, 5], start: 1, severity: 0.5}\n"),
                  ScenarioError);
  CHECK_THROWS_AS(parse_scenario("seed: [1, 2]\n"), ScenarioError);
  CHECK_THROWS_AS(parse_scenario("{unbalanced"), ScenarioError);
}

TEST_CASE("trace files resolve relative to the scenario") {
  const auto dir = temp_dir("trace");
  fs::create_directories(dir);
  std::ofstream(dir / "lens.txt") << "# lengths\n1000\n\n3000 # tail\n2000\n";
  std::ofstream(dir / "s.yaml") << kBase << "workload: {generator: trace, trace_file: lens.txt, "
                                   "tokens_per_micro_batch: 4096, micro_batches: 4}\n";
  const auto sc = load_scenario(dir / "s.yaml");
  CHECK(sc.workload.trace == std::vector<std::int64_t>{1000, 3000, 2000});

  std::ofstream(dir / "bad.txt") << "12\nabc\n";
  CHECK_THROWS_AS(read_length_trace(dir / "bad.txt"), ScenarioError);
}

TEST_CASE("workload generator is deterministic and fills every micro-batch") {
  WorkloadSpec spec;
  spec.tokens_per_micro_batch = 4096;
  spec.micro_batches = 6;
  WorkloadGenerator a(spec, 5), b(spec, 5), c(spec, 6);
  std::set<std::int64_t> loads;
  for (int it = 0; it < 20; ++it) {
    const auto x = a.next(), y = b.next(), z = c.next();
    REQUIRE(x.size() == 6);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(x[i].doc_lengths == y[i].doc_lengths);
      CHECK(x[i].id == it * 6 + static_cast<int>(i));
      CHECK(std::accumulate(x[i].doc_lengths.begin(), x[i].doc_lengths.end(), std::int64_t{0}) == 4096);
      loads.insert(quad_load(x[i]));
    }
    if (it == 0) {
      bool differs = false;
      for (std::size_t i = 0; i < x.size(); ++i) differs = differs || x[i].doc_lengths != z[i].doc_lengths;
      CHECK(differs);
    }
  }
  CHECK(loads.size() > 10);
}

TEST_CASE("trace generator cycles") {
  WorkloadSpec spec;
  spec.generator = DocGenerator::Trace;
  spec.trace = {3000, 1096, 2048};
  spec.tokens_per_micro_batch = 4096;
  spec.micro_batches = 1;
  WorkloadGenerator g(spec, 0);
  CHECK(g.next()[0].doc_lengths == std::vector<std::int64_t>{3000, 1096});
}

TEST_CASE("failure-free throughput equals the healthy-makespan value exactly") {
  const auto sc = base_with();
  const auto r = run_scenario(sc);
  REQUIRE(!r.aborted);
  REQUIRE(r.iterations.size() == 30);

  // oracle: the healthy predictor over an independently generated workload
  WorkloadGenerator gen(sc.workload, sc.seed);
  const auto cluster = make_cluster(2, 8, sc.parallelism, sc.cluster.intra_bw, sc.cluster.inter_bw);
  double total = 0.0;
  for (int it = 0; it < 30; ++it) total += predict_iteration_time(cluster, sc.parallelism, gen.next(), sc.model, nullptr, sc.sim);
  // workload swings still raise candidates, and each one is charged its filter cost
  CHECK(r.escalations == 0);
  CHECK(r.adaptations.empty());
  CHECK(r.overhead.total() == doctest::Approx(r.candidates * sc.detector.filter_cost));
  double charged = 0.0;
  for (std::size_t i = 0; i < r.iterations.size(); ++i) {
    CHECK(r.iterations[i].observed_time == r.healthy_time[i]);
    charged += r.healthy_time[i] + r.iterations[i].overhead;
  }
  CHECK(r.throughput() == 8.0 / (charged / 30.0));

  auto free = sc;
  free.detector.filter_cost = 0.0;
  CHECK(run_scenario(free).throughput() == 8.0 / (total / 30.0));
}

TEST_CASE("row and line counts") {
  auto sc = base_with();
  sc.iterations = 100;
  const auto r = run_scenario(sc);
  CHECK(lines(iterations_csv(r)) == 101);
  CHECK(adaptations_jsonl(r).empty());
}

TEST_CASE("two adaptations give two plan lines") {
  const auto sc = parse_scenario(std::string(kBase) + kLong + R"(failures:
  - {kind: fail_slow_compute, device: 2, start_iteration: 22, severity: 0.4}
  - {kind: fail_stop, device: 12, start_iteration: 26}
)");
  const auto r = run_scenario(sc);
  REQUIRE(!r.aborted);
  REQUIRE(r.adaptations.size() == 2);
  CHECK(r.adaptations[0].trigger == "fail_slow");
  CHECK(r.adaptations[1].trigger == "fail_stop");
  const auto jl = adaptations_jsonl(r);
  CHECK(lines(jl) == 2);
  std::istringstream in(jl);
  std::string line;
  while (std::getline(in, line)) CHECK(nlohmann::json::parse(line).contains("tp_subgroups"));
  // both faults are found and attributed
  REQUIRE(r.detections.size() == 2);
  for (const auto& d : r.detections) CHECK(d.localized);
  CHECK(r.false_alarms == 0);
}

TEST_CASE("abort is recorded with its iteration") {
  auto sc = base_with("failures:\n  - {kind: fail_stop, device: 3, start_iteration: 40}\n");
  sc.iterations = 60;
  sc.policy = PolicyKind::None;
  const auto r = run_scenario(sc);
  CHECK(r.aborted);
  CHECK(r.aborted_at == 40);
  CHECK(r.iterations.size() == 40);
  const auto j = nlohmann::json::parse(summary_json(r));
  CHECK(j["aborted_at"] == 40);
  CHECK(j["status"] == "aborted");
  CHECK(j["iterations_completed"] == 40);
}

TEST_CASE("fail-stop time is charged up to the heartbeat declaration") {
  auto sc = base_with("failures:\n  - {kind: fail_stop, device: 5, start: 5.3}\n");
  sc.iterations = 15;
  const auto r = run_scenario(sc);
  REQUIRE(!r.aborted);
  REQUIRE(r.detections.size() == 1);
  const auto& d = r.detections[0];
  const auto& hb = sc.detector.heartbeat;
  CHECK(d.detected_at == doctest::Approx(heartbeat_declaration_time(5.3, hb)));
  CHECK(d.latency() <= (hb.miss_threshold + 1) * hb.interval);
  CHECK(r.overhead.lost > 0.0);
  CHECK(r.wall_clock() == doctest::Approx(std::accumulate(r.iterations.begin(), r.iterations.end(), 0.0,
                                                          [](double s, const IterationRecord& x) {
                                                            return s + x.observed_time + x.overhead;
                                                          })));
  // the device's group was rebuilt without it
  for (const auto& rec : r.iterations)
    if (rec.iteration > 0 && rec.active_devices < 16) CHECK(rec.active_devices >= 14);
}

TEST_CASE("ReCycle never screens for fail-slow") {
  auto sc = base_with("failures:\n  - {kind: fail_slow_compute, device: 2, start_iteration: 22, severity: 0.4}\n");
  sc.policy = PolicyKind::Recycle;
  const auto r = run_scenario(sc);
  CHECK(r.candidates == 0);
  CHECK(r.adaptations.empty());
  REQUIRE(r.detections.size() == 1);
  CHECK(!r.detections[0].detected);
}

TEST_CASE("outputs are byte-identical across runs") {
  const auto sc = base_with(R"(simulation: {noise_sigma: 0.02}
failures:
  - {kind: fail_slow_compute, device: 9, start_iteration: 21, severity: 0.5}
)");
  const auto a = temp_dir("det_a"), b = temp_dir("det_b");
  emit_outputs(run_scenario(sc), a);
  emit_outputs(run_scenario(sc), b);
  for (const char* f : {"iterations.csv", "adaptations.jsonl", "summary.json", "plotdata/throughput.csv", "plotdata/idle.csv"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
}

TEST_CASE("golden schema") {
  const auto sc = parse_scenario(std::string(kBase) + kLong +
                                 "failures:\n  - {kind: fail_slow_compute, device: 9, start_iteration: 21, severity: 0.5}\n");
  const auto r = run_scenario(sc);
  const auto csv = iterations_csv(r);
  CHECK(csv.substr(0, csv.find('\n')) == "iteration,observed_s,predicted_s,alarms,active_devices,migrations");

  const auto j = nlohmann::ordered_json::parse(summary_json(r));
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"scenario", "policy", "seed", "status", "iterations_requested",
                                         "iterations_completed", "aborted_at", "abort_reason",
                                         "micro_batches_per_iteration", "throughput_samples_per_s",
                                         "healthy_throughput_samples_per_s", "avg_iteration_time_s", "wall_clock_s",
                                         "overhead_s", "detector", "detections", "adaptations",
                                         "idle_amplification"});
  keys.clear();
  for (const auto& [k, v] : j["overhead_s"].items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"filter", "validation", "reconfig", "lost", "total"});
  keys.clear();
  for (const auto& [k, v] : j["detector"].items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"candidates", "benign", "escalations", "confirmed", "unconfirmed",
                                         "false_alarms"});
  keys.clear();
  for (const auto& [k, v] : j["idle_amplification"].items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"faulty_device", "faulty_extra_busy_s", "tp_extra_idle_s", "pp_extra_idle_s",
                                         "dp_extra_idle_s", "tp", "pp", "dp"});

  REQUIRE(!r.adaptations.empty());
  const auto line = adaptations_jsonl(r);
  const auto p = nlohmann::ordered_json::parse(line.substr(0, line.find('\n')));
  keys.clear();
  for (const auto& [k, v] : p.items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"iteration", "time_s", "trigger", "policy", "tp_subgroups",
                                         "excluded_groups", "layer_partition", "replica_micro_batches",
                                         "migration_mode", "delta", "migrations", "reconfig_cost_s",
                                         "predicted_makespan_s"});
}

TEST_CASE("unwritable output directory fails before the run") {
  const auto dir = temp_dir("unwritable");
  fs::create_directories(dir);
  std::ofstream(dir / "file") << "x";
  CHECK_THROWS(prepare_output_dir(dir / "file" / "out"));
  CHECK_NOTHROW(prepare_output_dir(dir / "ok"));
  CHECK(fs::is_directory(dir / "ok" / "plotdata"));
}

TEST_CASE("numbers round-trip through their text form") {
  for (double x : {0.1, 1.0 / 3.0, 6.02214076e23, 2.5e-6, 0.0, -7.25}) CHECK(std::stod(format_number(x)) == x);
  CHECK(format_number(0.5) == "0.5");
  CHECK(format_number(2.0) == "2");
}

TEST_CASE("calibration traces") {
  const auto dir = temp_dir("calib");
  fs::create_directories(dir);
  CostModel truth{2e-6, 3e-10};
  std::ofstream f(dir / "t.txt");
  f << "# seconds lengths...\n";
  for (int i = 1; i <= 6; ++i) {
    MicroBatch mb;
    mb.doc_lengths = {512 * i, 4096 - 512 * i};
    mb.token_budget = 4096;
    f << format_number(predict_chunk_time(mb, ChunkKind::F, truth, 1, 1.0)) << ' ' << 512 * i << ' '
      << 4096 - 512 * i << '\n';
  }
  f.close();
  const auto samples = read_calibration_trace(dir / "t.txt");
  REQUIRE(samples.size() == 6);
  CHECK(samples[2].first.token_budget == 4096);
  const auto fit = fit_cost_model(samples);
  CHECK(fit.model.alpha == doctest::Approx(2e-6));
  CHECK(fit.model.beta == doctest::Approx(3e-10));

  std::ofstream(dir / "bad.txt") << "0.5\n";
  CHECK_THROWS_AS(read_calibration_trace(dir / "bad.txt"), ScenarioError);
}
