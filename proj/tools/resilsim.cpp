#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "resilsim/harness.hpp"

namespace fs = std::filesystem;
using namespace resilsim;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
  std::optional<int> iterations;
};

Scenario load_with(const fs::path& path, const Overrides& o) {
  Scenario sc = load_scenario(path);
  if (o.seed) sc.seed = *o.seed;
  if (o.policy) sc.policy = policy_from_string(*o.policy);
  if (o.iterations) sc.iterations = *o.iterations;
  check_scenario(sc);
  return sc;
}

// Runs jobs[i] for every i on up to `workers` threads; results keep input order.
template <class Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  std::vector<std::thread> pool;
  const auto count = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, std::max<std::size_t>(n, 1));
  for (std::size_t t = 1; t < count; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

std::vector<fs::path> scenario_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".yaml" || ext == ".yml" || ext == ".json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_run(const std::vector<std::string>& files, const fs::path& out, const Overrides& o, int jobs) {
  std::vector<Scenario> scenarios;
  for (const auto& f : files) scenarios.push_back(load_with(f, o));
  std::vector<fs::path> dirs;
  for (const auto& sc : scenarios) {
    dirs.push_back(scenarios.size() == 1 ? out : out / sc.name);
    prepare_output_dir(dirs.back());
  }
  std::vector<RunResult> results(scenarios.size());
  std::vector<std::string> errors(scenarios.size());
  parallel_for(scenarios.size(), jobs, [&](std::size_t i) {
    try {
      results[i] = run_scenario(scenarios[i]);
      emit_outputs(results[i], dirs[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  int code = 0;
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    if (!errors[i].empty()) {
      std::cerr << scenarios[i].name << ": error: " << errors[i] << '\n';
      code = 1;
      continue;
    }
    const auto& r = results[i];
    std::cout << r.scenario << ' ' << to_string(r.policy) << ' ' << (r.aborted ? "aborted" : "completed") << ' '
              << r.iterations.size() << '/' << r.iterations_requested << " throughput "
              << format_number(r.throughput()) << " samples/s\n";
    if (r.aborted) {
      std::cout << "  aborted at iteration " << r.aborted_at << ": " << r.abort_reason << '\n';
      if (code == 0) code = 2;
    }
  }
  return code;
}

int cmd_calibrate(const fs::path& trace) {
  const auto samples = read_calibration_trace(trace);
  const auto fit = fit_cost_model(samples);
  std::cout << "alpha " << format_number(fit.model.alpha) << '\n'
            << "beta " << format_number(fit.model.beta) << '\n'
            << "mape " << format_number(fit.mape) << '\n';
  return 0;
}

int cmd_sweep(const fs::path& dir, const std::vector<std::string>& policies, const std::optional<fs::path>& out,
              const Overrides& o, int jobs) {
  struct Job {
    Scenario sc;
    fs::path dir;
  };
  std::vector<Job> work;
  for (const auto& f : scenario_files(dir))
    for (const auto& p : policies) {
      Overrides with = o;
      with.policy = p;
      Job j{load_with(f, with), {}};
      if (out) {
        j.dir = *out / j.sc.name / to_string(j.sc.policy);
        prepare_output_dir(j.dir);
      }
      work.push_back(std::move(j));
    }
  std::vector<RunResult> results(work.size());
  std::vector<std::string> errors(work.size());
  parallel_for(work.size(), jobs, [&](std::size_t i) {
    try {
      results[i] = run_scenario(work[i].sc);
      if (out) emit_outputs(results[i], work[i].dir);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::cout << "scenario,policy,status,iterations_completed,throughput_samples_per_s,healthy_throughput_samples_per_s\n";
  int code = 0;
  for (std::size_t i = 0; i < work.size(); ++i) {
    if (!errors[i].empty()) {
      std::cerr << work[i].sc.name << " (" << to_string(work[i].sc.policy) << "): error: " << errors[i] << '\n';
      code = 1;
      continue;
    }
    const auto& r = results[i];
    std::cout << r.scenario << ',' << to_string(r.policy) << ',' << (r.aborted ? "aborted" : "completed") << ','
              << r.iterations.size() << ',' << format_number(r.throughput()) << ','
              << format_number(r.healthy_throughput()) << '\n';
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Resilient hybrid-parallel training simulator"};
  app.require_subcommand(1);

  Overrides o;
  int jobs = 1;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Override the scenario seed")->envname("RESILSIM_SEED");
    sub->add_option("--iterations", o.iterations, "Override the iteration count")
        ->envname("RESILSIM_ITERATIONS")
        ->check(CLI::PositiveNumber);
    sub->add_option("--jobs", jobs, "Scenarios run concurrently")->envname("RESILSIM_JOBS")->check(CLI::PositiveNumber);
  };
  const std::vector<std::string> policy_names{"none", "recycle", "greyhound", "recycle_greyhound", "resihp"};

  auto* run = app.add_subcommand("run", "Simulate one or more scenarios");
  std::vector<std::string> files;
  std::string out;
  run->add_option("--scenario", files, "Scenario file (repeatable)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory")->required()->envname("RESILSIM_OUT");
  run->add_option("--policy", o.policy, "Override the policy")
      ->envname("RESILSIM_POLICY")
      ->check(CLI::IsMember(policy_names));
  add_common(run);

  auto* cal = app.add_subcommand("calibrate", "Fit alpha and beta from a measured trace");
  std::string trace;
  cal->add_option("--trace", trace, "Lines of: seconds len len ...")->required()->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "Run every scenario in a directory under each policy");
  std::string dir;
  std::string sweep_out;
  std::vector<std::string> policies{"recycle", "greyhound", "recycle_greyhound", "resihp"};
  sweep->add_option("--scenario-dir", dir, "Directory of .yaml/.yml/.json scenarios")->required();
  sweep->add_option("--policies", policies, "Policies to compare")->check(CLI::IsMember(policy_names));
  sweep->add_option("--out", sweep_out, "Also write per-run outputs under <out>/<scenario>/<policy>");
  add_common(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return cmd_run(files, out, o, jobs);
    if (*cal) return cmd_calibrate(trace);
    std::optional<fs::path> sweep_dir;
    if (!sweep_out.empty()) sweep_dir = sweep_out;
    return cmd_sweep(dir, policies, sweep_dir, o, jobs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
