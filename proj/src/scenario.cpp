#include <algorithm>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "resilsim/comm.hpp"
#include "resilsim/harness.hpp"

namespace resilsim {

namespace {

void only_keys(const YAML::Node& node, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!node) return;
  if (!node.IsMap()) throw ScenarioError(where + " must be a mapping");
  std::set<std::string> seen;
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!seen.insert(key).second) throw ScenarioError("duplicate key '" + key + "' in " + where);
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ScenarioError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const YAML::Node& node, const char* key, T& out) {
  if (!node || !node[key]) return;
  try {
    out = node[key].as<T>();
  } catch (const YAML::Exception&) {
    throw ScenarioError(std::string("bad value for '") + key + "'");
  }
}

FailureSpec parse_failure(const YAML::Node& n, std::size_t index) {
  const std::string where = "failures[" + std::to_string(index) + "]";
  only_keys(n, where, {"kind", "device", "link", "start", "end", "start_iteration", "end_iteration", "severity"});
  FailureSpec f;
  std::string kind = "fail_stop";
  read(n, "kind", kind);
  try {
    f.event.kind = failure_kind_from_string(kind);
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(where + ": " + e.what());
  }
  read(n, "device", f.event.device);
  if (n["link"]) {
    if (!n["link"].IsSequence() || n["link"].size() != 2) throw ScenarioError(where + ": link must be [node_a, node_b]");
    f.event.link = {n["link"][0].as<int>(), n["link"][1].as<int>()};
  }
  read(n, "start", f.event.start);
  if (n["end"]) f.event.end = n["end"].as<double>();
  if (n["start_iteration"]) f.start_iteration = n["start_iteration"].as<int>();
  if (n["end_iteration"]) f.end_iteration = n["end_iteration"].as<int>();
  read(n, "severity", f.event.severity);
  if (n["start"] && f.start_iteration) throw ScenarioError(where + ": give start or start_iteration, not both");
  if (n["end"] && f.end_iteration) throw ScenarioError(where + ": give end or end_iteration, not both");
  return f;
}

}  // namespace

std::vector<std::int64_t> read_length_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot read trace " + path.string());
  std::vector<std::int64_t> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::int64_t v;
    if (!(ss >> v)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw ScenarioError(path.string() + ":" + std::to_string(lineno) + ": not a length");
    }
    out.push_back(v);
  }
  return out;
}

std::vector<std::pair<MicroBatch, double>> read_calibration_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot read trace " + path.string());
  std::vector<std::pair<MicroBatch, double>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    double seconds = 0.0;
    MicroBatch mb;
    mb.id = static_cast<int>(out.size());
    std::int64_t len;
    if (!(ss >> seconds)) throw ScenarioError(path.string() + ":" + std::to_string(lineno) + ": bad time");
    while (ss >> len) {
      if (len <= 0) throw ScenarioError(path.string() + ":" + std::to_string(lineno) + ": non-positive length");
      mb.doc_lengths.push_back(len);
      mb.token_budget += len;
    }
    if (!ss.eof() || mb.doc_lengths.empty())
      throw ScenarioError(path.string() + ":" + std::to_string(lineno) + ": expected seconds then lengths");
    out.emplace_back(std::move(mb), seconds);
  }
  return out;
}

Scenario parse_scenario(const std::string& text, const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ScenarioError(std::string("scenario is not valid YAML/JSON: ") + e.what());
  }
  only_keys(root, "scenario", {"name", "seed", "iterations", "policy", "cluster", "parallelism", "model", "workload",
                               "simulation", "detector", "scheduler", "failures"});
  Scenario sc;
  read(root, "name", sc.name);
  read(root, "seed", sc.seed);
  read(root, "iterations", sc.iterations);
  if (root["policy"]) {
    try {
      sc.policy = policy_from_string(root["policy"].as<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ScenarioError(e.what());
    }
  }

  const auto cl = root["cluster"];
  only_keys(cl, "cluster", {"nodes", "devices_per_node", "intra_bw", "inter_bw"});
  read(cl, "nodes", sc.cluster.nodes);
  read(cl, "devices_per_node", sc.cluster.devices_per_node);
  read(cl, "intra_bw", sc.cluster.intra_bw);
  read(cl, "inter_bw", sc.cluster.inter_bw);

  const auto par = root["parallelism"];
  only_keys(par, "parallelism", {"tp", "dp", "pp", "schedule", "layers", "layer_partition"});
  auto& cfg = sc.parallelism;
  read(par, "tp", cfg.tp);
  read(par, "dp", cfg.dp);
  read(par, "pp", cfg.pp);
  cfg.num_layers = 4 * cfg.pp;
  read(par, "layers", cfg.num_layers);
  if (par && par["schedule"]) {
    try {
      cfg.schedule = schedule_from_string(par["schedule"].as<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ScenarioError(e.what());
    }
  }
  if (par && par["layer_partition"]) {
    read(par, "layer_partition", cfg.layer_partition);
  } else if (cfg.pp >= 1 && cfg.num_layers >= cfg.pp) {
    cfg.layer_partition = ParallelismConfig::even_partition(cfg.num_layers, cfg.pp);
  }

  const auto mod = root["model"];
  only_keys(mod, "model", {"alpha", "beta", "ratio_f", "ratio_b", "ratio_w"});
  read(mod, "alpha", sc.model.alpha);
  read(mod, "beta", sc.model.beta);
  read(mod, "ratio_f", sc.model.ratio_f);
  read(mod, "ratio_b", sc.model.ratio_b);
  read(mod, "ratio_w", sc.model.ratio_w);

  const auto wl = root["workload"];
  only_keys(wl, "workload", {"generator", "tokens_per_micro_batch", "micro_batches", "mu", "sigma", "trace", "trace_file"});
  auto& w = sc.workload;
  std::string gen = "lognormal";
  read(wl, "generator", gen);
  if (gen == "lognormal") w.generator = DocGenerator::Lognormal;
  else if (gen == "trace") w.generator = DocGenerator::Trace;
  else throw ScenarioError("unknown workload generator: " + gen);
  read(wl, "tokens_per_micro_batch", w.tokens_per_micro_batch);
  read(wl, "micro_batches", w.micro_batches);
  read(wl, "mu", w.mu);
  read(wl, "sigma", w.sigma);
  read(wl, "trace", w.trace);
  if (wl && wl["trace_file"]) {
    std::filesystem::path p = wl["trace_file"].as<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    const auto more = read_length_trace(p);
    w.trace.insert(w.trace.end(), more.begin(), more.end());
  }

  const auto sim = root["simulation"];
  only_keys(sim, "simulation", {"noise_sigma", "memory_capacity", "p2p_optimized", "activation_bytes_per_token",
                                "grad_bytes_per_layer", "dp_sync"});
  read(sim, "noise_sigma", sc.sim.noise_sigma);
  read(sim, "memory_capacity", sc.sim.memory_capacity);
  read(sim, "p2p_optimized", sc.sim.p2p_optimized);
  read(sim, "activation_bytes_per_token", sc.sim.activation_bytes_per_token);
  read(sim, "grad_bytes_per_layer", sc.sim.grad_bytes_per_layer);
  read(sim, "dp_sync", sc.sim.dp_sync);

  const auto det = root["detector"];
  only_keys(det, "detector", {"heartbeat_interval", "miss_threshold", "window", "kappa", "escalation_factor",
                              "filter_cost", "validation_cost", "filter"});
  read(det, "heartbeat_interval", sc.detector.heartbeat.interval);
  read(det, "miss_threshold", sc.detector.heartbeat.miss_threshold);
  read(det, "window", sc.detector.change_point.window);
  read(det, "kappa", sc.detector.change_point.kappa);
  read(det, "escalation_factor", sc.detector.escalation_factor);
  read(det, "filter_cost", sc.detector.filter_cost);
  read(det, "validation_cost", sc.detector.validation_cost);
  read(det, "filter", sc.detector.filter_enabled);

  const auto sch = root["scheduler"];
  only_keys(sch, "scheduler", {"k_min", "delta", "group_rebuild", "bytes_per_layer"});
  read(sch, "k_min", sc.k_min);
  read(sch, "delta", sc.delta);
  read(sch, "group_rebuild", sc.reconfig.group_rebuild);
  read(sch, "bytes_per_layer", sc.reconfig.bytes_per_layer);

  if (const auto fl = root["failures"]) {
    if (!fl.IsSequence()) throw ScenarioError("failures must be a list");
    for (std::size_t i = 0; i < fl.size(); ++i) sc.failures.push_back(parse_failure(fl[i], i));
  }
  check_scenario(sc);
  return sc;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot read scenario " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Scenario sc = parse_scenario(ss.str(), path.parent_path());
  if (sc.name == "scenario") sc.name = path.stem().string();
  return sc;
}

void check_scenario(const Scenario& sc) {
  auto fail = [](const std::string& msg) { throw ScenarioError(msg); };
  if (sc.iterations < 1) fail("iterations must be >= 1");
  const auto& cfg = sc.parallelism;
  if (cfg.tp < 1 || cfg.dp < 1 || cfg.pp < 1) fail("tp, dp and pp must be >= 1");
  if (sc.cluster.nodes < 1 || sc.cluster.devices_per_node < 1) fail("cluster must have devices");
  if (!(sc.cluster.intra_bw > 0.0) || !(sc.cluster.inter_bw > 0.0)) fail("bandwidths must be positive");
  if (cfg.tp * cfg.dp * cfg.pp > sc.cluster.nodes * sc.cluster.devices_per_node)
    fail("tp*dp*pp = " + std::to_string(cfg.tp * cfg.dp * cfg.pp) + " exceeds " +
         std::to_string(sc.cluster.nodes * sc.cluster.devices_per_node) + " devices");
  if (sc.cluster.devices_per_node % cfg.tp != 0) fail("TP groups would span nodes: devices_per_node % tp != 0");
  if (static_cast<int>(cfg.layer_partition.size()) != cfg.pp) fail("layer_partition needs pp entries");
  try {
    sc.model.check();
    sc.detector.check();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  const auto cluster = make_cluster(sc.cluster.nodes, sc.cluster.devices_per_node, cfg, sc.cluster.intra_bw,
                                    sc.cluster.inter_bw);
  if (auto problems = validate_cluster(cluster, cfg); !problems.empty()) fail(problems.front());

  const auto& w = sc.workload;
  if (w.tokens_per_micro_batch < 1) fail("tokens_per_micro_batch must be >= 1");
  if (w.micro_batches < 1) fail("micro_batches must be >= 1");
  if (w.generator == DocGenerator::Lognormal && !(w.sigma >= 0.0)) fail("sigma must be >= 0");
  if (w.generator == DocGenerator::Trace) {
    if (w.trace.empty()) fail("trace generator needs trace or trace_file");
    for (auto l : w.trace)
      if (l < 1 || l > w.tokens_per_micro_batch) fail("trace length " + std::to_string(l) + " outside [1, N]");
  }
  if (sc.sim.noise_sigma < 0.0) fail("noise_sigma must be >= 0");
  if (sc.sim.memory_capacity < 0) fail("memory_capacity must be >= 0");
  if (!is_power_of_two(sc.k_min)) fail("k_min must be a power of two");
  if (sc.delta < 0) fail("delta must be >= 0");
  if (sc.reconfig.group_rebuild < 0.0 || sc.reconfig.bytes_per_layer < 0.0) fail("reconfig costs must be >= 0");

  const int devices = sc.cluster.nodes * sc.cluster.devices_per_node;
  for (std::size_t i = 0; i < sc.failures.size(); ++i) {
    const auto& f = sc.failures[i];
    const std::string where = "failures[" + std::to_string(i) + "]: ";
    try {
      check_event(f.event);
    } catch (const std::invalid_argument& e) {
      fail(where + e.what());
    }
    if (f.event.kind == FailureKind::FailSlowComm) {
      const auto [a, b] = f.event.link;
      if (a < 0 || b < 0 || a >= sc.cluster.nodes || b >= sc.cluster.nodes) fail(where + "link targets unknown node");
    } else if (f.event.device < 0 || f.event.device >= devices) {
      fail(where + "unknown device " + std::to_string(f.event.device));
    }
    if (f.start_iteration && *f.start_iteration < 0) fail(where + "start_iteration must be >= 0");
    if (f.end_iteration) {
      const int from = f.start_iteration.value_or(0);
      if (*f.end_iteration <= from) fail(where + "end_iteration must follow start_iteration");
      if (!f.start_iteration) fail(where + "end_iteration needs start_iteration");
    }
  }
}

WorkloadGenerator::WorkloadGenerator(WorkloadSpec spec, std::uint64_t seed) : spec_(std::move(spec)), rng_(seed) {}

std::int64_t WorkloadGenerator::draw() {
  if (spec_.generator == DocGenerator::Trace) {
    const auto v = spec_.trace[trace_pos_ % spec_.trace.size()];
    ++trace_pos_;
    return v;
  }
  std::lognormal_distribution<double> dist(spec_.mu, spec_.sigma);
  const double x = std::round(dist(rng_));
  return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::min(x, 1e15)), 1, spec_.tokens_per_micro_batch);
}

std::vector<MicroBatch> WorkloadGenerator::next() {
  const auto n = spec_.tokens_per_micro_batch;
  const auto want = static_cast<std::size_t>(spec_.micro_batches);
  std::vector<std::int64_t> docs;
  std::int64_t tokens = 0;
  // at least want*N tokens always pack into at least `want` bins
  while (tokens < static_cast<std::int64_t>(want) * n) {
    docs.push_back(draw());
    tokens += docs.back();
  }
  auto packed = pack_sequences(docs, n, next_id_);
  // first-fit-decreasing fills the earliest bins tightest
  packed.resize(want);
  // the bins come out heaviest first; shuffle so an in-order split across
  // replicas does not hand replica 0 all the long documents
  std::shuffle(packed.begin(), packed.end(), rng_);
  for (auto& mb : packed) mb.id = next_id_++;
  return packed;
}

}  // namespace resilsim
