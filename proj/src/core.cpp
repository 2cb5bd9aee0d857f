#include "resilsim/core.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace resilsim {

const char* to_string(DeviceStatus status) {
  switch (status) {
    case DeviceStatus::Healthy: return "healthy";
    case DeviceStatus::FailSlow: return "fail_slow";
    case DeviceStatus::FailStop: return "fail_stop";
    case DeviceStatus::Standby: return "standby";
  }
  return "?";
}

const char* to_string(Schedule schedule) { return schedule == Schedule::ZBH ? "zbh" : "1f1b"; }

Schedule schedule_from_string(const std::string& name) {
  if (name == "1f1b" || name == "1F1B" || name == "OneFOneB") return Schedule::OneFOneB;
  if (name == "zbh" || name == "ZBH" || name == "zb-h1") return Schedule::ZBH;
  throw std::invalid_argument("unknown schedule: " + name);
}

const char* to_string(FailureKind kind) {
  switch (kind) {
    case FailureKind::FailStop: return "fail_stop";
    case FailureKind::FailSlowCompute: return "fail_slow_compute";
    case FailureKind::FailSlowComm: return "fail_slow_comm";
  }
  return "?";
}

FailureKind failure_kind_from_string(const std::string& name) {
  if (name == "fail_stop") return FailureKind::FailStop;
  if (name == "fail_slow_compute" || name == "fail_slow") return FailureKind::FailSlowCompute;
  if (name == "fail_slow_comm") return FailureKind::FailSlowComm;
  throw std::invalid_argument("unknown failure kind: " + name);
}

const char* to_string(AlarmKind kind) {
  switch (kind) {
    case AlarmKind::Candidate: return "candidate";
    case AlarmKind::Benign: return "benign";
    case AlarmKind::Escalated: return "escalated";
    case AlarmKind::Confirmed: return "confirmed";
    case AlarmKind::Unconfirmed: return "unconfirmed";
    case AlarmKind::FailStopDeclared: return "fail_stop_declared";
    case AlarmKind::Adapted: return "adapted";
    case AlarmKind::Aborted: return "aborted";
  }
  return "?";
}

std::vector<int> ParallelismConfig::even_partition(int num_layers, int pp) {
  if (pp <= 0) throw std::invalid_argument("pp must be positive");
  std::vector<int> out(static_cast<std::size_t>(pp), num_layers / pp);
  for (int i = 0; i < num_layers % pp; ++i) ++out[static_cast<std::size_t>(i)];
  return out;
}

int ClusterState::num_nodes() const {
  int n = 0;
  for (const auto& d : devices) n = std::max(n, d.node_id + 1);
  return n;
}

std::vector<int> ClusterState::node_devices(int node) const {
  std::vector<int> out;
  for (const auto& d : devices)
    if (d.node_id == node) out.push_back(d.id);
  return out;
}

int ClusterState::group_node(GroupId g) const {
  const auto& members = group(g);
  return members.empty() ? -1 : devices.at(static_cast<std::size_t>(members.front())).node_id;
}

bool ClusterState::group_failed(GroupId g) const {
  const auto& members = group(g);
  if (members.empty()) return true;
  return std::any_of(members.begin(), members.end(),
                     [&](int id) { return !devices.at(static_cast<std::size_t>(id)).executable(); });
}

double ClusterState::group_speed(GroupId g) const {
  if (group_failed(g)) return 0.0;
  const auto& members = group(g);
  double slowest = 1.0;
  for (int id : members) slowest = std::min(slowest, devices.at(static_cast<std::size_t>(id)).speed);
  return static_cast<double>(members.size()) / static_cast<double>(nominal_tp) * slowest;
}

double ClusterState::link_bandwidth(int node_a, int node_b) const {
  const double base = node_a == node_b ? intra_bw : inter_bw;
  auto it = link_factor.find({std::min(node_a, node_b), std::max(node_a, node_b)});
  return it == link_factor.end() ? base : base * it->second;
}

int ClusterState::active_device_count() const {
  int n = 0;
  for (const auto& members : tp_groups)
    for (int id : members)
      if (devices.at(static_cast<std::size_t>(id)).executable()) ++n;
  return n;
}

ClusterState make_cluster(int nodes, int devices_per_node, const ParallelismConfig& cfg, double intra_bw,
                          double inter_bw) {
  if (nodes <= 0 || devices_per_node <= 0) throw std::invalid_argument("cluster must have devices");
  if (devices_per_node % cfg.tp != 0)
    throw std::invalid_argument("tp must divide devices per node (TP groups are intra-node)");
  const int total = nodes * devices_per_node;
  if (cfg.tp * cfg.dp * cfg.pp > total) throw std::invalid_argument("not enough devices for tp*dp*pp");

  ClusterState state;
  state.devices_per_node = devices_per_node;
  state.dp = cfg.dp;
  state.pp = cfg.pp;
  state.nominal_tp = cfg.tp;
  state.intra_bw = intra_bw;
  state.inter_bw = inter_bw;
  for (int id = 0; id < total; ++id) {
    Device d;
    d.id = id;
    d.node_id = id / devices_per_node;
    state.devices.push_back(d);
  }
  state.tp_groups.resize(static_cast<std::size_t>(cfg.dp * cfg.pp));
  for (int g = 0; g < cfg.dp * cfg.pp; ++g)
    for (int k = 0; k < cfg.tp; ++k) state.tp_groups[static_cast<std::size_t>(g)].push_back(g * cfg.tp + k);
  for (int id = cfg.tp * cfg.dp * cfg.pp; id < total; ++id)
    state.devices[static_cast<std::size_t>(id)].status = DeviceStatus::Standby;
  return state;
}

bool FailureEvent::active_at(double t) const {
  if (t < start) return false;
  if (kind == FailureKind::FailStop) return true;
  return !end || t < *end;
}

void check_event(const FailureEvent& ev) {
  if (ev.kind != FailureKind::FailStop && !(ev.severity > 0.0 && ev.severity < 1.0))
    throw std::invalid_argument("fail-slow severity must be in (0,1)");
  if (ev.end && !(*ev.end > ev.start)) throw std::invalid_argument("failure end must be after start");
}

std::vector<std::string> validate_cluster(const ClusterState& state, const ParallelismConfig& cfg) {
  std::vector<std::string> out;
  auto add = [&](const std::string& s) { out.push_back(s); };

  if (static_cast<int>(cfg.layer_partition.size()) != cfg.pp) {
    std::ostringstream os;
    os << "layer partition has " << cfg.layer_partition.size() << " stages, pp = " << cfg.pp;
    add(os.str());
  }
  const int layer_sum = std::accumulate(cfg.layer_partition.begin(), cfg.layer_partition.end(), 0);
  if (layer_sum != cfg.num_layers) {
    std::ostringstream os;
    os << "layer sum " << layer_sum << " ≠ " << cfg.num_layers;
    add(os.str());
  }
  if (std::any_of(cfg.layer_partition.begin(), cfg.layer_partition.end(), [](int l) { return l < 0; }))
    add("negative layer count");
  if (cfg.tp < 1 || cfg.dp < 1 || cfg.pp < 1) add("parallel degrees must be >= 1");

  int executable = 0;
  for (const auto& d : state.devices) {
    if (d.executable()) ++executable;
    if (d.executable() && !(d.speed > 0.0 && d.speed <= 1.0)) {
      std::ostringstream os;
      os << "device " << d.id << " speed " << d.speed << " outside (0,1]";
      add(os.str());
    }
  }
  if (cfg.tp * cfg.dp * cfg.pp > executable) {
    std::ostringstream os;
    os << "tp*dp*pp = " << cfg.tp * cfg.dp * cfg.pp << " exceeds " << executable << " executable devices";
    add(os.str());
  }

  if (state.dp != cfg.dp || state.pp != cfg.pp ||
      state.tp_groups.size() != static_cast<std::size_t>(cfg.dp * cfg.pp)) {
    add("tp group table does not match dp*pp");
    return out;
  }

  std::vector<int> membership(state.devices.size(), 0);
  for (int r = 0; r < state.dp; ++r) {
    for (int s = 0; s < state.pp; ++s) {
      const auto& members = state.group({r, s});
      std::set<int> nodes;
      for (int id : members) {
        if (id < 0 || id >= static_cast<int>(state.devices.size())) {
          add("group references unknown device " + std::to_string(id));
          continue;
        }
        ++membership[static_cast<std::size_t>(id)];
        nodes.insert(state.devices[static_cast<std::size_t>(id)].node_id);
        if (state.devices[static_cast<std::size_t>(id)].status == DeviceStatus::Standby)
          add("standby device " + std::to_string(id) + " is in an active TP group");
      }
      if (nodes.size() > 1) {
        std::ostringstream os;
        os << "TP spans nodes: group (replica " << r << ", stage " << s << ")";
        add(os.str());
      }
    }
  }
  for (const auto& d : state.devices) {
    const int m = membership[static_cast<std::size_t>(d.id)];
    if (m > 1) add("device " + std::to_string(d.id) + " is in " + std::to_string(m) + " TP groups");
    if (m == 0 && d.status != DeviceStatus::Standby && d.status != DeviceStatus::FailStop)
      add("device " + std::to_string(d.id) + " is in no TP group");
  }
  return out;
}

ClusterState apply_failures(ClusterState state, std::span<const FailureEvent> events, double t) {
  const int n = static_cast<int>(state.devices.size());
  const int nodes = state.num_nodes();
  std::vector<double> factor(static_cast<std::size_t>(n), 1.0);
  std::vector<bool> stopped(static_cast<std::size_t>(n), false);
  std::map<std::pair<int, int>, double> links;

  for (const auto& ev : events) {
    check_event(ev);
    if (ev.kind == FailureKind::FailSlowComm) {
      auto [a, b] = ev.link;
      if (a < 0 || b < 0 || a >= nodes || b >= nodes)
        throw std::out_of_range("unknown link " + std::to_string(a) + "-" + std::to_string(b));
      if (!ev.active_at(t)) continue;
      auto key = std::make_pair(std::min(a, b), std::max(a, b));
      auto [it, inserted] = links.emplace(key, 1.0);
      it->second *= ev.severity;
      continue;
    }
    if (ev.device < 0 || ev.device >= n) throw std::out_of_range("unknown device " + std::to_string(ev.device));
    if (!ev.active_at(t)) continue;
    if (ev.kind == FailureKind::FailStop)
      stopped[static_cast<std::size_t>(ev.device)] = true;
    else
      factor[static_cast<std::size_t>(ev.device)] *= ev.severity;
  }

  for (auto& d : state.devices) {
    const auto i = static_cast<std::size_t>(d.id);
    d.speed = d.base_speed * factor[i];
    if (stopped[i] || d.status == DeviceStatus::FailStop) {
      d.status = DeviceStatus::FailStop;
    } else if (d.status != DeviceStatus::Standby) {
      d.status = factor[i] < 1.0 ? DeviceStatus::FailSlow : DeviceStatus::Healthy;
    }
  }
  state.link_factor = std::move(links);
  state.now = t;
  return state;
}

}  // namespace resilsim
