#include "resilsim/comm.hpp"

#include <algorithm>
#include <stdexcept>

namespace resilsim {

LinkModel LinkModel::between(const ClusterState& state, int node_a, int node_b) {
  LinkModel m;
  m.intra_bw = std::min(state.link_bandwidth(node_a, node_a), state.link_bandwidth(node_b, node_b));
  m.inter_bw = node_a == node_b ? m.intra_bw : state.link_bandwidth(node_a, node_b);
  return m;
}

bool is_power_of_two(int x) { return x > 0 && (x & (x - 1)) == 0; }

P2PCost p2p_cost(double tensor_bytes, int sender_tp, int receiver_tp, bool optimized, const LinkModel& links) {
  if (!is_power_of_two(sender_tp) || !is_power_of_two(receiver_tp))
    throw std::invalid_argument("TP degrees must be powers of two");
  if (!(links.inter_bw > 0.0 && links.intra_bw > 0.0)) throw std::invalid_argument("bandwidth must be positive");

  P2PCost c;
  if (optimized) {
    const double chunks = static_cast<double>(std::max(sender_tp, receiver_tp));
    c.cross_node_bytes = tensor_bytes;
    c.seconds = tensor_bytes / links.inter_bw + tensor_bytes * (chunks - 1.0) / (chunks * links.intra_bw);
  } else {
    c.cross_node_bytes = static_cast<double>(receiver_tp) * tensor_bytes;
    c.seconds = c.cross_node_bytes / links.inter_bw;
  }
  return c;
}

double allreduce_cost(double bytes, int group_size, double bw_min) {
  if (group_size < 1) throw std::invalid_argument("all-reduce group must be non-empty");
  if (group_size == 1) return 0.0;
  if (!(bw_min > 0.0)) throw std::invalid_argument("bandwidth must be positive");
  const double n = static_cast<double>(group_size);
  return 2.0 * bytes * (n - 1.0) / (n * bw_min);
}

double allreduce_cost(double bytes, int group_size, std::span<const double> link_bws) {
  if (group_size == 1) return 0.0;
  if (link_bws.empty()) throw std::invalid_argument("all-reduce needs at least one link");
  return allreduce_cost(bytes, group_size, *std::min_element(link_bws.begin(), link_bws.end()));
}

}  // namespace resilsim
