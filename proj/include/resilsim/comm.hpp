#pragma once

#include <span>

#include "resilsim/core.hpp"

namespace resilsim {

/// Bandwidths (bytes/s) seen by one transfer, already degraded by any
/// fail-slow link events along its path.
struct LinkModel {
  double intra_bw = 1.0;
  double inter_bw = 1.0;

  /// Path between two nodes; the intra term is the slower of the two local fabrics.
  static LinkModel between(const ClusterState& state, int node_a, int node_b);
};

struct P2PCost {
  double seconds = 0.0;
  double cross_node_bytes = 0.0;
};

bool is_power_of_two(int x);

/// Inter-node P2P between adjacent TP groups of possibly different degrees.
/// Unoptimized: each receiver rank pulls the full tensor over the inter-node
/// link. Optimized: the tensor is scattered into max(sender, receiver) chunks,
/// one copy crosses nodes, and the receiver all-gathers locally.
P2PCost p2p_cost(double tensor_bytes, int sender_tp, int receiver_tp, bool optimized, const LinkModel& links);

/// Ring all-reduce: 2 * bytes * (n-1) / (n * slowest link).
double allreduce_cost(double bytes, int group_size, std::span<const double> link_bws);
double allreduce_cost(double bytes, int group_size, double bw_min);

}  // namespace resilsim
