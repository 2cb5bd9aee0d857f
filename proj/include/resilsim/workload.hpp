#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "resilsim/core.hpp"

namespace resilsim {

/// F, B and W are the zero-bubble chunk kinds; BW is the merged backward
/// chunk that 1F1B executes.
enum class ChunkKind { F, B, W, BW };

const char* to_string(ChunkKind kind);

/// Per-layer micro-batch cost: alpha * N + beta * sum(l_i^2), scaled per
/// chunk kind by the chunk ratios.
struct CostModel {
  double alpha = 0.0;  // s / token
  double beta = 0.0;   // s / token^2
  double ratio_f = 1.0;
  double ratio_b = 1.0;
  double ratio_w = 1.0;

  double ratio(ChunkKind kind) const;
  /// Throws std::invalid_argument when the coefficients are unusable.
  void check() const;
};

/// First-fit-decreasing packing into micro-batches of exactly `token_budget`
/// tokens. Any residual gap becomes a trailing padding document.
std::vector<MicroBatch> pack_sequences(std::span<const std::int64_t> doc_lengths, std::int64_t token_budget,
                                       int first_id = 0);

/// sum of squared document lengths, padding included.
std::int64_t quad_load(const MicroBatch& mb);

double predict_chunk_time(const MicroBatch& mb, ChunkKind kind, const CostModel& model, int layers_on_stage,
                          double device_speed);

struct CostFit {
  CostModel model;
  double mape = 0.0;
};

/// Least-squares fit of (alpha, beta) from (micro-batch, measured single-layer
/// F time) samples. Chunk ratios are left at their defaults.
CostFit fit_cost_model(std::span<const std::pair<MicroBatch, double>> samples);

}  // namespace resilsim
