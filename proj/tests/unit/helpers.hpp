#pragma once

#include <cstdint>
#include <vector>

#include "resilsim/core.hpp"

namespace resilsim::testing {

inline ParallelismConfig cfg_of(int tp, int dp, int pp, int layers, Schedule sched = Schedule::OneFOneB) {
  ParallelismConfig cfg;
  cfg.tp = tp;
  cfg.dp = dp;
  cfg.pp = pp;
  cfg.schedule = sched;
  cfg.num_layers = layers;
  cfg.layer_partition = ParallelismConfig::even_partition(layers, pp);
  return cfg;
}

// Two documents per micro-batch, split unevenly.
inline std::vector<MicroBatch> batch(int count, std::int64_t n) {
  std::vector<MicroBatch> out;
  for (int j = 0; j < count; ++j) {
    MicroBatch mb;
    mb.id = j;
    mb.token_budget = n;
    const std::int64_t head = n / (2 + j % 3);
    mb.doc_lengths = {head, n - head};
    out.push_back(mb);
  }
  return out;
}

inline MicroBatch uniform_docs(int id, int docs, std::int64_t len) {
  MicroBatch mb;
  mb.id = id;
  mb.token_budget = docs * len;
  mb.doc_lengths.assign(static_cast<std::size_t>(docs), len);
  return mb;
}

}  // namespace resilsim::testing
