#include "resilsim/workload.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace resilsim {

const char* to_string(ChunkKind kind) {
  switch (kind) {
    case ChunkKind::F: return "F";
    case ChunkKind::B: return "B";
    case ChunkKind::W: return "W";
    case ChunkKind::BW: return "BW";
  }
  return "?";
}

double CostModel::ratio(ChunkKind kind) const {
  switch (kind) {
    case ChunkKind::F: return ratio_f;
    case ChunkKind::B: return ratio_b;
    case ChunkKind::W: return ratio_w;
    case ChunkKind::BW: return ratio_b + ratio_w;
  }
  return 0.0;
}

void CostModel::check() const {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("cost coefficients must be non-negative");
  if (alpha == 0.0 && beta == 0.0) throw std::invalid_argument("cost model has zero alpha and beta");
  if (!(ratio_f > 0.0 && ratio_b > 0.0 && ratio_w > 0.0))
    throw std::invalid_argument("chunk ratios must be positive");
}

std::vector<MicroBatch> pack_sequences(std::span<const std::int64_t> doc_lengths, std::int64_t token_budget,
                                       int first_id) {
  if (token_budget <= 0) throw std::invalid_argument("token budget must be positive");
  std::vector<std::int64_t> sorted(doc_lengths.begin(), doc_lengths.end());
  for (auto l : sorted) {
    if (l <= 0) throw std::invalid_argument("document length must be positive");
    if (l > token_budget)
      throw std::invalid_argument("document of " + std::to_string(l) + " tokens exceeds budget " +
                                  std::to_string(token_budget));
  }
  std::stable_sort(sorted.begin(), sorted.end(), std::greater<>());

  std::vector<MicroBatch> bins;
  std::vector<std::int64_t> remaining;
  for (auto l : sorted) {
    auto it = std::find_if(remaining.begin(), remaining.end(), [l](std::int64_t r) { return r >= l; });
    if (it == remaining.end()) {
      MicroBatch mb;
      mb.id = first_id + static_cast<int>(bins.size());
      mb.token_budget = token_budget;
      bins.push_back(std::move(mb));
      remaining.push_back(token_budget);
      it = std::prev(remaining.end());
    }
    const auto idx = static_cast<std::size_t>(it - remaining.begin());
    bins[idx].doc_lengths.push_back(l);
    *it -= l;
  }
  for (std::size_t i = 0; i < bins.size(); ++i)
    if (remaining[i] > 0) bins[i].doc_lengths.push_back(remaining[i]);
  return bins;
}

std::int64_t quad_load(const MicroBatch& mb) {
  std::int64_t q = 0;
  for (auto l : mb.doc_lengths) q += l * l;
  return q;
}

double predict_chunk_time(const MicroBatch& mb, ChunkKind kind, const CostModel& model, int layers_on_stage,
                          double device_speed) {
  if (!(device_speed > 0.0)) throw std::invalid_argument("cannot schedule onto a device with zero speed");
  const double base = model.alpha * static_cast<double>(mb.token_budget) +
                      model.beta * static_cast<double>(quad_load(mb));
  return model.ratio(kind) * static_cast<double>(layers_on_stage) * base / device_speed;
}

CostFit fit_cost_model(std::span<const std::pair<MicroBatch, double>> samples) {
  if (samples.size() < 2) throw std::invalid_argument("need at least 2 samples to fit the cost model");

  // Columns are scaled to unit norm before solving the 2x2 normal equations.
  double nn = 0, qq = 0;
  for (const auto& [mb, t] : samples) {
    const double n = static_cast<double>(mb.token_budget);
    const double q = static_cast<double>(quad_load(mb));
    nn += n * n;
    qq += q * q;
  }
  const double sn = std::sqrt(nn), sq = std::sqrt(qq);
  if (sn == 0.0 || sq == 0.0) throw std::invalid_argument("unidentifiable β");

  double a11 = 0, a12 = 0, a22 = 0, b1 = 0, b2 = 0;
  for (const auto& [mb, t] : samples) {
    const double n = static_cast<double>(mb.token_budget) / sn;
    const double q = static_cast<double>(quad_load(mb)) / sq;
    a11 += n * n;
    a12 += n * q;
    a22 += q * q;
    b1 += n * t;
    b2 += q * t;
  }
  const double det = a11 * a22 - a12 * a12;
  if (det < 1e-12) throw std::invalid_argument("unidentifiable β");

  CostFit fit;
  fit.model.alpha = std::max(0.0, (a22 * b1 - a12 * b2) / det / sn);
  fit.model.beta = std::max(0.0, (a11 * b2 - a12 * b1) / det / sq);
  fit.model.check();

  double err = 0;
  for (const auto& [mb, t] : samples) {
    const double pred = predict_chunk_time(mb, ChunkKind::F, fit.model, 1, 1.0);
    err += std::abs(pred - t) / t;
  }
  fit.mape = err / static_cast<double>(samples.size());
  return fit;
}

}  // namespace resilsim
