#pragma once

// Focus Intensity Score: generation-normalized attention entropy per
// generated token, its complement averaged over the generation (per head),
// and the head mean per layer.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "icon/attention_trace.hpp"
#include "icon/error.hpp"

namespace icon {

inline constexpr double kDefaultEpsilon = 1e-10;
inline constexpr double kRowSumTolerance = 1e-6;

/// -(1 / log N) * sum_j a_j log(a_j + eps), clamped to [0, 1]. Zero entries
/// contribute exactly zero.
inline double token_entropy(std::span<const double> row, double epsilon = kDefaultEpsilon) {
  const auto n = row.size();
  require(n >= 2, ErrorKind::invalid_argument,
          "token_entropy: row length " + std::to_string(n) + " < 2 leaves log N undefined");
  require(epsilon > 0.0, ErrorKind::invalid_argument, "token_entropy: epsilon must be positive");
  double sum = 0.0;
  double acc = 0.0;
  for (double a : row) {
    require(a >= 0.0, ErrorKind::invalid_argument, "token_entropy: negative probability");
    sum += a;
    if (a > 0.0) acc += a * std::log(a + epsilon);
  }
  require(std::abs(sum - 1.0) <= kRowSumTolerance, ErrorKind::invalid_argument,
          "token_entropy: row sums to " + std::to_string(sum) + ", not 1");
  const double e = -acc / std::log(static_cast<double>(n));
  return std::clamp(e, 0.0, 1.0);
}

struct EntropyTensor {
  int n_layers = 0;
  int n_heads = 0;
  int gen_len = 0;
  double epsilon = kDefaultEpsilon;
  std::vector<double> values;  // [layer][head][step]

  std::span<const double> series(int layer, int head) const noexcept {
    return {values.data() + (static_cast<std::size_t>(layer) * n_heads + head) * gen_len,
            static_cast<std::size_t>(gen_len)};
  }

  bool operator==(const EntropyTensor&) const = default;
};

inline EntropyTensor entropy_tensor(const AttentionTrace& trace, double epsilon = kDefaultEpsilon) {
  require(trace.gen_len >= 1, ErrorKind::invalid_argument, "entropy_tensor: empty generation");
  EntropyTensor et;
  et.n_layers = trace.n_layers;
  et.n_heads = trace.n_heads;
  et.gen_len = trace.gen_len;
  et.epsilon = epsilon;
  et.values.reserve(static_cast<std::size_t>(trace.n_layers) * trace.n_heads * trace.gen_len);
  for (int l = 0; l < trace.n_layers; ++l)
    for (int h = 0; h < trace.n_heads; ++h)
      for (int i = 0; i < trace.gen_len; ++i) et.values.push_back(token_entropy(trace.row(l, h, i), epsilon));
  return et;
}

struct FisReport {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> head_scores;   // [layer][head]
  std::vector<double> layer_scores;  // [layer]

  double head(int layer, int h) const noexcept {
    return head_scores[static_cast<std::size_t>(layer) * n_heads + h];
  }
  double layer(int l) const noexcept { return layer_scores[static_cast<std::size_t>(l)]; }
};

inline FisReport fis_report(const EntropyTensor& et) {
  require(et.n_layers >= 1 && et.n_heads >= 1 && et.gen_len >= 1 &&
              et.values.size() == static_cast<std::size_t>(et.n_layers) * et.n_heads * et.gen_len,
          ErrorKind::shape_mismatch, "fis_report: entropy tensor shape is inconsistent");
  FisReport report;
  report.n_layers = et.n_layers;
  report.n_heads = et.n_heads;
  report.head_scores.reserve(static_cast<std::size_t>(et.n_layers) * et.n_heads);
  for (int l = 0; l < et.n_layers; ++l) {
    double layer_sum = 0.0;
    for (int h = 0; h < et.n_heads; ++h) {
      double sum = 0.0;
      for (double e : et.series(l, h)) sum += e;
      const double score = std::clamp(1.0 - sum / et.gen_len, 0.0, 1.0);
      report.head_scores.push_back(score);
      layer_sum += score;
    }
    report.layer_scores.push_back(layer_sum / et.n_heads);
  }
  return report;
}

}  // namespace icon
