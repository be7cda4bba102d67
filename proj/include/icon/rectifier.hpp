#pragma once

// Mitigating rectifier: per-row percentile threshold, steering mask and the
// gamma-scaled contrastive steering of attention rows, plus the calibration
// step that picks which heads to steer.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "icon/error.hpp"
#include "icon/fis.hpp"

namespace icon {

struct HeadRef {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadRef&) const = default;
};

struct SteeringPlan {
  std::vector<HeadRef> heads;
  double tau = 0.1;
  double gamma = 0.3;
  bool apply_during_prefill = false;

  void validate(int n_layers, int n_heads) const {
    require(tau >= 0.0 && tau <= 1.0, ErrorKind::invalid_argument,
            "steering plan: tau " + std::to_string(tau) + " outside [0, 1]");
    require(gamma > 0.0 && std::isfinite(gamma), ErrorKind::invalid_argument,
            "steering plan: gamma must be positive");
    for (const auto& h : heads) {
      require(h.layer >= 0 && h.layer < n_layers && h.head >= 0 && h.head < n_heads,
              ErrorKind::out_of_range,
              "steering plan: head (" + std::to_string(h.layer) + ", " + std::to_string(h.head) +
                  ") index out of range");
    }
  }

  bool is_identity() const noexcept { return heads.empty() || gamma == 1.0 || tau == 0.0; }
};

/// Number of masked entries for scope tau over n entries: ceil(tau * n). The
/// small slack keeps products like 0.1 * 40 from rounding up to 5.
inline std::size_t steering_budget(double tau, std::size_t n) {
  const double raw = tau * static_cast<double>(n);
  const double k = std::ceil(raw - 1e-9);
  return static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(n)));
}

/// The k-th largest entry with k = ceil(tau * n); +inf when k = 0.
inline double row_threshold(std::span<const double> row, double tau) {
  require(!row.empty(), ErrorKind::invalid_argument, "row_threshold: empty row");
  require(tau >= 0.0 && tau <= 1.0, ErrorKind::invalid_argument, "row_threshold: tau outside [0, 1]");
  const auto k = steering_budget(tau, row.size());
  if (k == 0) return std::numeric_limits<double>::infinity();
  std::vector<double> sorted(row.begin(), row.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end(),
                   std::greater<>());
  return sorted[k - 1];
}

/// M_j = 1 iff a_j >= theta. Ties at theta are all masked.
inline std::vector<std::uint8_t> steering_mask(std::span<const double> row, double theta) {
  std::vector<std::uint8_t> mask(row.size(), 0);
  for (std::size_t j = 0; j < row.size(); ++j) mask[j] = row[j] >= theta ? 1 : 0;
  return mask;
}

/// a_j * (1 + M_j (gamma - 1)), renormalized to sum to 1. Returns the input
/// unchanged when gamma = 1 or the mask is empty.
inline std::vector<double> apply_steering(std::span<const double> row, std::span<const std::uint8_t> mask,
                                          double gamma) {
  require(row.size() == mask.size(), ErrorKind::shape_mismatch, "apply_steering: mask length differs from row");
  require(gamma >= 0.0 && std::isfinite(gamma), ErrorKind::invalid_argument,
          "apply_steering: gamma must be non-negative");
  std::vector<double> out(row.begin(), row.end());
  const bool any = std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
  if (gamma == 1.0 || !any) return out;
  double total = 0.0;
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (mask[j]) out[j] *= gamma;
    total += out[j];
  }
  require(total > 0.0, ErrorKind::numeric, "steering annihilated row");
  for (auto& v : out) v /= total;
  return out;
}

/// Threshold, mask and steer one attention row in place.
inline void steer_row(std::span<double> row, double tau, double gamma) {
  if (gamma == 1.0 || tau == 0.0) return;
  const double theta = row_threshold(row, tau);
  const auto mask = steering_mask(row, theta);
  const auto steered = apply_steering(row, mask, gamma);
  std::copy(steered.begin(), steered.end(), row.begin());
}

/// Within each layer of `layers`, the `heads_per_layer` heads whose mean FIS
/// rises most from benign to attacked calibration runs (ties to the lower
/// head index). Output is sorted by (layer, head).
inline std::vector<HeadRef> select_adv_heads(std::span<const FisReport> benign, std::span<const FisReport> attacked,
                                             std::span<const int> layers, int heads_per_layer) {
  require(!benign.empty() && !attacked.empty(), ErrorKind::invalid_argument,
          "select_adv_heads: empty calibration set");
  const int n_layers = benign.front().n_layers;
  const int n_heads = benign.front().n_heads;
  require(heads_per_layer >= 1 && heads_per_layer <= n_heads, ErrorKind::out_of_range,
          "select_adv_heads: heads per layer m=" + std::to_string(heads_per_layer) + " out of range [1, " +
              std::to_string(n_heads) + "]");
  auto mean_head = [&](std::span<const FisReport> reports, int l, int h) {
    double sum = 0.0;
    for (const auto& r : reports) {
      require(r.n_layers == n_layers && r.n_heads == n_heads, ErrorKind::shape_mismatch,
              "select_adv_heads: reports disagree on (L, H)");
      sum += r.head(l, h);
    }
    return sum / static_cast<double>(reports.size());
  };

  std::vector<HeadRef> out;
  std::vector<int> sorted_layers(layers.begin(), layers.end());
  std::sort(sorted_layers.begin(), sorted_layers.end());
  for (int l : sorted_layers) {
    require(l >= 0 && l < n_layers, ErrorKind::out_of_range, "select_adv_heads: layer index out of range");
    std::vector<double> gap(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) gap[h] = mean_head(attacked, l, h) - mean_head(benign, l, h);
    std::vector<int> order(static_cast<std::size_t>(n_heads));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return gap[a] > gap[b]; });
    std::vector<int> chosen(order.begin(), order.begin() + heads_per_layer);
    std::sort(chosen.begin(), chosen.end());
    for (int h : chosen) out.push_back({l, h});
  }
  return out;
}

}  // namespace icon
