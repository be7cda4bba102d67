#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "icon/commands.hpp"

namespace support {

/// Random probability row of length n; `sharp` > 1 concentrates mass.
inline std::vector<double> random_row(std::mt19937_64& gen, std::size_t n, double sharp = 1.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> row(n);
  double s = 0.0;
  for (auto& x : row) {
    x = std::pow(u(gen), sharp);
    s += x;
  }
  for (auto& x : row) x /= s;
  return row;
}

/// Entropy oracle: long double accumulation, written from the definition.
inline double naive_entropy(const std::vector<double>& row, double eps = 1e-10) {
  long double h = 0.0L;
  for (double a : row)
    if (a != 0.0) h -= static_cast<long double>(a) * std::log(static_cast<long double>(a) + eps);
  long double e = h / std::log(static_cast<long double>(row.size()));
  if (e < 0.0L) e = 0.0L;
  if (e > 1.0L) e = 1.0L;
  return static_cast<double>(e);
}

/// Steering oracle: sort a copy descending, take the k-th value as the
/// threshold, mask by comparison, scale and renormalize.
inline std::vector<double> brute_force_steer(const std::vector<double>& row, double tau, double gamma) {
  const auto n = row.size();
  std::size_t k = 0;
  while (k < n && static_cast<double>(k) < tau * static_cast<double>(n) - 1e-9) ++k;
  if (k == 0 || gamma == 1.0) return row;
  std::vector<double> sorted = row;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double theta = sorted[k - 1];
  std::vector<double> out(n);
  long double total = 0.0L;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = row[j] >= theta ? row[j] * gamma : row[j];
    total += out[j];
  }
  for (auto& x : out) x = static_cast<double>(x / total);
  return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline const icon::TinyTransformer& planted_model() {
  static const auto model = icon::build_model(icon::ModelConfig{}, icon::TriggerPlant{});
  return model;
}

inline const icon::TinyTransformer& clean_model() {
  static const auto model = icon::build_model(icon::ModelConfig{});
  return model;
}

/// Small trained setup shared by pipeline tests.
struct Trained {
  icon::Calibration calibration;
  icon::ProberModel prober;
  icon::SteeringPlan plan;
};

inline const Trained& trained() {
  static const Trained t = [] {
    const auto& model = planted_model();
    Trained out;
    icon::CalibrationOptions copt;
    copt.n_pairs = 16;
    out.calibration = icon::calibrate(model, copt);
    icon::DatasetOptions dopt;
    dopt.n_benign = 48;
    dopt.n_attacked = 48;
    dopt.seed = 901;
    const auto data = icon::build_dataset(model, out.calibration.layers, dopt);
    icon::TrainOptions topt;
    topt.epochs = 60;
    out.prober = icon::prober_train(data.labeled(0.8, 5), icon::ProberArch{}, topt).model;
    out.plan.heads = out.calibration.adv_heads;
    out.plan.gamma = 0.2;
    out.plan.tau = 0.05;
    return out;
  }();
  return t;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("icon_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace support
