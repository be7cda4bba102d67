#pragma once

// Latent-trace prober: FIS-based layer selection, per-head temporal
// statistics, and a small 1D-CNN + MLP classifier with hand-written backprop.
//
// The CNN runs along the generation axis of the per-token entropy channels
// with circular padding, then takes a global max over time. Circular windows
// make the pooled features exactly invariant to tiling the time axis (a
// series repeated r times yields the same multiset of windows).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "icon/error.hpp"
#include "icon/fis.hpp"
#include "icon/rng.hpp"
#include "icon/tensor_io.hpp"

namespace icon {

/// The K layers whose mean layer FIS rises most from benign to attacked runs,
/// ties to the lower index, returned ascending.
inline std::vector<int> select_layers(std::span<const FisReport> benign, std::span<const FisReport> attacked, int k) {
  require(!benign.empty() && !attacked.empty(), ErrorKind::invalid_argument, "select_layers: empty calibration set");
  const int n_layers = benign.front().n_layers;
  require(k >= 1 && k <= n_layers, ErrorKind::out_of_range,
          "select_layers: K=" + std::to_string(k) + " out of range [1, " + std::to_string(n_layers) + "]");
  auto mean_layer = [&](std::span<const FisReport> reports, int l) {
    double sum = 0.0;
    for (const auto& r : reports) {
      require(r.n_layers == n_layers && r.n_heads == benign.front().n_heads, ErrorKind::shape_mismatch,
              "select_layers: reports disagree on (L, H)");
      sum += r.layer(l);
    }
    return sum / static_cast<double>(reports.size());
  };
  std::vector<double> gap(static_cast<std::size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) gap[l] = mean_layer(attacked, l) - mean_layer(benign, l);
  std::vector<int> order(static_cast<std::size_t>(n_layers));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return gap[a] > gap[b]; });
  std::vector<int> chosen(order.begin(), order.begin() + k);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

struct HeadSummary {
  double min = 0.0;
  double mean = 0.0;
  double std = 0.0;
};

/// (min, mean, population std) of an entropy series.
inline HeadSummary aggregate_head(std::span<const double> series) {
  require(!series.empty(), ErrorKind::invalid_argument, "aggregate_head: empty series");
  HeadSummary s;
  s.min = *std::min_element(series.begin(), series.end());
  double sum = 0.0;
  for (double e : series) sum += e;
  s.mean = sum / static_cast<double>(series.size());
  double var = 0.0;
  for (double e : series) var += (e - s.mean) * (e - s.mean);
  s.std = std::sqrt(var / static_cast<double>(series.size()));
  return s;
}

struct FeatureBundle {
  std::vector<double> z;         // (layer, head, [min, mean, std])
  std::vector<double> channels;  // [layer * head][step], row-major
  int n_channels = 0;
  int n_steps = 0;
  std::vector<int> selected_layers;

  std::span<const double> channel(int c) const noexcept {
    return {channels.data() + static_cast<std::size_t>(c) * n_steps, static_cast<std::size_t>(n_steps)};
  }

  bool operator==(const FeatureBundle&) const = default;
};

inline FeatureBundle build_features(const EntropyTensor& et, std::span<const int> layers) {
  std::vector<int> sorted(layers.begin(), layers.end());
  std::sort(sorted.begin(), sorted.end());
  require(!sorted.empty(), ErrorKind::invalid_argument, "build_features: no layers selected");
  require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), ErrorKind::invalid_argument,
          "build_features: duplicate layer index");
  for (int l : sorted)
    require(l >= 0 && l < et.n_layers, ErrorKind::out_of_range,
            "build_features: layer " + std::to_string(l) + " index out of range");

  FeatureBundle b;
  b.selected_layers = sorted;
  b.n_channels = static_cast<int>(sorted.size()) * et.n_heads;
  b.n_steps = et.gen_len;
  b.z.reserve(static_cast<std::size_t>(3 * b.n_channels));
  b.channels.reserve(static_cast<std::size_t>(b.n_channels) * et.gen_len);
  for (int l : sorted) {
    for (int h = 0; h < et.n_heads; ++h) {
      const auto series = et.series(l, h);
      const auto s = aggregate_head(series);
      b.z.insert(b.z.end(), {s.min, s.mean, s.std});
      b.channels.insert(b.channels.end(), series.begin(), series.end());
    }
  }
  return b;
}

struct ProberArch {
  std::vector<int> conv_channels{32, 32};
  int kernel = 3;
  std::vector<int> mlp_hidden{256};
  std::uint64_t seed = 1;

  bool operator==(const ProberArch&) const = default;
};

/// Parameters live in one flat vector; `conv` and `dense` index into it.
/// Conv weights are [out][in][tap], dense weights are [out][in].
struct ProberModel {
  struct Block {
    std::size_t weight = 0;  // offset into params
    std::size_t bias = 0;
    int in = 0;
    int out = 0;
    int taps = 1;
    bool operator==(const Block&) const = default;
  };

  ProberArch arch;
  int in_channels = 0;
  int z_dim = 0;
  std::vector<int> selected_layers;
  std::vector<Block> conv;
  std::vector<Block> dense;
  std::vector<double> params;

  std::size_t parameter_count() const noexcept { return params.size(); }
  int d_feat() const noexcept { return conv.empty() ? in_channels : conv.back().out; }

  bool operator==(const ProberModel&) const = default;
};

/// Fresh model with Xavier-uniform weights and zero biases.
inline ProberModel make_prober(const ProberArch& arch, int in_channels, int z_dim, std::vector<int> selected_layers) {
  require(in_channels >= 1 && z_dim >= 0, ErrorKind::invalid_argument, "make_prober: bad input dimensions");
  require(arch.kernel >= 1 && arch.kernel % 2 == 1, ErrorKind::invalid_argument, "make_prober: kernel must be odd");
  for (int c : arch.conv_channels) require(c >= 1, ErrorKind::invalid_argument, "make_prober: conv width must be >= 1");
  for (int c : arch.mlp_hidden) require(c >= 1, ErrorKind::invalid_argument, "make_prober: hidden width must be >= 1");

  ProberModel m;
  m.arch = arch;
  m.in_channels = in_channels;
  m.z_dim = z_dim;
  m.selected_layers = std::move(selected_layers);

  std::size_t cursor = 0;
  auto add_block = [&](std::vector<ProberModel::Block>& blocks, int in, int out, int taps) {
    ProberModel::Block b{cursor, 0, in, out, taps};
    cursor += static_cast<std::size_t>(in) * out * taps;
    b.bias = cursor;
    cursor += static_cast<std::size_t>(out);
    blocks.push_back(b);
  };
  int width = in_channels;
  for (int c : arch.conv_channels) {
    add_block(m.conv, width, c, arch.kernel);
    width = c;
  }
  width = m.d_feat() + z_dim;
  for (int hdim : arch.mlp_hidden) {
    add_block(m.dense, width, hdim, 1);
    width = hdim;
  }
  add_block(m.dense, width, 1, 1);
  m.params.assign(cursor, 0.0);

  Rng rng(mix_seed(arch.seed, 11));
  auto init = [&](const ProberModel::Block& b) {
    const double fan_in = static_cast<double>(b.in) * b.taps;
    const double fan_out = static_cast<double>(b.out) * b.taps;
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    const std::size_t n = static_cast<std::size_t>(b.in) * b.out * b.taps;
    for (std::size_t i = 0; i < n; ++i) m.params[b.weight + i] = rng.uniform(-bound, bound);
  };
  for (const auto& b : m.conv) init(b);
  for (const auto& b : m.dense) init(b);
  return m;
}

namespace prober_detail {

struct Activations {
  std::vector<std::vector<double>> conv_out;  // post-ReLU, [layer][channel * T + t]
  std::vector<int> argmax;                    // per pooled channel
  std::vector<std::vector<double>> dense_in;  // input to each dense block
  double logit = 0.0;
  int steps = 0;
};

inline int wrap(int i, int n) noexcept { return ((i % n) + n) % n; }

/// src[o * T + t] = circular input index read by tap o at output step t.
inline std::vector<int> tap_sources(int taps, int T) {
  std::vector<int> src(static_cast<std::size_t>(taps) * T);
  const int pad = taps / 2;
  for (int o = 0; o < taps; ++o)
    for (int t = 0; t < T; ++t) src[static_cast<std::size_t>(o) * T + t] = wrap(t + o - pad, T);
  return src;
}

inline void check_bundle(const ProberModel& m, const FeatureBundle& b) {
  require(b.n_channels == m.in_channels, ErrorKind::shape_mismatch,
          "prober: bundle has " + std::to_string(b.n_channels) + " channels, model expects " +
              std::to_string(m.in_channels));
  require(static_cast<int>(b.z.size()) == m.z_dim, ErrorKind::shape_mismatch,
          "prober: bundle z has " + std::to_string(b.z.size()) + " entries, model expects " + std::to_string(m.z_dim));
  require(b.n_steps >= 1 && b.channels.size() == static_cast<std::size_t>(b.n_channels) * b.n_steps,
          ErrorKind::shape_mismatch, "prober: channel matrix shape is inconsistent");
}

inline double forward(const ProberModel& m, const FeatureBundle& b, Activations& act) {
  check_bundle(m, b);
  const int T = b.n_steps;
  act.steps = T;
  act.conv_out.assign(m.conv.size(), {});
  const double* input = b.channels.data();
  const std::vector<double>* prev = nullptr;
  for (std::size_t li = 0; li < m.conv.size(); ++li) {
    const auto& blk = m.conv[li];
    const auto src = tap_sources(blk.taps, T);
    auto& out = act.conv_out[li];
    out.assign(static_cast<std::size_t>(blk.out) * T, 0.0);
    const double* in = prev ? prev->data() : input;
    const double* w = m.params.data() + blk.weight;
    const double* bias = m.params.data() + blk.bias;
    for (int co = 0; co < blk.out; ++co) {
      double* acc = out.data() + static_cast<std::size_t>(co) * T;
      std::fill(acc, acc + T, bias[co]);
      // Per step t the terms are added in (ci, o) order.
      for (int ci = 0; ci < blk.in; ++ci) {
        const double* wrow = w + (static_cast<std::size_t>(co) * blk.in + ci) * blk.taps;
        const double* irow = in + static_cast<std::size_t>(ci) * T;
        for (int o = 0; o < blk.taps; ++o) {
          const double wo = wrow[o];
          const int* so = src.data() + static_cast<std::size_t>(o) * T;
          for (int t = 0; t < T; ++t) acc[t] += wo * irow[so[t]];
        }
      }
      for (int t = 0; t < T; ++t) acc[t] = acc[t] > 0.0 ? acc[t] : 0.0;
    }
    prev = &out;
  }

  const int d_feat = m.d_feat();
  const double* last = prev ? prev->data() : input;
  std::vector<double> u(static_cast<std::size_t>(d_feat + m.z_dim));
  act.argmax.assign(static_cast<std::size_t>(d_feat), 0);
  for (int c = 0; c < d_feat; ++c) {
    const double* row = last + static_cast<std::size_t>(c) * T;
    int best = 0;
    for (int t = 1; t < T; ++t)
      if (row[t] > row[best]) best = t;
    act.argmax[c] = best;
    u[c] = row[best];
  }
  std::copy(b.z.begin(), b.z.end(), u.begin() + d_feat);

  act.dense_in.assign(m.dense.size(), {});
  for (std::size_t li = 0; li < m.dense.size(); ++li) {
    const auto& blk = m.dense[li];
    act.dense_in[li] = u;
    std::vector<double> y(static_cast<std::size_t>(blk.out));
    const double* w = m.params.data() + blk.weight;
    const double* bias = m.params.data() + blk.bias;
    for (int o = 0; o < blk.out; ++o) {
      double s = bias[o];
      const double* wrow = w + static_cast<std::size_t>(o) * blk.in;
      for (int i = 0; i < blk.in; ++i) s += wrow[i] * u[i];
      y[o] = (li + 1 < m.dense.size() && s < 0.0) ? 0.0 : s;
    }
    u = std::move(y);
  }
  act.logit = u[0];
  return act.logit;
}

/// Numerically stable binary cross-entropy on a logit.
inline double bce_with_logit(double logit, int label) {
  const double softplus = logit > 0.0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
  return softplus - (label ? logit : 0.0);
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Adds d(loss)/d(params) into `grad`; returns the loss.
inline double accumulate_gradient(const ProberModel& m, const FeatureBundle& b, int label, std::vector<double>& grad) {
  Activations act;
  const double logit = forward(m, b, act);
  const double loss = bce_with_logit(logit, label);
  const int T = act.steps;

  std::vector<double> d_out{sigmoid(logit) - static_cast<double>(label)};
  for (std::size_t li = m.dense.size(); li-- > 0;) {
    const auto& blk = m.dense[li];
    const auto& in = act.dense_in[li];
    const double* w = m.params.data() + blk.weight;
    std::vector<double> d_in(static_cast<std::size_t>(blk.in), 0.0);
    for (int o = 0; o < blk.out; ++o) {
      const double g = d_out[o];
      if (g == 0.0) continue;
      grad[blk.bias + o] += g;
      double* gw = grad.data() + blk.weight + static_cast<std::size_t>(o) * blk.in;
      const double* wrow = w + static_cast<std::size_t>(o) * blk.in;
      for (int i = 0; i < blk.in; ++i) {
        gw[i] += g * in[i];
        d_in[i] += g * wrow[i];
      }
    }
    // ReLU between dense blocks: the input of block li is the output of li-1.
    if (li > 0)
      for (int i = 0; i < blk.in; ++i)
        if (in[i] <= 0.0) d_in[i] = 0.0;
    d_out = std::move(d_in);
  }

  if (m.conv.empty()) return loss;

  // d_out now holds d(loss)/d(u); the first d_feat entries are the pooled maxima.
  const int d_feat = m.d_feat();
  std::vector<double> d_act(static_cast<std::size_t>(d_feat) * T, 0.0);
  for (int c = 0; c < d_feat; ++c) d_act[static_cast<std::size_t>(c) * T + act.argmax[c]] = d_out[c];

  for (std::size_t li = m.conv.size(); li-- > 0;) {
    const auto& blk = m.conv[li];
    const auto src_table = tap_sources(blk.taps, T);
    const auto& out = act.conv_out[li];
    const double* in = li > 0 ? act.conv_out[li - 1].data() : b.channels.data();
    const double* w = m.params.data() + blk.weight;
    std::vector<double> d_in(li > 0 ? static_cast<std::size_t>(blk.in) * T : 0, 0.0);
    for (int co = 0; co < blk.out; ++co) {
      for (int t = 0; t < T; ++t) {
        const std::size_t idx = static_cast<std::size_t>(co) * T + t;
        if (out[idx] <= 0.0) continue;
        const double g = d_act[idx];
        if (g == 0.0) continue;
        grad[blk.bias + co] += g;
        for (int ci = 0; ci < blk.in; ++ci) {
          const std::size_t wbase = (static_cast<std::size_t>(co) * blk.in + ci) * blk.taps;
          const double* irow = in + static_cast<std::size_t>(ci) * T;
          for (int o = 0; o < blk.taps; ++o) {
            const int src = src_table[static_cast<std::size_t>(o) * T + t];
            grad[blk.weight + wbase + o] += g * irow[src];
            if (li > 0) d_in[static_cast<std::size_t>(ci) * T + src] += g * w[wbase + o];
          }
        }
      }
    }
    d_act = std::move(d_in);
  }
  return loss;
}

inline double loss(const ProberModel& m, const FeatureBundle& b, int label) {
  Activations act;
  return bce_with_logit(forward(m, b, act), label);
}

}  // namespace prober_detail

/// Probability that the bundle comes from an attacked generation, strictly
/// inside (0, 1).
inline double prober_forward(const ProberModel& model, const FeatureBundle& bundle) {
  prober_detail::Activations act;
  const double p = prober_detail::sigmoid(prober_detail::forward(model, bundle, act));
  constexpr double kEdge = 1e-15;
  return std::clamp(p, kEdge, 1.0 - kEdge);
}

inline double prober_loss(const ProberModel& model, const FeatureBundle& bundle, int label) {
  return prober_detail::loss(model, bundle, label);
}

/// Analytic gradient of the cross-entropy loss w.r.t. every parameter.
inline std::vector<double> prober_gradient(const ProberModel& model, const FeatureBundle& bundle, int label) {
  std::vector<double> grad(model.params.size(), 0.0);
  prober_detail::accumulate_gradient(model, bundle, label, grad);
  return grad;
}

/// Max over parameters of |g_a - g_n| / max(1e-8, |g_a| + |g_n|) against
/// central finite differences. The network is piecewise linear (ReLU, max
/// pool); a step much above 1e-5 starts crossing those kinks on real inputs.
inline double gradient_check(const ProberModel& model, const FeatureBundle& bundle, int label, double step = 1e-5) {
  require(step > 0.0 && std::isfinite(step), ErrorKind::invalid_argument, "gradient_check: invalid step");
  const auto analytic = prober_gradient(model, bundle, label);
  ProberModel probe = model;
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.params.size(); ++i) {
    const double saved = probe.params[i];
    probe.params[i] = saved + step;
    const double up = prober_detail::loss(probe, bundle, label);
    probe.params[i] = saved - step;
    const double down = prober_detail::loss(probe, bundle, label);
    probe.params[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    require(std::isfinite(analytic[i]) && std::isfinite(numeric), ErrorKind::numeric,
            "gradient_check: non-finite gradient at parameter " + std::to_string(i));
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

struct LabeledDataset {
  std::vector<FeatureBundle> bundles;
  std::vector<int> labels;  // 0 = benign, 1 = attacked
  double train_fraction = 0.8;
  std::uint64_t split_seed = 1;

  std::size_t size() const noexcept { return bundles.size(); }
};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Stratified seeded split: each class is shuffled and its first
/// round(train_fraction * n_class) members go to training.
inline DatasetSplit split_dataset(const LabeledDataset& data) {
  require(!data.bundles.empty() && data.bundles.size() == data.labels.size(), ErrorKind::invalid_argument,
          "split_dataset: empty or misaligned dataset");
  require(data.train_fraction > 0.0 && data.train_fraction <= 1.0, ErrorKind::invalid_argument,
          "split_dataset: train fraction outside (0, 1]");
  DatasetSplit split;
  Rng rng(mix_seed(data.split_seed, 21));
  for (int cls : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < data.labels.size(); ++i)
      if (data.labels[i] == cls) members.push_back(i);
    rng.shuffle(std::span<std::size_t>(members));
    const auto n_train = static_cast<std::size_t>(std::llround(data.train_fraction * static_cast<double>(members.size())));
    split.train.insert(split.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.validation.insert(split.validation.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  return split;
}

struct TrainOptions {
  int epochs = 200;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 32;
  double threshold = 0.5;
  std::uint64_t seed = 1;
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;          // mean training loss after the epoch's updates
  double val_accuracy = 0.0;  // NaN when the validation split is empty
};

struct TrainResult {
  ProberModel model;
  std::vector<EpochLog> log;
  DatasetSplit split;
};

/// Mini-batch gradient descent with momentum on binary cross-entropy.
/// Deterministic: batch order comes from the seed and gradients accumulate in
/// sample order.
inline TrainResult prober_train(const LabeledDataset& data, const ProberArch& arch, const TrainOptions& opt) {
  require(opt.epochs >= 1, ErrorKind::invalid_argument, "prober_train: budget must be >= 1 epoch");
  require(opt.batch_size >= 1 && opt.lr > 0.0, ErrorKind::invalid_argument, "prober_train: bad optimizer settings");
  require(!data.bundles.empty(), ErrorKind::invalid_argument, "prober_train: empty dataset");
  const bool has_pos = std::count(data.labels.begin(), data.labels.end(), 1) > 0;
  const bool has_neg = std::count(data.labels.begin(), data.labels.end(), 0) > 0;
  require(has_pos && has_neg, ErrorKind::data, "prober_train: single-class data");

  TrainResult result;
  result.split = split_dataset(data);
  const auto& train = result.split.train;
  const auto& val = result.split.validation;
  bool train_pos = false, train_neg = false;
  for (auto i : train) (data.labels[i] ? train_pos : train_neg) = true;
  require(train_pos && train_neg, ErrorKind::data, "prober_train: single-class data in training split");

  const auto& first = data.bundles.front();
  result.model = make_prober(arch, first.n_channels, static_cast<int>(first.z.size()), first.selected_layers);
  auto& model = result.model;

  std::vector<double> velocity(model.params.size(), 0.0);
  std::vector<double> grad(model.params.size(), 0.0);
  std::vector<std::size_t> order = train;
  Rng rng(mix_seed(opt.seed, 31));

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t k = start; k < end; ++k)
        prober_detail::accumulate_gradient(model, data.bundles[order[k]], data.labels[order[k]], grad);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t p = 0; p < model.params.size(); ++p) {
        velocity[p] = opt.momentum * velocity[p] - opt.lr * grad[p] * scale;
        model.params[p] += velocity[p];
      }
    }

    double total = 0.0;
    for (auto i : train) total += prober_detail::loss(model, data.bundles[i], data.labels[i]);
    const double mean_loss = total / static_cast<double>(train.size());
    require(std::isfinite(mean_loss), ErrorKind::numeric,
            "prober_train: non-finite loss at epoch " + std::to_string(epoch));
    double acc = std::numeric_limits<double>::quiet_NaN();
    if (!val.empty()) {
      std::size_t correct = 0;
      for (auto i : val) {
        const int pred = prober_forward(model, data.bundles[i]) >= opt.threshold ? 1 : 0;
        if (pred == data.labels[i]) ++correct;
      }
      acc = static_cast<double>(correct) / static_cast<double>(val.size());
    }
    result.log.push_back({epoch, mean_loss, acc});
  }
  return result;
}

inline std::string save_prober(const ProberModel& m) {
  ByteWriter w;
  w.raw("PRB1");
  w.u32(static_cast<std::uint32_t>(m.in_channels));
  w.u32(static_cast<std::uint32_t>(m.z_dim));
  w.u32(static_cast<std::uint32_t>(m.arch.kernel));
  w.u32(static_cast<std::uint32_t>(m.arch.conv_channels.size()));
  for (int c : m.arch.conv_channels) w.u32(static_cast<std::uint32_t>(c));
  w.u32(static_cast<std::uint32_t>(m.arch.mlp_hidden.size()));
  for (int c : m.arch.mlp_hidden) w.u32(static_cast<std::uint32_t>(c));
  w.u32(static_cast<std::uint32_t>(m.selected_layers.size()));
  for (int l : m.selected_layers) w.u32(static_cast<std::uint32_t>(l));
  w.u64(m.arch.seed);

  auto emit = [&](const std::string& name, std::size_t offset, std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(m.params[offset + i]);
    w.tensor(name, t);
  };
  for (std::size_t i = 0; i < m.conv.size(); ++i) {
    const auto& b = m.conv[i];
    emit("conv." + std::to_string(i) + ".weight", b.weight,
         {static_cast<std::size_t>(b.out), static_cast<std::size_t>(b.in), static_cast<std::size_t>(b.taps)});
    emit("conv." + std::to_string(i) + ".bias", b.bias, {static_cast<std::size_t>(b.out)});
  }
  for (std::size_t i = 0; i < m.dense.size(); ++i) {
    const auto& b = m.dense[i];
    emit("mlp." + std::to_string(i) + ".weight", b.weight, {static_cast<std::size_t>(b.out), static_cast<std::size_t>(b.in)});
    emit("mlp." + std::to_string(i) + ".bias", b.bias, {static_cast<std::size_t>(b.out)});
  }
  return w.bytes();
}

inline ProberModel load_prober(std::string bytes) {
  ByteReader r(std::move(bytes));
  require(r.raw(4) == "PRB1", ErrorKind::data, "prober checkpoint: bad magic (expected PRB1)");
  ProberArch arch;
  const int in_channels = static_cast<int>(r.u32());
  const int z_dim = static_cast<int>(r.u32());
  arch.kernel = static_cast<int>(r.u32());
  arch.conv_channels.resize(r.u32());
  for (auto& c : arch.conv_channels) c = static_cast<int>(r.u32());
  arch.mlp_hidden.resize(r.u32());
  for (auto& c : arch.mlp_hidden) c = static_cast<int>(r.u32());
  std::vector<int> layers(r.u32());
  for (auto& l : layers) l = static_cast<int>(r.u32());
  arch.seed = r.u64();

  ProberModel m = make_prober(arch, in_channels, z_dim, layers);
  const auto tensors = r.remaining_tensors();
  auto fill = [&](const std::string& name, std::size_t offset, std::size_t count) {
    for (const auto& nt : tensors) {
      if (nt.name != name) continue;
      require(nt.tensor.size() == count, ErrorKind::shape_mismatch, "prober checkpoint: tensor '" + name + "' has wrong size");
      for (std::size_t i = 0; i < count; ++i) m.params[offset + i] = nt.tensor[i];
      return;
    }
    fail(ErrorKind::data, "prober checkpoint: missing tensor '" + name + "'");
  };
  for (std::size_t i = 0; i < m.conv.size(); ++i) {
    const auto& b = m.conv[i];
    fill("conv." + std::to_string(i) + ".weight", b.weight, static_cast<std::size_t>(b.out) * b.in * b.taps);
    fill("conv." + std::to_string(i) + ".bias", b.bias, static_cast<std::size_t>(b.out));
  }
  for (std::size_t i = 0; i < m.dense.size(); ++i) {
    const auto& b = m.dense[i];
    fill("mlp." + std::to_string(i) + ".weight", b.weight, static_cast<std::size_t>(b.out) * b.in);
    fill("mlp." + std::to_string(i) + ".bias", b.bias, static_cast<std::size_t>(b.out));
  }
  return m;
}

}  // namespace icon
