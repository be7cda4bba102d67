#pragma once

// A minimal decoder-only transformer (pre-norm blocks, learned positions, one
// GELU MLP per block) used as a deterministic test bed. Inference runs in
// double precision over float weights with a per-layer KV cache, records
// per-head attention for every generated token, and accepts a steering plan
// that rescales attention rows inside chosen heads.
//
// The base weights are seeded noise plus one structured path: the unembedding
// maps each token's embedding onto the logit of a fixed successor token, so an
// unperturbed model continues a context by the successor of its last token.
// A TriggerPlant then performs weight surgery on one head so that every query
// attends to the trigger token and the head writes the payload direction into
// the residual stream.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "icon/attention_trace.hpp"
#include "icon/error.hpp"
#include "icon/rectifier.hpp"
#include "icon/rng.hpp"
#include "icon/tensor_io.hpp"

namespace icon {

struct ModelConfig {
  int vocab_size = 32;
  int d_model = 64;
  int n_layers = 6;
  int n_heads = 4;
  int head_dim = 16;
  int max_seq = 128;
  std::uint64_t seed = 7;

  void validate() const {
    require(vocab_size >= 1 && d_model >= 1 && n_layers >= 1 && n_heads >= 1 && head_dim >= 1 && max_seq >= 1,
            ErrorKind::invalid_argument, "model config: all counts must be >= 1");
    require(vocab_size >= 8, ErrorKind::invalid_argument, "model config: vocab_size must be >= 8");
    require(max_seq >= 16, ErrorKind::invalid_argument, "model config: max_seq must be >= 16");
    require(d_model == n_heads * head_dim, ErrorKind::shape_mismatch,
            "model config: d_model " + std::to_string(d_model) + " != n_heads * head_dim " +
                std::to_string(n_heads * head_dim));
  }

  bool operator==(const ModelConfig&) const = default;
};

struct TriggerPlant {
  int trigger_token = 30;
  int payload_token = 31;
  int target_layer = 3;
  int target_head = 2;
  double qk_gain = 5.0;

  void validate(const ModelConfig& config) const {
    auto in = [](int v, int n) { return v >= 0 && v < n; };
    require(in(trigger_token, config.vocab_size) && in(payload_token, config.vocab_size), ErrorKind::out_of_range,
            "trigger plant: token index out of range");
    require(trigger_token != payload_token, ErrorKind::invalid_argument,
            "trigger plant: trigger_token must differ from payload_token");
    require(in(target_layer, config.n_layers), ErrorKind::out_of_range,
            "trigger plant: target_layer " + std::to_string(target_layer) + " index out of range");
    require(in(target_head, config.n_heads), ErrorKind::out_of_range,
            "trigger plant: target_head " + std::to_string(target_head) + " index out of range");
    require(qk_gain > 0.0 && std::isfinite(qk_gain), ErrorKind::invalid_argument,
            "trigger plant: qk_gain must be positive");
  }

  bool operator==(const TriggerPlant&) const = default;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // projections are [d_in, d_out]
  Tensor ln2_gain, ln2_bias;
  Tensor w_up, b_up, w_down, b_down;

  bool operator==(const LayerWeights&) const = default;
};

struct TinyTransformer {
  ModelConfig config;
  Tensor tok_emb;  // [vocab, d]
  Tensor pos_emb;  // [max_seq, d]
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor w_out;  // [d, vocab]
  std::optional<TriggerPlant> plant;

  bool operator==(const TinyTransformer&) const = default;
};

/// Calls `fn(name, tensor)` for every weight in checkpoint order.
template <typename Model, typename Fn>
  requires std::same_as<std::remove_const_t<Model>, TinyTransformer>
void for_each_tensor(Model& model, Fn&& fn) {
  fn(std::string("tok_emb"), model.tok_emb);
  fn(std::string("pos_emb"), model.pos_emb);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& w = model.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "ln1_gain", w.ln1_gain);
    fn(p + "ln1_bias", w.ln1_bias);
    fn(p + "wq", w.wq);
    fn(p + "bq", w.bq);
    fn(p + "wk", w.wk);
    fn(p + "bk", w.bk);
    fn(p + "wv", w.wv);
    fn(p + "bv", w.bv);
    fn(p + "wo", w.wo);
    fn(p + "bo", w.bo);
    fn(p + "ln2_gain", w.ln2_gain);
    fn(p + "ln2_bias", w.ln2_bias);
    fn(p + "w_up", w.w_up);
    fn(p + "b_up", w.b_up);
    fn(p + "w_down", w.w_down);
    fn(p + "b_down", w.b_down);
  }
  fn(std::string("lnf_gain"), model.lnf_gain);
  fn(std::string("lnf_bias"), model.lnf_bias);
  fn(std::string("w_out"), model.w_out);
}

namespace lm_detail {

inline constexpr double kPositionScale = 0.2;
inline constexpr double kOutputProjScale = 0.25;
inline constexpr double kMlpOutScale = 0.1;
inline constexpr double kLayerNormEps = 1e-5;

inline Tensor normal_tensor(Rng& rng, std::vector<std::size_t> shape, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

inline Tensor filled(std::size_t n, float value) {
  Tensor t({n});
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Removes the mean and the components along `basis` (assumed orthonormal),
/// then rescales to `norm`. Returns false if nothing is left.
inline bool orthonormalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis, double norm) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  for (auto& x : v) x -= mean;
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& b : basis) {
      const double c = dot(v, b);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * b[i];
    }
  }
  const double len = std::sqrt(dot(v, v));
  if (len < 1e-6) return false;
  for (auto& x : v) x *= norm / len;
  return true;
}

/// Unit-norm rows of the token embedding, in double precision.
inline std::vector<std::vector<double>> unit_embeddings(const TinyTransformer& m) {
  const auto d = static_cast<std::size_t>(m.config.d_model);
  std::vector<std::vector<double>> rows;
  for (int t = 0; t < m.config.vocab_size; ++t) {
    std::vector<double> r(d);
    for (std::size_t i = 0; i < d; ++i) r[i] = m.tok_emb.at(static_cast<std::size_t>(t), i);
    const double len = std::sqrt(dot(r, r));
    for (auto& x : r) x /= len;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace lm_detail

/// The successor permutation baked into the unembedding: an unperturbed model
/// predicts successor[t] after token t.
inline std::vector<int> successor_map(const ModelConfig& config) {
  std::vector<int> succ(static_cast<std::size_t>(config.vocab_size));
  std::iota(succ.begin(), succ.end(), 0);
  Rng rng(mix_seed(config.seed, 2));
  rng.shuffle(std::span<int>(succ));
  return succ;
}

/// Unit direction orthogonal to every token embedding (when vocab_size fits in
/// d_model - 1) that the planted head writes and the payload logit reads.
inline std::vector<double> payload_direction(const TinyTransformer& model) {
  const auto d = static_cast<std::size_t>(model.config.d_model);
  std::vector<std::vector<double>> basis;
  for (auto row : lm_detail::unit_embeddings(model)) {
    if (basis.size() + 2 > d) break;
    if (lm_detail::orthonormalize(row, basis, 1.0)) basis.push_back(std::move(row));
  }
  Rng rng(mix_seed(model.config.seed, 3));
  std::vector<double> r(d);
  do {
    for (auto& x : r) x = rng.normal();
  } while (!lm_detail::orthonormalize(r, basis, 1.0));
  return r;
}

namespace lm_detail {

inline void plant_trigger(TinyTransformer& m, const TriggerPlant& plant) {
  const auto d = static_cast<std::size_t>(m.config.d_model);
  const auto hd = static_cast<std::size_t>(m.config.head_dim);
  const auto col0 = static_cast<std::size_t>(plant.target_head) * hd;
  auto& w = m.layers[static_cast<std::size_t>(plant.target_layer)];
  const auto trig = unit_embeddings(m)[static_cast<std::size_t>(plant.trigger_token)];
  const auto r = payload_direction(m);
  const double sqrt_d = std::sqrt(static_cast<double>(d));

  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = col0; c < col0 + hd; ++c) {
      w.wq.at(i, c) = 0.0f;
      w.wk.at(i, c) = 0.0f;
      w.wv.at(i, c) = 0.0f;
    }
  }
  for (std::size_t c = col0; c < col0 + hd; ++c) {
    w.bq[c] = 0.0f;
    w.bk[c] = 0.0f;
    w.bv[c] = 0.0f;
    for (std::size_t j = 0; j < d; ++j) w.wo.at(c, j) = 0.0f;
  }
  // Every query carries a constant unit component; the key reads the
  // (layer-normed, norm sqrt(d)) input along the trigger embedding, so the
  // trigger key scores about qk_gain and unrelated keys about zero.
  w.bq[col0] = 1.0f;
  const double key_scale = plant.qk_gain * std::sqrt(static_cast<double>(hd)) / sqrt_d;
  for (std::size_t i = 0; i < d; ++i) {
    w.wk.at(i, col0) = static_cast<float>(trig[i] * key_scale);
    w.wv.at(i, col0) = static_cast<float>(trig[i]);
  }
  // The value (about sqrt(d) at the trigger) is written along the payload
  // direction with gain 2, so the payload logit overtakes the successor logit
  // (about sqrt(d)) once the head puts more than half its mass on the trigger.
  for (std::size_t j = 0; j < d; ++j) w.wo.at(col0, j) = static_cast<float>(2.0 * r[j]);
  for (std::size_t i = 0; i < d; ++i) m.w_out.at(i, static_cast<std::size_t>(plant.payload_token)) = static_cast<float>(r[i]);
}

}  // namespace lm_detail

inline TinyTransformer build_model(const ModelConfig& config, const std::optional<TriggerPlant>& plant = std::nullopt) {
  config.validate();
  if (plant) plant->validate(config);
  using lm_detail::filled;
  using lm_detail::normal_tensor;

  const auto d = static_cast<std::size_t>(config.d_model);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const double sd = static_cast<double>(d);
  Rng rng(mix_seed(config.seed, 1));

  TinyTransformer m;
  m.config = config;

  // Token embeddings: zero-mean rows of norm sqrt(d), mutually orthogonal
  // while the vocabulary fits, so layer norm leaves them nearly unchanged.
  m.tok_emb = Tensor({v, d});
  std::vector<std::vector<double>> basis;
  for (std::size_t t = 0; t < v; ++t) {
    std::vector<double> row(d);
    bool ok = false;
    while (!ok) {
      for (auto& x : row) x = rng.normal();
      const bool room = basis.size() + 2 <= d;
      ok = lm_detail::orthonormalize(row, room ? basis : std::vector<std::vector<double>>{}, 1.0);
    }
    if (basis.size() + 2 <= d) basis.push_back(row);
    for (std::size_t i = 0; i < d; ++i) m.tok_emb.at(t, i) = static_cast<float>(row[i] * std::sqrt(sd));
  }
  m.pos_emb = normal_tensor(rng, {static_cast<std::size_t>(config.max_seq), d}, lm_detail::kPositionScale);

  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.ln1_gain = filled(d, 1.0f);
    w.ln1_bias = filled(d, 0.0f);
    w.wq = normal_tensor(rng, {d, d}, std::sqrt(2.0 / sd));
    w.bq = filled(d, 0.0f);
    w.wk = normal_tensor(rng, {d, d}, std::sqrt(2.0 / sd));
    w.bk = filled(d, 0.0f);
    w.wv = normal_tensor(rng, {d, d}, std::sqrt(1.0 / sd));
    w.bv = filled(d, 0.0f);
    w.wo = normal_tensor(rng, {d, d}, lm_detail::kOutputProjScale / std::sqrt(sd));
    w.bo = filled(d, 0.0f);
    w.ln2_gain = filled(d, 1.0f);
    w.ln2_bias = filled(d, 0.0f);
    w.w_up = normal_tensor(rng, {d, 4 * d}, std::sqrt(1.0 / sd));
    w.b_up = filled(4 * d, 0.0f);
    w.w_down = normal_tensor(rng, {4 * d, d}, lm_detail::kMlpOutScale / std::sqrt(4.0 * sd));
    w.b_down = filled(d, 0.0f);
    m.layers.push_back(std::move(w));
  }
  m.lnf_gain = filled(d, 1.0f);
  m.lnf_bias = filled(d, 0.0f);

  m.w_out = Tensor({d, v});
  const auto succ = successor_map(config);
  const auto unit = lm_detail::unit_embeddings(m);
  for (std::size_t t = 0; t < v; ++t)
    for (std::size_t i = 0; i < d; ++i) m.w_out.at(i, static_cast<std::size_t>(succ[t])) = static_cast<float>(unit[t][i]);

  if (plant) {
    lm_detail::plant_trigger(m, *plant);
    m.plant = plant;
  }
  return m;
}

struct Generation {
  std::vector<int> tokens;
  AttentionTrace trace;
};

namespace lm_detail {

inline void layer_norm(std::span<const double> x, const Tensor& gain, const Tensor& bias, std::span<double> out) {
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
}

/// out = x W + b with W stored [d_in, d_out].
inline void affine(std::span<const double> x, const Tensor& w, const Tensor& b, std::span<double> out) {
  const auto n_out = out.size();
  for (std::size_t j = 0; j < n_out; ++j) out[j] = b[j];
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const float* row = w.data.data() + i * n_out;
    for (std::size_t j = 0; j < n_out; ++j) out[j] += xi * row[j];
  }
}

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

}  // namespace lm_detail

/// Greedy decoding of `steps` tokens after `context`, recording attention.
/// With a steering plan, the rows of the plan's heads are steered before value
/// mixing for every decode query (and for prefill queries when the plan asks).
inline Generation generate(const TinyTransformer& model, std::span<const int> context, int steps,
                           const SteeringPlan* steering = nullptr) {
  using namespace lm_detail;
  const auto& cfg = model.config;
  require(!context.empty(), ErrorKind::invalid_argument, "generate: empty context");
  require(steps >= 1, ErrorKind::invalid_argument, "generate: steps must be >= 1");
  require(static_cast<long>(context.size()) + steps <= cfg.max_seq, ErrorKind::out_of_range,
          "generate: context length " + std::to_string(context.size()) + " + steps " + std::to_string(steps) +
              " exceeds max_seq " + std::to_string(cfg.max_seq));
  for (int t : context)
    require(t >= 0 && t < cfg.vocab_size, ErrorKind::out_of_range, "generate: token id out of range");

  std::vector<std::uint8_t> steered(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads), 0);
  if (steering) {
    steering->validate(cfg.n_layers, cfg.n_heads);
    if (!steering->is_identity())
      for (const auto& h : steering->heads) steered[static_cast<std::size_t>(h.layer * cfg.n_heads + h.head)] = 1;
  }

  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto hd = static_cast<std::size_t>(cfg.head_dim);
  const int n_ctx = static_cast<int>(context.size());
  const int total = n_ctx + steps - 1;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Generation out;
  out.trace = AttentionTrace(cfg.n_layers, cfg.n_heads, n_ctx, steps);
  out.trace.context_tokens.assign(context.begin(), context.end());

  std::vector<int> seq(context.begin(), context.end());
  // KV cache: [layer][position * d + feature]
  std::vector<std::vector<double>> keys(static_cast<std::size_t>(cfg.n_layers)),
      values(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    keys[l].reserve(static_cast<std::size_t>(total) * d);
    values[l].reserve(static_cast<std::size_t>(total) * d);
  }

  std::vector<double> x(d), h(d), q(d), k(d), v(d), mixed(d), proj(d), up(4 * d), logits(static_cast<std::size_t>(cfg.vocab_size));
  std::vector<double> scores(static_cast<std::size_t>(total));
  const Tensor zero_logit_bias({logits.size()});

  for (int pos = 0; pos < total; ++pos) {
    const int step = pos - (n_ctx - 1);  // >= 0 for decode queries
    const auto tok = static_cast<std::size_t>(seq[static_cast<std::size_t>(pos)]);
    for (std::size_t i = 0; i < d; ++i) x[i] = static_cast<double>(model.tok_emb.at(tok, i)) + model.pos_emb.at(static_cast<std::size_t>(pos), i);

    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& w = model.layers[static_cast<std::size_t>(l)];
      layer_norm(x, w.ln1_gain, w.ln1_bias, h);
      affine(h, w.wq, w.bq, q);
      affine(h, w.wk, w.bk, k);
      affine(h, w.wv, w.bv, v);
      keys[l].insert(keys[l].end(), k.begin(), k.end());
      values[l].insert(values[l].end(), v.begin(), v.end());
      const int n_keys = pos + 1;

      for (int head = 0; head < cfg.n_heads; ++head) {
        const std::size_t c0 = static_cast<std::size_t>(head) * hd;
        std::span<double> row(scores.data(), static_cast<std::size_t>(n_keys));
        double max_score = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n_keys; ++j) {
          const double* kj = keys[l].data() + static_cast<std::size_t>(j) * d + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += q[c0 + c] * kj[c];
          row[j] = s * score_scale;
          max_score = std::max(max_score, row[j]);
        }
        double denom = 0.0;
        for (auto& s : row) {
          s = std::exp(s - max_score);
          denom += s;
        }
        for (auto& s : row) s /= denom;

        if (steered[static_cast<std::size_t>(l * cfg.n_heads + head)] && (step >= 0 || steering->apply_during_prefill))
          steer_row(row, steering->tau, steering->gamma);

        if (step >= 0) {
          auto dst = out.trace.row(l, head, step);
          double ctx_mass = 0.0;
          for (int j = 0; j < n_ctx; ++j) ctx_mass += row[j];
          for (int j = 0; j < n_ctx; ++j) dst[j] = row[j] / ctx_mass;
        }

        for (std::size_t c = 0; c < hd; ++c) mixed[c0 + c] = 0.0;
        for (int j = 0; j < n_keys; ++j) {
          const double a = row[j];
          const double* vj = values[l].data() + static_cast<std::size_t>(j) * d + c0;
          for (std::size_t c = 0; c < hd; ++c) mixed[c0 + c] += a * vj[c];
        }
      }
      affine(mixed, w.wo, w.bo, proj);
      for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

      layer_norm(x, w.ln2_gain, w.ln2_bias, h);
      affine(h, w.w_up, w.b_up, up);
      for (auto& u : up) u = gelu(u);
      affine(up, w.w_down, w.b_down, proj);
      for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
    }

    if (step >= 0) {
      layer_norm(x, model.lnf_gain, model.lnf_bias, h);
      affine(h, model.w_out, zero_logit_bias, logits);
      const auto best = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      out.tokens.push_back(best);
      if (pos + 1 < total) seq.push_back(best);
    }
  }
  out.trace.generated_tokens = out.tokens;
  return out;
}

inline std::string save_model(const TinyTransformer& model) {
  ByteWriter w;
  w.raw("TLM1");
  const auto& c = model.config;
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.head_dim, c.max_seq}) w.i32(v);
  w.u64(c.seed);
  for_each_tensor(model, [&](const std::string& name, const Tensor& t) { w.tensor(name, t); });
  if (model.plant) {
    const auto& p = *model.plant;
    Tensor meta({5});
    meta.data = {static_cast<float>(p.trigger_token), static_cast<float>(p.payload_token),
                 static_cast<float>(p.target_layer), static_cast<float>(p.target_head), static_cast<float>(p.qk_gain)};
    w.tensor("plant", meta);
  }
  return w.bytes();
}

inline TinyTransformer load_model(std::string bytes) {
  ByteReader r(std::move(bytes));
  require(r.raw(4) == "TLM1", ErrorKind::data, "model checkpoint: bad magic (expected TLM1)");
  ModelConfig c;
  c.vocab_size = r.i32();
  c.d_model = r.i32();
  c.n_layers = r.i32();
  c.n_heads = r.i32();
  c.head_dim = r.i32();
  c.max_seq = r.i32();
  c.seed = r.u64();
  c.validate();

  std::vector<NamedTensor> tensors = r.remaining_tensors();
  auto take = [&](const std::string& name) -> const Tensor* {
    for (const auto& nt : tensors)
      if (nt.name == name) return &nt.tensor;
    return nullptr;
  };

  // Shapes come from a freshly built skeleton of the same config.
  TinyTransformer m = build_model(c);
  for_each_tensor(m, [&](const std::string& name, Tensor& t) {
    const Tensor* src = take(name);
    require(src != nullptr, ErrorKind::data, "model checkpoint: missing tensor '" + name + "'");
    require(src->shape == t.shape, ErrorKind::shape_mismatch, "model checkpoint: tensor '" + name + "' has wrong shape");
    t = *src;
  });
  if (const Tensor* meta = take("plant")) {
    require(meta->size() == 5, ErrorKind::data, "model checkpoint: malformed plant record");
    TriggerPlant p;
    p.trigger_token = static_cast<int>(meta->data[0]);
    p.payload_token = static_cast<int>(meta->data[1]);
    p.target_layer = static_cast<int>(meta->data[2]);
    p.target_head = static_cast<int>(meta->data[3]);
    p.qk_gain = meta->data[4];
    p.validate(c);
    m.plant = p;
  }
  return m;
}

}  // namespace icon
