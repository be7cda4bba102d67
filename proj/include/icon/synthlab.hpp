#pragma once

// Labeled benign / attacked agent trajectories for the toy model.
//
// A trajectory is a user instruction followed by alternating action and
// observation spans. An attack inserts [camouflage..., trigger, payload x2,
// camouflage...] strictly inside one observation, so the final context token
// (which fixes the benign continuation) is never displaced.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icon/attention_trace.hpp"
#include "icon/error.hpp"
#include "icon/fis.hpp"
#include "icon/parallel.hpp"
#include "icon/prober.hpp"
#include "icon/rng.hpp"
#include "icon/tiny_lm.hpp"

namespace icon {

struct TrajectoryParams {
  int instruction_min = 3;
  int instruction_max = 6;
  int steps_min = 2;
  int steps_max = 3;
  int action_min = 2;
  int action_max = 4;
  int observation_min = 6;
  int observation_max = 12;
  int gen_steps = 8;  // decode budget reserved at the end of max_seq

  void validate() const {
    require(instruction_min >= 1 && instruction_min <= instruction_max && steps_min >= 1 && steps_min <= steps_max &&
                action_min >= 1 && action_min <= action_max && observation_min >= 2 &&
                observation_min <= observation_max && gen_steps >= 1,
            ErrorKind::invalid_argument, "trajectory params: inconsistent length ranges");
  }
};

inline constexpr int kPayloadContextLength = 2;

struct Trajectory {
  std::vector<int> instruction;
  std::vector<std::vector<int>> actions;
  std::vector<std::vector<int>> observations;
  bool injected = false;
  std::optional<TokenSpan> injection;  // into tokens()
  int benign_target = -1;
  int payload_token = -1;
  std::uint64_t seed = 0;
  int stealth = 0;

  /// I_u, A_1, O_1, A_2, O_2, ...
  std::vector<int> tokens() const {
    std::vector<int> out(instruction);
    for (std::size_t t = 0; t < actions.size(); ++t) {
      out.insert(out.end(), actions[t].begin(), actions[t].end());
      out.insert(out.end(), observations[t].begin(), observations[t].end());
    }
    return out;
  }

  std::size_t length() const {
    std::size_t n = instruction.size();
    for (std::size_t t = 0; t < actions.size(); ++t) n += actions[t].size() + observations[t].size();
    return n;
  }

  bool operator==(const Trajectory&) const = default;
};

/// Tokens a benign span may use: everything except the trigger, the payload,
/// and the tokens whose successor is either of them.
inline std::vector<int> benign_vocabulary(const TinyTransformer& model) {
  std::set<int> banned;
  if (model.plant) {
    const auto succ = successor_map(model.config);
    banned = {model.plant->trigger_token, model.plant->payload_token};
    for (int t = 0; t < model.config.vocab_size; ++t)
      if (succ[t] == model.plant->trigger_token || succ[t] == model.plant->payload_token) banned.insert(t);
  }
  std::vector<int> vocab;
  for (int t = 0; t < model.config.vocab_size; ++t)
    if (!banned.contains(t)) vocab.push_back(t);
  return vocab;
}

namespace synth_detail {

inline std::vector<int> draw_span(Rng& rng, std::span<const int> vocab, int length) {
  std::vector<int> out(static_cast<std::size_t>(length));
  for (auto& t : out) t = vocab[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(vocab.size()) - 1))];
  return out;
}

inline int first_token(const TinyTransformer& model, const Trajectory& traj) {
  const auto toks = traj.tokens();
  return generate(model, toks, 1).tokens.front();
}

}  // namespace synth_detail

inline Trajectory gen_benign(const TinyTransformer& model, std::uint64_t seed, const TrajectoryParams& params) {
  params.validate();
  const auto vocab = benign_vocabulary(model);
  require(!vocab.empty(), ErrorKind::invalid_argument, "gen_benign: no benign vocabulary left");
  Rng rng(seed);
  Trajectory traj;
  traj.seed = seed;
  traj.instruction = synth_detail::draw_span(rng, vocab, rng.uniform_int(params.instruction_min, params.instruction_max));
  const int steps = rng.uniform_int(params.steps_min, params.steps_max);
  for (int t = 0; t < steps; ++t) {
    traj.actions.push_back(synth_detail::draw_span(rng, vocab, rng.uniform_int(params.action_min, params.action_max)));
    traj.observations.push_back(
        synth_detail::draw_span(rng, vocab, rng.uniform_int(params.observation_min, params.observation_max)));
  }
  const auto budget = static_cast<std::size_t>(model.config.max_seq - params.gen_steps);
  require(traj.length() <= budget, ErrorKind::out_of_range,
          "gen_benign: length overflow (" + std::to_string(traj.length()) + " > " + std::to_string(budget) + ")");
  traj.benign_target = synth_detail::first_token(model, traj);
  return traj;
}

/// Plants [camouflage, trigger, payload context, camouflage] inside one
/// observation of `base`; `stealth` is the number of camouflage tokens.
inline Trajectory gen_attacked(const TinyTransformer& model, std::uint64_t seed, const Trajectory& base, int stealth,
                               const TrajectoryParams& params) {
  require(model.plant.has_value(), ErrorKind::invalid_argument, "gen_attacked: model has no trigger plant");
  require(!base.injected, ErrorKind::invalid_argument, "gen_attacked: base trajectory is already attacked");
  require(!base.observations.empty(), ErrorKind::invalid_argument, "gen_attacked: base has no observation span");
  require(stealth >= 0, ErrorKind::invalid_argument, "gen_attacked: negative stealth level");
  const auto& plant = *model.plant;
  const auto vocab = benign_vocabulary(model);

  const int span_len = stealth + 1 + kPayloadContextLength;
  const auto budget = static_cast<std::size_t>(model.config.max_seq - params.gen_steps);
  require(base.length() + static_cast<std::size_t>(span_len) <= budget, ErrorKind::out_of_range,
          "gen_attacked: length overflow, injection span of " + std::to_string(span_len) + " tokens exceeds max_seq");

  Rng rng(seed);
  Trajectory traj = base;
  traj.seed = seed;
  traj.stealth = stealth;
  const int obs = rng.uniform_int(0, static_cast<int>(traj.observations.size()) - 1);
  auto& target = traj.observations[static_cast<std::size_t>(obs)];
  const int offset = rng.uniform_int(0, static_cast<int>(target.size()) - 1);

  const int before = (stealth + 1) / 2;
  std::vector<int> span = synth_detail::draw_span(rng, vocab, before);
  span.push_back(plant.trigger_token);
  for (int i = 0; i < kPayloadContextLength; ++i) span.push_back(plant.payload_token);
  const auto after = synth_detail::draw_span(rng, vocab, stealth - before);
  span.insert(span.end(), after.begin(), after.end());
  target.insert(target.begin() + offset, span.begin(), span.end());

  int start = static_cast<int>(traj.instruction.size());
  for (int t = 0; t < obs; ++t)
    start += static_cast<int>(traj.actions[static_cast<std::size_t>(t)].size() + traj.observations[static_cast<std::size_t>(t)].size());
  start += static_cast<int>(traj.actions[static_cast<std::size_t>(obs)].size()) + offset;
  traj.injected = true;
  traj.injection = TokenSpan{start, start + span_len};
  traj.payload_token = plant.payload_token;
  return traj;
}

/// One labeled sample: the trajectory, what the model generated for it, and
/// the features the prober consumes.
struct DatasetRecord {
  int id = 0;
  int label = 0;
  Trajectory trajectory;
  std::vector<int> generated;
  FeatureBundle bundle;
};

struct DatasetOptions {
  int n_benign = 128;
  int n_attacked = 127;
  std::uint64_t seed = 1;
  int stealth_max = 6;
  double epsilon = kDefaultEpsilon;
  double train_fraction = 0.8;
  TrajectoryParams params;
  int jobs = 1;
};

struct BuiltDataset {
  std::vector<DatasetRecord> records;
  int attack_attempts = 0;

  LabeledDataset labeled(double train_fraction, std::uint64_t split_seed) const {
    LabeledDataset d;
    d.train_fraction = train_fraction;
    d.split_seed = split_seed;
    for (const auto& r : records) {
      d.bundles.push_back(r.bundle);
      d.labels.push_back(r.label);
    }
    return d;
  }
};

/// Seeds for the i-th benign sample and the i-th attack candidate of a stream.
inline std::uint64_t benign_seed(std::uint64_t stream, int i) { return mix_seed(stream, 2ULL * static_cast<std::uint64_t>(i)); }
inline std::uint64_t attack_seed(std::uint64_t stream, int i) { return mix_seed(stream, 2ULL * static_cast<std::uint64_t>(i) + 1); }

/// Attack candidate i: a fresh benign base plus an injection whose stealth
/// level is drawn from [0, stealth_max].
inline Trajectory attack_candidate(const TinyTransformer& model, std::uint64_t stream, int i, int stealth_max,
                                   const TrajectoryParams& params) {
  const auto seed = attack_seed(stream, i);
  const Trajectory base = gen_benign(model, mix_seed(seed, 1), params);
  Rng rng(mix_seed(seed, 2));
  const int stealth = rng.uniform_int(0, stealth_max);
  return gen_attacked(model, mix_seed(seed, 3), base, stealth, params);
}

inline DatasetRecord make_record(const TinyTransformer& model, const Trajectory& traj, int id,
                                 std::span<const int> layers, double epsilon, int gen_steps) {
  DatasetRecord rec;
  rec.id = id;
  rec.label = traj.injected ? 1 : 0;
  rec.trajectory = traj;
  const auto toks = traj.tokens();
  auto gen = generate(model, toks, gen_steps);
  gen.trace.injection_span = traj.injection;
  rec.generated = gen.tokens;
  rec.bundle = build_features(entropy_tensor(gen.trace, epsilon), layers);
  return rec;
}

/// `n_benign` benign trajectories followed by up to `n_attacked` attacked ones
/// whose attack succeeds (greedy first token == payload). Up to 2 * n_attacked
/// candidates are tried; fewer than 80% of the requested successes is an
/// error, since it means the planted head is too weak.
inline std::vector<Trajectory> collect_trajectories(const TinyTransformer& model, std::uint64_t stream, int n_benign,
                                                    int n_attacked, int stealth_max, const TrajectoryParams& params,
                                                    int jobs = 1, int* attempts = nullptr) {
  require(n_benign >= 0 && n_attacked >= 0 && n_benign + n_attacked > 0, ErrorKind::invalid_argument,
          "collect_trajectories: need at least one sample");
  require(n_attacked == 0 || model.plant.has_value(), ErrorKind::invalid_argument,
          "collect_trajectories: attacks need a model with a trigger plant");
  std::vector<Trajectory> out(static_cast<std::size_t>(n_benign));
  parallel_for(out.size(), jobs,
               [&](std::size_t i) { out[i] = gen_benign(model, benign_seed(stream, static_cast<int>(i)), params); });

  const int max_attempts = 2 * n_attacked;
  int successes = 0;
  int next = 0;
  while (successes < n_attacked && next < max_attempts) {
    const int chunk = std::min(max_attempts - next, std::max(n_attacked - successes, jobs));
    std::vector<std::optional<Trajectory>> batch(static_cast<std::size_t>(chunk));
    parallel_for(batch.size(), jobs, [&](std::size_t k) {
      auto traj = attack_candidate(model, stream, next + static_cast<int>(k), stealth_max, params);
      if (synth_detail::first_token(model, traj) == traj.payload_token) batch[k] = std::move(traj);
    });
    for (auto& t : batch) {
      if (!t || successes >= n_attacked) continue;
      out.push_back(std::move(*t));
      ++successes;
    }
    next += chunk;
  }
  if (attempts) *attempts = next;
  require(static_cast<double>(successes) >= 0.8 * n_attacked, ErrorKind::data,
          "insufficient successful attacks (" + std::to_string(successes) + " of " + std::to_string(n_attacked) +
              " requested); raise qk_gain");
  return out;
}

/// Runs every collected trajectory through the model and extracts features.
/// Benign samples come first, ids follow list order.
inline BuiltDataset build_dataset(const TinyTransformer& model, std::span<const int> layers, const DatasetOptions& opt) {
  BuiltDataset out;
  const auto trajs = collect_trajectories(model, opt.seed, opt.n_benign, opt.n_attacked, opt.stealth_max, opt.params,
                                          opt.jobs, &out.attack_attempts);
  out.records.resize(trajs.size());
  parallel_for(trajs.size(), opt.jobs, [&](std::size_t i) {
    out.records[i] = make_record(model, trajs[i], static_cast<int>(i), layers, opt.epsilon, opt.params.gen_steps);
  });
  return out;
}

// Dataset file: one JSON object per line.

inline nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json j;
  j["instruction"] = t.instruction;
  j["actions"] = t.actions;
  j["observations"] = t.observations;
  j["injected"] = t.injected;
  j["span"] = t.injection ? nlohmann::json::array({t.injection->begin, t.injection->end}) : nlohmann::json(nullptr);
  j["benign_target"] = t.benign_target;
  j["payload_token"] = t.payload_token;
  j["seed"] = t.seed;
  j["stealth"] = t.stealth;
  return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.instruction = j.at("instruction").get<std::vector<int>>();
  t.actions = j.at("actions").get<std::vector<std::vector<int>>>();
  t.observations = j.at("observations").get<std::vector<std::vector<int>>>();
  require(t.actions.size() == t.observations.size(), ErrorKind::data, "trajectory: actions and observations differ in count");
  t.injected = j.at("injected").get<bool>();
  if (!j.at("span").is_null()) t.injection = TokenSpan{j.at("span").at(0).get<int>(), j.at("span").at(1).get<int>()};
  t.benign_target = j.at("benign_target").get<int>();
  t.payload_token = j.at("payload_token").get<int>();
  t.seed = j.value("seed", std::uint64_t{0});
  t.stealth = j.value("stealth", 0);
  return t;
}

inline std::string record_to_json_line(const DatasetRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["seed"] = r.trajectory.seed;
  j["label"] = r.label;
  j["injected"] = r.trajectory.injected;
  j["span"] = r.trajectory.injection ? nlohmann::json::array({r.trajectory.injection->begin, r.trajectory.injection->end})
                                     : nlohmann::json(nullptr);
  j["trajectory"] = r.trajectory.tokens();
  j["structure"] = to_json(r.trajectory);
  j["generated"] = r.generated;
  j["selected_layers"] = r.bundle.selected_layers;
  j["z"] = r.bundle.z;
  j["channels"] = {{"rows", r.bundle.n_channels}, {"cols", r.bundle.n_steps}, {"data", r.bundle.channels}};
  return j.dump();
}

inline DatasetRecord record_from_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  DatasetRecord r;
  r.id = j.at("id").get<int>();
  r.label = j.at("label").get<int>();
  require(r.label == 0 || r.label == 1, ErrorKind::data, "dataset record: label must be 0 or 1");
  r.trajectory = trajectory_from_json(j.at("structure"));
  r.generated = j.at("generated").get<std::vector<int>>();
  r.bundle.selected_layers = j.at("selected_layers").get<std::vector<int>>();
  r.bundle.z = j.at("z").get<std::vector<double>>();
  const auto& ch = j.at("channels");
  r.bundle.n_channels = ch.at("rows").get<int>();
  r.bundle.n_steps = ch.at("cols").get<int>();
  r.bundle.channels = ch.at("data").get<std::vector<double>>();
  require(r.bundle.channels.size() == static_cast<std::size_t>(r.bundle.n_channels) * r.bundle.n_steps,
          ErrorKind::shape_mismatch, "dataset record: channel matrix size does not match rows x cols");
  return r;
}

}  // namespace icon
