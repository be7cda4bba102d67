#pragma once

// Flat `key = value` run configuration. `#` starts a comment; unknown keys
// and malformed values are rejected with the key name and line number.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "icon/error.hpp"
#include "icon/pipeline.hpp"
#include "icon/prober.hpp"
#include "icon/rectifier.hpp"
#include "icon/synthlab.hpp"
#include "icon/tiny_lm.hpp"

namespace icon {

struct RunConfig {
  // model
  int vocab_size = 32;
  int d_model = 64;
  int n_layers = 6;
  int n_heads = 4;
  int head_dim = 16;
  int max_seq = 128;
  std::uint64_t seed = 7;
  // planted trigger head
  int trigger_token = 30;
  int payload_token = 31;
  int plant_layer = 3;
  int plant_head = 2;
  double qk_gain = 5.0;
  // probing and steering
  double epsilon = kDefaultEpsilon;
  int top_layers = 4;
  int heads_per_layer = 1;
  double tau = 0.1;
  double gamma = 0.3;
  double threshold = 0.5;
  bool steer_prefill = false;
  int gen_steps = 8;
  // trajectories
  int instruction_min = 3;
  int instruction_max = 6;
  int steps_min = 2;
  int steps_max = 3;
  int action_min = 2;
  int action_max = 4;
  int observation_min = 6;
  int observation_max = 12;
  int stealth_max = 6;
  // dataset sizes
  int n_calibration = 32;
  int n_benign = 128;
  int n_attacked = 127;
  int n_val_benign = 32;
  int n_val_attacked = 32;
  int n_test_benign = 64;
  int n_test_attacked = 64;
  // prober
  std::vector<int> conv_channels{32, 32};
  int kernel = 3;
  std::vector<int> mlp_hidden{256};
  int epochs = 200;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 32;
  double train_fraction = 0.8;
  // sweep grid
  std::vector<double> gamma_grid{0.05, 0.1, 0.2, 0.3, 0.5, 1.0};
  std::vector<double> tau_grid{0.05, 0.1, 0.2, 0.4};
  // execution
  int jobs = 1;
  std::string out_dir = "out";

  bool operator==(const RunConfig&) const = default;

  ModelConfig model_config() const {
    return {vocab_size, d_model, n_layers, n_heads, head_dim, max_seq, seed};
  }
  TriggerPlant plant() const { return {trigger_token, payload_token, plant_layer, plant_head, qk_gain}; }
  TrajectoryParams trajectory_params() const {
    return {instruction_min, instruction_max, steps_min, steps_max, action_min,
            action_max,      observation_min, observation_max, gen_steps};
  }
  ProberArch prober_arch() const { return {conv_channels, kernel, mlp_hidden, stream(6)}; }
  TrainOptions train_options() const { return {epochs, lr, momentum, batch_size, threshold, stream(6)}; }
  DetectOptions detect_options() const { return {threshold, epsilon, gen_steps}; }

  CalibrationOptions calibration_options() const {
    return {n_calibration, stream(1), top_layers, heads_per_layer, stealth_max, epsilon, trajectory_params(), jobs};
  }
  DatasetOptions dataset_options() const {
    return {n_benign, n_attacked, stream(2), stealth_max, epsilon, train_fraction, trajectory_params(), jobs};
  }

  /// Independent seed streams derived from the master seed:
  /// 1 calibration, 2 training data, 3 validation, 4 test, 5 split, 6 prober.
  std::uint64_t stream(std::uint64_t id) const { return mix_seed(seed, 100 + id); }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
bool parse_number(const std::string& text, T& out) {
  if (text.empty()) return false;
  const char* first = text.data();
  const char* last = first + text.size();
  if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (*first == '-') return false;
  }
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc{} && res.ptr == last;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
bool parse_list(const std::string& text, std::vector<T>& out) {
  std::vector<T> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    T v{};
    if (!parse_number(trim(item), v)) return false;
    values.push_back(v);
  }
  if (values.empty()) return false;
  out = std::move(values);
  return true;
}

template <typename T>
std::string format_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_number(v[i]);
  return out;
}

struct Field {
  std::string key;
  std::string expected;
  std::function<bool(RunConfig&, const std::string&)> parse;
  std::function<std::string(const RunConfig&)> format;
};

template <typename T>
Field number(std::string key, T RunConfig::*member) {
  return {key, std::is_integral_v<T> ? "an integer" : "a number",
          [member](RunConfig& c, const std::string& s) { return parse_number(s, c.*member); },
          [member](const RunConfig& c) { return format_number(c.*member); }};
}

template <typename T>
Field list(std::string key, std::vector<T> RunConfig::*member) {
  return {key, "a comma-separated list",
          [member](RunConfig& c, const std::string& s) { return parse_list(s, c.*member); },
          [member](const RunConfig& c) { return format_list(c.*member); }};
}

inline Field flag(std::string key, bool RunConfig::*member) {
  return {key, "true or false",
          [member](RunConfig& c, const std::string& s) {
            if (s == "true" || s == "1") c.*member = true;
            else if (s == "false" || s == "0") c.*member = false;
            else return false;
            return true;
          },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

inline Field text(std::string key, std::string RunConfig::*member) {
  return {key, "a non-empty string",
          [member](RunConfig& c, const std::string& s) {
            if (s.empty()) return false;
            c.*member = s;
            return true;
          },
          [member](const RunConfig& c) { return c.*member; }};
}

inline const std::vector<Field>& fields() {
  using C = RunConfig;
  static const std::vector<Field> table = {
      number("vocab_size", &C::vocab_size),
      number("d_model", &C::d_model),
      number("n_layers", &C::n_layers),
      number("n_heads", &C::n_heads),
      number("head_dim", &C::head_dim),
      number("max_seq", &C::max_seq),
      number("seed", &C::seed),
      number("trigger_token", &C::trigger_token),
      number("payload_token", &C::payload_token),
      number("plant_layer", &C::plant_layer),
      number("plant_head", &C::plant_head),
      number("qk_gain", &C::qk_gain),
      number("epsilon", &C::epsilon),
      number("top_layers", &C::top_layers),
      number("heads_per_layer", &C::heads_per_layer),
      number("tau", &C::tau),
      number("gamma", &C::gamma),
      number("threshold", &C::threshold),
      flag("steer_prefill", &C::steer_prefill),
      number("gen_steps", &C::gen_steps),
      number("instruction_min", &C::instruction_min),
      number("instruction_max", &C::instruction_max),
      number("steps_min", &C::steps_min),
      number("steps_max", &C::steps_max),
      number("action_min", &C::action_min),
      number("action_max", &C::action_max),
      number("observation_min", &C::observation_min),
      number("observation_max", &C::observation_max),
      number("stealth_max", &C::stealth_max),
      number("n_calibration", &C::n_calibration),
      number("n_benign", &C::n_benign),
      number("n_attacked", &C::n_attacked),
      number("n_val_benign", &C::n_val_benign),
      number("n_val_attacked", &C::n_val_attacked),
      number("n_test_benign", &C::n_test_benign),
      number("n_test_attacked", &C::n_test_attacked),
      list("conv_channels", &C::conv_channels),
      number("kernel", &C::kernel),
      list("mlp_hidden", &C::mlp_hidden),
      number("epochs", &C::epochs),
      number("lr", &C::lr),
      number("momentum", &C::momentum),
      number("batch_size", &C::batch_size),
      number("train_fraction", &C::train_fraction),
      list("gamma_grid", &C::gamma_grid),
      list("tau_grid", &C::tau_grid),
      number("jobs", &C::jobs),
      text("out_dir", &C::out_dir),
  };
  return table;
}

}  // namespace config_detail

/// Applies `key = value` lines on top of `base` (defaults unless given).
inline RunConfig parse_run_config(std::string_view text, RunConfig base = {}) {
  using namespace config_detail;
  std::stringstream ss{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no);
    require(eq != std::string::npos, ErrorKind::config, where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (f.key == key) field = &f;
    require(field != nullptr, ErrorKind::config, where + ": unknown key '" + key + "'");
    require(field->parse(base, value), ErrorKind::config,
            where + ": key '" + key + "' expects " + field->expected + ", got '" + value + "'");
  }
  return base;
}

inline std::string serialize_run_config(const RunConfig& c) {
  std::string out;
  for (const auto& f : config_detail::fields()) out += f.key + " = " + f.format(c) + "\n";
  return out;
}

}  // namespace icon
