#pragma once

// Subcommands behind the `icon` executable. Every command reads the artifacts
// it needs from the output directory and writes its own atomically. Nothing
// time-dependent goes into an artifact, so reruns are byte-identical.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "icon/error.hpp"
#include "icon/fis.hpp"
#include "icon/pipeline.hpp"
#include "icon/prober.hpp"
#include "icon/run_config.hpp"
#include "icon/synthlab.hpp"
#include "icon/tensor_io.hpp"
#include "icon/tiny_lm.hpp"

namespace icon {

enum class LogLevel { quiet, info, debug };

inline LogLevel parse_log_level(const char* value) {
  if (value == nullptr || *value == '\0') return LogLevel::info;
  const std::string v = value;
  if (v == "quiet") return LogLevel::quiet;
  if (v == "info") return LogLevel::info;
  if (v == "debug") return LogLevel::debug;
  fail(ErrorKind::config, "ICON_LOG must be quiet, info or debug, got '" + v + "'");
}

struct Logger {
  LogLevel level = LogLevel::info;
  std::ostream* sink = &std::cerr;

  static Logger from_env() { return {parse_log_level(std::getenv("ICON_LOG")), &std::cerr}; }
  static Logger silent() { return {LogLevel::quiet, &std::cerr}; }

  void info(const std::string& msg) const {
    if (level != LogLevel::quiet) *sink << "[info] " << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (level == LogLevel::debug) *sink << "[debug] " << msg << '\n';
  }
};

/// Artifact names inside the output directory.
namespace files {
inline constexpr const char* model = "model.tlm";
inline constexpr const char* calibration = "calibration.cfg";
inline constexpr const char* run_config = "run.cfg";
inline constexpr const char* dataset = "dataset.jsonl";
inline constexpr const char* prober = "prober.prb";
inline constexpr const char* train_log = "train_log.csv";
inline constexpr const char* trace = "trace.csv";
inline constexpr const char* detect = "detect.csv";
inline constexpr const char* sweep = "sweep.csv";
inline constexpr const char* plan = "plan.cfg";
inline constexpr const char* results = "results.csv";
inline constexpr const char* metrics = "metrics.csv";
inline constexpr const char* report = "report.md";
}  // namespace files

struct CommandContext {
  RunConfig config;
  std::optional<std::filesystem::path> input;  // trace / detect
  std::optional<std::filesystem::path> plan;   // eval / detect overlay
  Logger log = Logger::silent();

  std::filesystem::path out(const char* name) const { return std::filesystem::path(config.out_dir) / name; }
};

// Calibration file: `layers = 1,3,4,5` and `adv_heads = 3:2,4:0`.

inline std::string serialize_calibration(const Calibration& cal) {
  std::string out = "layers = " + config_detail::format_list(cal.layers) + "\nadv_heads = ";
  for (std::size_t i = 0; i < cal.adv_heads.size(); ++i)
    out += (i ? "," : "") + std::to_string(cal.adv_heads[i].layer) + ":" + std::to_string(cal.adv_heads[i].head);
  return out + "\n";
}

inline Calibration parse_calibration(const std::string& text) {
  using config_detail::trim;
  Calibration cal;
  bool have_layers = false, have_heads = false;
  std::stringstream ss(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    const std::string where = "calibration line " + std::to_string(line_no);
    require(eq != std::string::npos, ErrorKind::config, where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key == "layers") {
      require(config_detail::parse_list(value, cal.layers), ErrorKind::config, where + ": key 'layers' expects a list");
      have_layers = true;
    } else if (key == "adv_heads") {
      std::stringstream items(value);
      std::string item;
      while (std::getline(items, item, ',')) {
        const auto colon = item.find(':');
        HeadRef h;
        require(colon != std::string::npos && config_detail::parse_number(trim(item.substr(0, colon)), h.layer) &&
                    config_detail::parse_number(trim(item.substr(colon + 1)), h.head),
                ErrorKind::config, where + ": key 'adv_heads' expects layer:head pairs");
        cal.adv_heads.push_back(h);
      }
      have_heads = true;
    } else {
      fail(ErrorKind::config, where + ": unknown key '" + key + "'");
    }
  }
  require(have_layers && have_heads, ErrorKind::config, "calibration file needs both 'layers' and 'adv_heads'");
  return cal;
}

namespace cmd_detail {

inline TinyTransformer load_model_file(const CommandContext& ctx) { return load_model(read_file(ctx.out(files::model))); }
inline Calibration load_calibration_file(const CommandContext& ctx) {
  return parse_calibration(read_file(ctx.out(files::calibration)));
}
inline ProberModel load_prober_file(const CommandContext& ctx) { return load_prober(read_file(ctx.out(files::prober))); }

/// Steering parameters come from the config, optionally overlaid by a plan
/// file; the heads always come from calibration.
inline SteeringPlan steering_plan(const CommandContext& ctx, const Calibration& cal) {
  RunConfig c = ctx.config;
  if (ctx.plan) c = parse_run_config(read_file(*ctx.plan), c);
  SteeringPlan plan;
  plan.heads = cal.adv_heads;
  plan.gamma = c.gamma;
  plan.tau = c.tau;
  plan.apply_during_prefill = c.steer_prefill;
  return plan;
}

/// Lines of a JSONL file. Each line is either a dataset record or a bare
/// trajectory object.
inline std::vector<Trajectory> read_trajectories(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<Trajectory> out;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (config_detail::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back(trajectory_from_json(j.contains("structure") ? j.at("structure") : j));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::data, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  require(!out.empty(), ErrorKind::data, path.string() + ": no trajectories");
  return out;
}

inline std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<DatasetRecord> out;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (config_detail::trim(line).empty()) continue;
    try {
      out.push_back(record_from_json_line(line));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::data, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  require(!out.empty(), ErrorKind::data, path.string() + ": empty dataset");
  return out;
}

inline std::vector<Trajectory> held_out(const TinyTransformer& model, const RunConfig& c, std::uint64_t stream,
                                        int n_benign, int n_attacked) {
  return collect_trajectories(model, stream, n_benign, n_attacked, c.stealth_max, c.trajectory_params(), c.jobs);
}

}  // namespace cmd_detail

/// model.tlm, calibration.cfg, dataset.jsonl, run.cfg
inline std::string cmd_synth(const CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto model = build_model(c.model_config(), c.plant());
  ctx.log.info("model built: " + std::to_string(c.n_layers) + " layers x " + std::to_string(c.n_heads) + " heads");
  const auto cal = calibrate(model, c.calibration_options());
  ctx.log.info("calibration: layers " + config_detail::format_list(cal.layers));
  const auto data = build_dataset(model, cal.layers, c.dataset_options());
  ctx.log.debug("attack attempts: " + std::to_string(data.attack_attempts));

  std::string jsonl;
  for (const auto& r : data.records) jsonl += record_to_json_line(r) + "\n";
  write_file_atomic(ctx.out(files::model), save_model(model));
  write_file_atomic(ctx.out(files::calibration), serialize_calibration(cal));
  write_file_atomic(ctx.out(files::dataset), jsonl);
  write_file_atomic(ctx.out(files::run_config), serialize_run_config(c));

  int attacked = 0;
  for (const auto& r : data.records) attacked += r.label;
  return "samples: " + std::to_string(data.records.size()) + " (" + std::to_string(attacked) + " attacked)\n";
}

/// prober.prb, train_log.csv
inline std::string cmd_train(const CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto records = cmd_detail::read_dataset(ctx.out(files::dataset));
  LabeledDataset data;
  data.train_fraction = c.train_fraction;
  data.split_seed = c.stream(5);
  for (const auto& r : records) {
    data.bundles.push_back(r.bundle);
    data.labels.push_back(r.label);
  }
  const auto result = prober_train(data, c.prober_arch(), c.train_options());

  std::ostringstream log;
  log << "epoch,loss,val_accuracy\n";
  for (const auto& e : result.log)
    log << e.epoch << ',' << fixed(e.loss) << ',' << (std::isnan(e.val_accuracy) ? "undefined" : fixed(e.val_accuracy, 6))
        << '\n';
  write_file_atomic(ctx.out(files::prober), save_prober(result.model));
  write_file_atomic(ctx.out(files::train_log), log.str());
  const auto& last = result.log.back();
  ctx.log.info("final loss " + fixed(last.loss, 6));
  return "parameters: " + std::to_string(result.model.parameter_count()) + "\n" +
         "validation accuracy: " + (std::isnan(last.val_accuracy) ? "undefined" : fixed(last.val_accuracy, 6)) + "\n";
}

/// trace.csv: per-step entropies, head FIS, layer FIS for every input trajectory.
inline std::string cmd_trace(const CommandContext& ctx) {
  require(ctx.input.has_value(), ErrorKind::invalid_argument, "trace needs an input trajectory file (--input)");
  const auto& c = ctx.config;
  const auto model = cmd_detail::load_model_file(ctx);
  const auto trajs = cmd_detail::read_trajectories(*ctx.input);
  std::vector<std::string> blocks(trajs.size());
  parallel_for(trajs.size(), c.jobs, [&](std::size_t t) {
    const auto gen = generate(model, trajs[t].tokens(), c.gen_steps);
    const auto et = entropy_tensor(gen.trace, c.epsilon);
    const auto fr = fis_report(et);
    std::ostringstream os;
    for (int l = 0; l < et.n_layers; ++l)
      for (int h = 0; h < et.n_heads; ++h) {
        const auto s = et.series(l, h);
        for (std::size_t i = 0; i < s.size(); ++i)
          os << t << ",entropy," << l << ',' << h << ',' << i << ',' << fixed(s[i]) << '\n';
      }
    for (int l = 0; l < et.n_layers; ++l)
      for (int h = 0; h < et.n_heads; ++h) os << t << ",fis_head," << l << ',' << h << ",," << fixed(fr.head(l, h)) << '\n';
    for (int l = 0; l < et.n_layers; ++l) os << t << ",fis_layer," << l << ",,," << fixed(fr.layer(l)) << '\n';
    blocks[t] = os.str();
  });
  std::string csv = "trajectory,kind,layer,head,step,value\n";
  for (const auto& b : blocks) csv += b;
  write_file_atomic(ctx.out(files::trace), csv);
  return "traced: " + std::to_string(trajs.size()) + "\n";
}

/// detect.csv: detect-and-rectify over an input trajectory file.
inline std::string cmd_detect(const CommandContext& ctx) {
  require(ctx.input.has_value(), ErrorKind::invalid_argument, "detect needs an input trajectory file (--input)");
  const auto& c = ctx.config;
  const auto model = cmd_detail::load_model_file(ctx);
  const auto prober = cmd_detail::load_prober_file(ctx);
  const auto plan = cmd_detail::steering_plan(ctx, cmd_detail::load_calibration_file(ctx));
  const auto trajs = cmd_detail::read_trajectories(*ctx.input);
  auto records = run_all(model, prober, plan, trajs, c.detect_options(), c.jobs);
  for (std::size_t i = 0; i < records.size(); ++i) records[i].label = trajs[i].injected ? 1 : 0;
  write_file_atomic(ctx.out(files::detect), results_csv(records, plan));
  int flagged = 0;
  for (const auto& r : records) flagged += r.flagged ? 1 : 0;
  return "flagged: " + std::to_string(flagged) + " of " + std::to_string(records.size()) + "\n";
}

/// sweep.csv, plan.cfg (gamma/tau of the winning cell, loadable as a config overlay).
inline std::string cmd_sweep(const CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto model = cmd_detail::load_model_file(ctx);
  const auto prober = cmd_detail::load_prober_file(ctx);
  const auto base = cmd_detail::steering_plan(ctx, cmd_detail::load_calibration_file(ctx));
  const auto val = cmd_detail::held_out(model, c, c.stream(3), c.n_val_benign, c.n_val_attacked);
  const auto result = sweep(model, prober, base, c.gamma_grid, c.tau_grid, val, c.detect_options(), c.jobs);
  const std::string plan = "gamma = " + config_detail::format_number(result.best.gamma) +
                           "\ntau = " + config_detail::format_number(result.best.tau) + "\n";
  write_file_atomic(ctx.out(files::sweep), sweep_csv(result));
  write_file_atomic(ctx.out(files::plan), plan);
  const auto& best = result.cells[result.best_index].metrics;
  return "selected gamma " + config_detail::format_number(result.best.gamma) + " tau " +
         config_detail::format_number(result.best.tau) + " (URR " + best.urr.str() + ", FPR " + best.fpr.str() + ")\n";
}

/// results.csv, metrics.csv on the held-out test split.
inline std::string cmd_eval(const CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto model = cmd_detail::load_model_file(ctx);
  const auto prober = cmd_detail::load_prober_file(ctx);
  const auto plan = cmd_detail::steering_plan(ctx, cmd_detail::load_calibration_file(ctx));
  const auto test = cmd_detail::held_out(model, c, c.stream(4), c.n_test_benign, c.n_test_attacked);
  auto records = run_all(model, prober, plan, test, c.detect_options(), c.jobs);
  for (std::size_t i = 0; i < records.size(); ++i) records[i].label = test[i].injected ? 1 : 0;
  const auto m = evaluate(records);
  write_file_atomic(ctx.out(files::results), results_csv(records, plan));
  write_file_atomic(ctx.out(files::metrics), metrics_csv(m));
  return metrics_csv(m);
}

/// report.md from whatever artifacts exist.
inline std::string cmd_report(const CommandContext& ctx) {
  namespace fs = std::filesystem;
  std::ostringstream md;
  md << "# ICON run report\n\n";
  auto section = [&](const char* title, const char* name) {
    const auto path = ctx.out(name);
    md << "## " << title << "\n\n";
    if (!fs::exists(path)) {
      md << "(missing " << name << ")\n\n";
      return;
    }
    md << "```\n" << read_file(path) << "```\n\n";
  };
  section("Calibration", files::calibration);
  if (fs::exists(ctx.out(files::prober))) {
    const auto p = cmd_detail::load_prober_file(ctx);
    md << "## Prober\n\nparameters: " << p.parameter_count() << "\n\n";
  }
  if (fs::exists(ctx.out(files::train_log))) {
    const auto log = read_file(ctx.out(files::train_log));
    std::stringstream ss(log);
    std::string line, last;
    while (std::getline(ss, line))
      if (!line.empty()) last = line;
    md << "final epoch (epoch,loss,val_accuracy): " << last << "\n\n";
  }
  section("Selected plan", files::plan);
  section("Sweep", files::sweep);
  section("Test metrics", files::metrics);
  write_file_atomic(ctx.out(files::report), md.str());
  return "wrote " + ctx.out(files::report).string() + "\n";
}

}  // namespace icon
