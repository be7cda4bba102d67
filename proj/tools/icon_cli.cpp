// icon: synth / train / trace / detect / sweep / eval / report

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "icon/commands.hpp"

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out_dir;
  std::string input;
  std::string plan;
};

icon::CommandContext make_context(const GlobalFlags& g) {
  icon::CommandContext ctx;
  if (!g.config_path.empty()) ctx.config = icon::parse_run_config(icon::read_file(g.config_path));
  if (g.seed) ctx.config.seed = *g.seed;
  if (g.jobs) {
    icon::require(*g.jobs >= 1, icon::ErrorKind::invalid_argument, "--jobs must be >= 1");
    ctx.config.jobs = *g.jobs;
  }
  if (!g.out_dir.empty()) ctx.config.out_dir = g.out_dir;
  if (!g.input.empty()) ctx.input = g.input;
  if (!g.plan.empty()) ctx.plan = g.plan;
  ctx.log = icon::Logger::from_env();
  return ctx;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ICON toy defense: detect and rectify planted attention attacks"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config_path, "flat key = value config file");
  app.add_option("--seed", g.seed, "master seed (overrides config)");
  app.add_option("--jobs", g.jobs, "worker threads (overrides config)");
  app.add_option("--out", g.out_dir, "artifact directory (overrides config)");

  using Command = std::function<std::string(const icon::CommandContext&)>;
  const std::map<std::string, std::pair<std::string, Command>> commands = {
      {"synth", {"build the planted model, calibrate, write the training dataset", icon::cmd_synth}},
      {"train", {"train the prober on the synthesized dataset", icon::cmd_train}},
      {"trace", {"dump entropies and FIS for trajectories in --input", icon::cmd_trace}},
      {"detect", {"detect and rectify trajectories in --input", icon::cmd_detect}},
      {"sweep", {"grid search gamma and tau on validation trajectories", icon::cmd_sweep}},
      {"eval", {"evaluate the defense on held-out test trajectories", icon::cmd_eval}},
      {"report", {"summarize artifacts into report.md", icon::cmd_report}},
  };
  std::string chosen;
  for (const auto& [name, entry] : commands) {
    auto* sub = app.add_subcommand(name, entry.first);
    if (name == "trace" || name == "detect") sub->add_option("--input", g.input, "JSONL trajectories")->required();
    if (name == "detect" || name == "eval") sub->add_option("--plan", g.plan, "plan overlay written by sweep");
    sub->callback([&chosen, name = name] { chosen = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    const auto ctx = make_context(g);
    std::cout << commands.at(chosen).second(ctx);
    return 0;
  } catch (const icon::Error& e) {
    std::cerr << "error: " << icon::to_string(e.kind()) << ": " << one_line(e.what()) << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << '\n';
  }
  return 1;
}
