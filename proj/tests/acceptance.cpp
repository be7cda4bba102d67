// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <set>

#include "support.hpp"

using namespace icon;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kEntropyEdgeTol = 1e-6;
constexpr double kOracleTol = 1e-9;
constexpr double kGradTol = 1e-3;
constexpr double kMinParams = 15000;
constexpr double kMaxParams = 65000;
constexpr double kMinAdr = 0.90;
constexpr double kMaxFpr = 0.05;
constexpr double kMinUrr = 0.50;
constexpr double kMaxAsr = 0.10;
constexpr double kMaxControlUrr = 0.05;
constexpr double kAc1Seconds = 1.0;
constexpr double kAc2Seconds = 1.0;
constexpr double kAc3Seconds = 2.0;
constexpr double kAc4Seconds = 30.0;
constexpr double kAc5Seconds = 120.0;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(const char* id, bool pass, const std::string& detail) {
  std::printf("%s %s %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string num(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

void ac1() {
  const auto t0 = Clock::now();
  double edge = 0.0;
  for (std::size_t n = 2; n <= 256; n *= 2) {
    std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
    edge = std::max(edge, std::abs(token_entropy(uniform) - 1.0));
    for (std::size_t hot = 0; hot < n; hot += n / 2) {
      std::vector<double> one_hot(n, 0.0);
      one_hot[hot] = 1.0;
      edge = std::max(edge, std::abs(token_entropy(one_hot)));
    }
  }
  std::mt19937_64 gen(1001);
  std::uniform_int_distribution<std::size_t> len(2, 256);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto row = support::random_row(gen, len(gen), 1.0 + (i % 8));
    worst = std::max(worst, std::abs(token_entropy(row) - support::naive_entropy(row)));
  }
  const double secs = seconds_since(t0);
  report("AC1", edge <= kEntropyEdgeTol && worst <= kOracleTol && secs < kAc1Seconds,
         "edge_err=" + num(edge) + " oracle_max_err=" + num(worst) + " rows=1000 time=" + num(secs, 3) + "s");
}

void ac2() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(2002);
  std::uniform_real_distribution<double> frac(0.0, 1.0);
  auto fis_of = [](const std::vector<double>& row) {
    AttentionTrace trace(1, 1, static_cast<int>(row.size()), 1);
    std::copy(row.begin(), row.end(), trace.weights.begin());
    return fis_report(entropy_tensor(trace)).head(0, 0);
  };
  int decreases = 0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i % 60);
    auto row = support::random_row(gen, n, 1.0 + (i % 5));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::size_t a = pick(gen), b = pick(gen);
    if (a == b) b = (a + 1) % n;
    if (row[a] < row[b]) std::swap(a, b);  // a holds the larger entry
    auto sharper = row;
    const double moved = sharper[b] * frac(gen);
    sharper[b] -= moved;
    sharper[a] += moved;
    if (fis_of(sharper) < fis_of(row)) ++decreases;
  }
  const double secs = seconds_since(t0);
  report("AC2", decreases == 0 && secs < kAc2Seconds,
         "pairs=200 decreases=" + std::to_string(decreases) + " time=" + num(secs, 3) + "s");
}

void ac3() {
  const auto t0 = Clock::now();
  const std::vector<double> ex{0.1, 0.2, 0.3, 0.4};
  const std::vector<double> want{0.125, 0.25, 0.375, 0.25};
  const double example_err = support::max_abs_diff(apply_steering(ex, std::vector<std::uint8_t>{0, 0, 0, 1}, 0.5), want);

  std::mt19937_64 gen(3003);
  std::uniform_int_distribution<std::size_t> len(1, 200);
  const double taus[] = {0.05, 0.1, 0.2, 0.4, 0.7, 1.0};
  const double gammas[] = {0.05, 0.1, 0.3, 0.5, 2.0};
  double worst = 0.0;
  bool row_identity = true;
  for (int i = 0; i < 1000; ++i) {
    const auto row = support::random_row(gen, len(gen), 1.0 + (i % 6));
    auto got = row;
    steer_row(got, taus[i % 6], gammas[i % 5]);
    worst = std::max(worst, support::max_abs_diff(got, support::brute_force_steer(row, taus[i % 6], gammas[i % 5])));
    auto g1 = row;
    steer_row(g1, taus[i % 6], 1.0);
    auto t0row = row;
    steer_row(t0row, 0.0, gammas[i % 5]);
    row_identity = row_identity && g1 == row && t0row == row;
  }

  const auto& model = support::planted_model();
  std::vector<HeadRef> all;
  for (int l = 0; l < model.config.n_layers; ++l)
    for (int h = 0; h < model.config.n_heads; ++h) all.push_back({l, h});
  const SteeringPlan gamma_one{all, 0.3, 1.0, true};
  const SteeringPlan tau_zero{all, 0.0, 0.2, true};
  const auto trajs = collect_trajectories(model, mix_seed(3003, 1), 5, 5, 6, TrajectoryParams{});
  bool e2e_identity = true;
  for (const auto& t : trajs) {
    const auto ctx = t.tokens();
    const auto raw = generate(model, ctx, 8);
    e2e_identity = e2e_identity && generate(model, ctx, 8, &gamma_one).tokens == raw.tokens &&
                   generate(model, ctx, 8, &tau_zero).tokens == raw.tokens;
  }
  const double secs = seconds_since(t0);
  report("AC3",
         example_err <= kOracleTol && worst <= kOracleTol && row_identity && e2e_identity && secs < kAc3Seconds,
         "example_err=" + num(example_err) + " oracle_max_err=" + num(worst) + " rows=1000 row_identity=" +
             (row_identity ? "exact" : "broken") + " e2e_identity=" + (e2e_identity ? "exact" : "broken") +
             " trajectories=" + std::to_string(trajs.size()) + " time=" + num(secs, 3) + "s");
}

void ac4() {
  const auto t0 = Clock::now();
  const auto& model = support::planted_model();
  const std::vector<int> layers{0, 1, 2, 3};
  const auto trajs = collect_trajectories(model, mix_seed(4004, 1), 2, 2, 6, TrajectoryParams{});
  double worst = 0.0;
  const int pairs = 3;
  for (int i = 0; i < pairs; ++i) {
    ProberArch arch;
    arch.seed = mix_seed(4004, 10 + i);
    const auto& traj = trajs[static_cast<std::size_t>(i + 1)];
    const auto rec = make_record(model, traj, i, layers, kDefaultEpsilon, 8);
    const auto prober = make_prober(arch, rec.bundle.n_channels, static_cast<int>(rec.bundle.z.size()), layers);
    worst = std::max(worst, gradient_check(prober, rec.bundle, traj.injected ? 1 : 0));
  }
  const double secs = seconds_since(t0);
  report("AC4", worst < kGradTol && secs < kAc4Seconds,
         "pairs=" + std::to_string(pairs) + " max_rel_err=" + num(worst) + " time=" + num(secs, 3) + "s");
}

struct Metrics {
  double adr = -1, urr = -1, asr = -1, fpr = -1;
  int n_attacked = 0, n_benign = 0;
};

Metrics read_metrics(const fs::path& path) {
  std::stringstream ss(read_file(path));
  std::string header, row;
  std::getline(ss, header);
  std::getline(ss, row);
  std::vector<std::string> cells;
  std::stringstream rs(row);
  for (std::string c; std::getline(rs, c, ',');) cells.push_back(c);
  auto rate = [&](std::size_t i) { return cells[i] == "undefined" ? -1.0 : std::stod(cells[i]); };
  Metrics m;
  m.adr = rate(0);
  m.urr = rate(1);
  m.asr = rate(2);
  m.fpr = rate(4);
  m.n_attacked = std::stoi(cells[5]);
  m.n_benign = std::stoi(cells[6]);
  return m;
}

bool same_file(const fs::path& a, const fs::path& b) { return read_file(a) == read_file(b); }

void end_to_end() {
  const auto base_config = parse_run_config(read_file(fs::path(ICON_SOURCE_DIR) / "configs" / "default.cfg"));
  const auto dir_a = support::temp_dir("acceptance_a");
  const auto dir_b = support::temp_dir("acceptance_b");
  const auto dir_c = support::temp_dir("acceptance_control");

  CommandContext a;
  a.config = base_config;
  a.config.out_dir = dir_a.string();
  cmd_synth(a);
  const auto records = cmd_detail::read_dataset(dir_a / files::dataset);

  // AC5: training time and size.
  auto t0 = Clock::now();
  cmd_train(a);
  const double train_secs = seconds_since(t0);
  const auto prober = load_prober(read_file(dir_a / files::prober));
  const auto params = prober.parameter_count();
  report("AC5",
         records.size() == 255 && train_secs < kAc5Seconds && params >= kMinParams && params <= kMaxParams,
         "samples=" + std::to_string(records.size()) + " parameters=" + std::to_string(params) +
             " train_time=" + num(train_secs, 4) + "s");

  // AC6 / AC7: sweep on validation seeds, evaluate on test seeds.
  cmd_sweep(a);
  a.plan = dir_a / files::plan;
  cmd_eval(a);
  const auto m = read_metrics(dir_a / files::metrics);
  const auto model = load_model(read_file(dir_a / files::model));
  const auto test = cmd_detail::held_out(model, a.config, a.config.stream(4), a.config.n_test_benign, a.config.n_test_attacked);
  std::set<std::uint64_t> train_seeds;
  for (const auto& r : records) train_seeds.insert(r.trajectory.seed);
  int reused = 0;
  for (const auto& t : test) reused += train_seeds.count(t.seed) ? 1 : 0;
  report("AC6", m.n_attacked + m.n_benign >= 100 && reused == 0 && m.adr >= kMinAdr && m.fpr >= 0 && m.fpr <= kMaxFpr,
         "held_out=" + std::to_string(m.n_attacked + m.n_benign) + " reused_seeds=" + std::to_string(reused) +
             " ADR=" + num(m.adr) + " FPR=" + num(m.fpr) + " threshold=" + num(a.config.threshold));

  const auto selected = parse_run_config(read_file(dir_a / files::plan), a.config);
  for (const char* f : {files::model, files::calibration, files::prober})
    fs::copy_file(dir_a / f, dir_c / f, fs::copy_options::overwrite_existing);
  CommandContext control = a;
  control.plan.reset();
  control.config.out_dir = dir_c.string();
  control.config.gamma = 1.0;
  control.config.tau = selected.tau;
  cmd_eval(control);
  const auto mc = read_metrics(dir_c / files::metrics);
  report("AC7",
         m.n_attacked >= 50 && m.urr >= kMinUrr && m.asr >= 0 && m.asr <= kMaxAsr && mc.urr >= 0 && mc.urr <= kMaxControlUrr,
         "attacked=" + std::to_string(m.n_attacked) + " plan=(gamma " + num(selected.gamma) + ", tau " +
             num(selected.tau) + ") URR=" + num(m.urr) + " ASR=" + num(m.asr) + " control_URR=" + num(mc.urr));

  // AC8: a second full run in a fresh directory, plus in-place reruns.
  const auto prober_bytes = read_file(dir_a / files::prober);
  const auto log_bytes = read_file(dir_a / files::train_log);
  const auto results_bytes = read_file(dir_a / files::results);
  const auto metrics_bytes = read_file(dir_a / files::metrics);
  cmd_train(a);
  cmd_eval(a);
  bool same = read_file(dir_a / files::prober) == prober_bytes && read_file(dir_a / files::train_log) == log_bytes &&
              read_file(dir_a / files::results) == results_bytes && read_file(dir_a / files::metrics) == metrics_bytes;
  CommandContext b = a;
  b.config.out_dir = dir_b.string();
  b.plan = dir_a / files::plan;
  cmd_synth(b);
  cmd_train(b);
  cmd_eval(b);
  for (const char* f : {files::model, files::calibration, files::dataset, files::prober, files::train_log, files::results,
                        files::metrics})
    same = same && same_file(dir_a / f, dir_b / f);
  report("AC8", same, std::string("train+eval artifacts ") + (same ? "byte-identical" : "differ") + " across reruns");

  // AC9: repeat the time axis of real samples.
  int checked = 0, unequal = 0;
  for (const auto& r : records) {
    if (checked == 100) break;
    const double p = prober_forward(prober, r.bundle);
    for (int reps : {2, 3}) {
      FeatureBundle rep = r.bundle;
      rep.n_steps = r.bundle.n_steps * reps;
      rep.channels.clear();
      for (int c = 0; c < r.bundle.n_channels; ++c)
        for (int k = 0; k < reps; ++k) rep.channels.insert(rep.channels.end(), r.bundle.channel(c).begin(), r.bundle.channel(c).end());
      unequal += prober_forward(prober, rep) == p ? 0 : 1;
    }
    ++checked;
  }
  report("AC9", checked == 100 && unequal == 0,
         "samples=" + std::to_string(checked) + " repeats={2,3} unequal=" + std::to_string(unequal));
}

}  // namespace

/// No arguments runs everything; otherwise any of AC1 AC2 AC3 AC4 pipeline
/// (the last covers AC5 to AC9, which share one end-to-end run).
int main(int argc, char** argv) {
  std::vector<std::string> wanted(argv + 1, argv + argc);
  auto run = [&](const std::string& name) {
    return wanted.empty() || std::find(wanted.begin(), wanted.end(), name) != wanted.end();
  };
  try {
    if (run("AC1")) ac1();
    if (run("AC2")) ac2();
    if (run("AC3")) ac3();
    if (run("AC4")) ac4();
    if (run("pipeline")) end_to_end();
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%s\n", failures == 0 ? "ALL PASS" : "FAILURES PRESENT");
  return failures == 0 ? 0 : 1;
}
