#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace icon;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

TEST_CASE("worked example: top entry scaled by one half", "[rectifier]") {
  const std::vector<double> row{0.1, 0.2, 0.3, 0.4};
  const std::vector<std::uint8_t> mask{0, 0, 0, 1};
  const auto out = apply_steering(row, mask, 0.5);
  const std::vector<double> expected{0.125, 0.25, 0.375, 0.25};
  for (std::size_t j = 0; j < 4; ++j) CHECK_THAT(out[j], WithinAbs(expected[j], 1e-9));
  CHECK(row_threshold(row, 0.25) == 0.4);
  CHECK(steering_mask(row, 0.4) == mask);
}

TEST_CASE("budget is ceil(tau * n) without float creep", "[rectifier]") {
  CHECK(steering_budget(0.0, 10) == 0);
  CHECK(steering_budget(0.1, 40) == 4);
  CHECK(steering_budget(0.1, 41) == 5);
  CHECK(steering_budget(0.3, 10) == 3);
  CHECK(steering_budget(1.0, 7) == 7);
  CHECK(std::isinf(row_threshold(std::vector<double>{0.5, 0.5}, 0.0)));
}

TEST_CASE("ties at the threshold are all masked", "[rectifier]") {
  const std::vector<double> row{0.3, 0.3, 0.3, 0.1};
  const double theta = row_threshold(row, 0.25);
  CHECK(theta == 0.3);
  const auto mask = steering_mask(row, theta);
  CHECK(std::count(mask.begin(), mask.end(), 1) == 3);
}

TEST_CASE("gamma = 1, tau = 0 and empty masks are exact identities", "[rectifier]") {
  std::mt19937_64 gen(3);
  for (int t = 0; t < 100; ++t) {
    const auto row = support::random_row(gen, 33, 4.0);
    auto a = row;
    steer_row(a, 0.3, 1.0);
    CHECK(a == row);
    auto b = row;
    steer_row(b, 0.0, 0.2);
    CHECK(b == row);
    CHECK(apply_steering(row, std::vector<std::uint8_t>(row.size(), 0), 0.2) == row);
  }
}

TEST_CASE("steering matches the brute-force oracle", "[rectifier]") {
  std::mt19937_64 gen(29);
  std::uniform_int_distribution<std::size_t> len(1, 150);
  const double taus[] = {0.0, 0.05, 0.1, 0.2, 0.4, 0.75, 1.0};
  const double gammas[] = {0.05, 0.3, 0.5, 1.0, 2.0};
  for (int t = 0; t < 400; ++t) {
    const auto row = support::random_row(gen, len(gen), 3.0);
    const double tau = taus[t % 7];
    const double gamma = gammas[t % 5];
    auto got = row;
    steer_row(got, tau, gamma);
    CHECK(support::max_abs_diff(got, support::brute_force_steer(row, tau, gamma)) <= 1e-9);
  }
}

TEST_CASE("suppression lowers the masked share", "[rectifier]") {
  std::mt19937_64 gen(8);
  for (int t = 0; t < 100; ++t) {
    const auto row = support::random_row(gen, 20, 5.0);
    const auto mask = steering_mask(row, row_threshold(row, 0.1));
    const auto out = apply_steering(row, mask, 0.3);
    double before = 0.0, after = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j)
      if (mask[j]) {
        before += row[j];
        after += out[j];
      }
    CHECK(after <= before + 1e-15);
    CHECK_THAT(std::accumulate(out.begin(), out.end(), 0.0), WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("the top entry's steered share grows with scope", "[rectifier]") {
  // Widening the mask adds suppressed mass to the denominator, so the top
  // entry (always masked) keeps more of its share.
  std::mt19937_64 gen(21);
  for (int t = 0; t < 100; ++t) {
    const auto row = support::random_row(gen, 40, 6.0);
    const auto top = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    double prev = 0.0;
    for (double tau : {0.05, 0.1, 0.2, 0.4}) {
      auto s = row;
      steer_row(s, tau, 0.3);
      CHECK(s[top] <= row[top]);
      CHECK(s[top] >= prev - 1e-15);
      prev = s[top];
    }
  }
}

TEST_CASE("steering errors", "[rectifier]") {
  const std::vector<double> row{0.5, 0.5};
  CHECK_THROWS_WITH(apply_steering(row, std::vector<std::uint8_t>{1, 1}, 0.0), ContainsSubstring("annihilated"));
  CHECK_THROWS_AS(apply_steering(row, std::vector<std::uint8_t>{1}, 0.5), Error);
  CHECK_THROWS_AS(apply_steering(row, std::vector<std::uint8_t>{1, 0}, -1.0), Error);
  CHECK_THROWS_AS(row_threshold(row, 1.5), Error);
  SteeringPlan plan;
  plan.heads = {{6, 0}};
  CHECK_THROWS_WITH(plan.validate(6, 4), ContainsSubstring("index out of range"));
  plan.heads = {{0, 0}};
  plan.gamma = 0.0;
  CHECK_THROWS_AS(plan.validate(6, 4), Error);
}

namespace {
FisReport flat_report(int layers, int heads, double value) {
  FisReport r;
  r.n_layers = layers;
  r.n_heads = heads;
  r.head_scores.assign(static_cast<std::size_t>(layers * heads), value);
  r.layer_scores.assign(static_cast<std::size_t>(layers), value);
  return r;
}
}  // namespace

TEST_CASE("head selection", "[rectifier]") {
  const std::vector<FisReport> benign{flat_report(3, 4, 0.1)};
  auto attacked = benign;
  const std::vector<int> layers{2, 0};
  auto same = select_adv_heads(benign, attacked, layers, 2);
  CHECK(same == std::vector<HeadRef>{{0, 0}, {0, 1}, {2, 0}, {2, 1}});

  attacked[0].head_scores[2 * 4 + 3] = 0.9;
  attacked[0].head_scores[0 * 4 + 2] = 0.5;
  CHECK(select_adv_heads(benign, attacked, layers, 1) == std::vector<HeadRef>{{0, 2}, {2, 3}});
  CHECK_THROWS_AS(select_adv_heads(benign, attacked, layers, 5), Error);
}

TEST_CASE("calibration finds the planted head", "[rectifier]") {
  const auto& cal = support::trained().calibration;
  const auto& plant = *support::planted_model().plant;
  const HeadRef planted{plant.target_layer, plant.target_head};
  CHECK(std::find(cal.adv_heads.begin(), cal.adv_heads.end(), planted) != cal.adv_heads.end());
}

TEST_CASE("steering the planted head pulls mass off the trigger", "[rectifier]") {
  const auto& model = support::planted_model();
  const auto& plant = *model.plant;
  const auto base = gen_benign(model, 4242, TrajectoryParams{});
  const auto attacked = gen_attacked(model, 4343, base, 2, TrajectoryParams{});
  const auto ctx = attacked.tokens();
  const int trig = static_cast<int>(std::find(ctx.begin(), ctx.end(), plant.trigger_token) - ctx.begin());
  auto share = [&](const SteeringPlan* plan) {
    return generate(model, ctx, 1, plan).trace.row(plant.target_layer, plant.target_head, 0)[trig];
  };
  const double raw = share(nullptr);
  double prev = 0.0;
  for (double tau : {0.05, 0.1, 0.2, 0.4}) {
    SteeringPlan plan{{{plant.target_layer, plant.target_head}}, tau, 0.3, false};
    const double s = share(&plan);
    CHECK(s < raw);
    CHECK(s >= prev - 1e-15);
    prev = s;
  }
}
