#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace icon;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

FisReport layer_report(std::vector<double> layers) {
  FisReport r;
  r.n_layers = static_cast<int>(layers.size());
  r.n_heads = 1;
  r.head_scores = layers;
  r.layer_scores = std::move(layers);
  return r;
}

FeatureBundle random_bundle(std::mt19937_64& gen, int channels, int steps, int layers) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FeatureBundle b;
  b.n_channels = channels;
  b.n_steps = steps;
  b.channels.resize(static_cast<std::size_t>(channels) * steps);
  for (auto& x : b.channels) x = u(gen);
  b.z.resize(static_cast<std::size_t>(3 * channels));
  for (auto& x : b.z) x = u(gen);
  for (int l = 0; l < layers; ++l) b.selected_layers.push_back(l);
  return b;
}

/// Parameter count from the architecture description alone.
std::size_t expected_params(const ProberArch& a, int in, int z) {
  std::size_t n = 0;
  int w = in;
  for (int c : a.conv_channels) {
    n += static_cast<std::size_t>(w) * c * a.kernel + c;
    w = c;
  }
  w += z;
  for (int h : a.mlp_hidden) {
    n += static_cast<std::size_t>(w) * h + h;
    w = h;
  }
  return n + w + 1;
}

}  // namespace

TEST_CASE("layer selection ranks FIS gaps", "[prober]") {
  const std::vector<FisReport> benign{layer_report({0.1, 0.1, 0.1, 0.1, 0.1})};
  const std::vector<FisReport> attacked{layer_report({0.1, 0.5, 0.2, 0.5, 0.0})};
  CHECK(select_layers(benign, attacked, 2) == std::vector<int>{1, 3});
  CHECK(select_layers(benign, attacked, 3) == std::vector<int>{1, 2, 3});
  CHECK(select_layers(benign, benign, 2) == std::vector<int>{0, 1});
  CHECK_THROWS_AS(select_layers(benign, attacked, 0), Error);
  CHECK_THROWS_AS(select_layers(benign, attacked, 6), Error);
  CHECK_THROWS_AS(select_layers(benign, std::vector<FisReport>{}, 1), Error);
}

TEST_CASE("head summary uses population std", "[prober]") {
  const std::vector<double> s{0.2, 0.4, 0.6, 0.8};
  const auto h = aggregate_head(s);
  CHECK(h.min == 0.2);
  CHECK_THAT(h.mean, WithinAbs(0.5, 1e-15));
  CHECK_THAT(h.std, WithinAbs(std::sqrt(0.05), 1e-15));
}

TEST_CASE("feature layout", "[prober]") {
  EntropyTensor et;
  et.n_layers = 3;
  et.n_heads = 2;
  et.gen_len = 2;
  for (int i = 0; i < 12; ++i) et.values.push_back(0.05 * i);
  const std::vector<int> layers{2, 0};
  const auto b = build_features(et, layers);
  CHECK(b.selected_layers == std::vector<int>{0, 2});
  CHECK(b.n_channels == 4);
  CHECK(b.z.size() == 12);
  // channel 2 is (layer 2, head 0): values 8, 9
  CHECK(b.channel(2)[0] == et.values[8]);
  CHECK(b.channel(2)[1] == et.values[9]);
  CHECK(b.z[6] == et.values[8]);  // min
  CHECK_THAT(b.z[7], WithinAbs((et.values[8] + et.values[9]) / 2, 1e-15));
  CHECK(build_features(et, layers) == b);
  CHECK_THROWS_AS(build_features(et, std::vector<int>{0, 0}), Error);
  CHECK_THROWS_WITH(build_features(et, std::vector<int>{3}), ContainsSubstring("index out of range"));
}

TEST_CASE("default parameter count", "[prober]") {
  const ProberArch arch;
  const auto m = make_prober(arch, 16, 48, {0, 1, 2, 3});
  CHECK(m.parameter_count() == expected_params(arch, 16, 48));
  CHECK(m.parameter_count() == 25665);
  CHECK(m.parameter_count() >= 15000);
  CHECK(m.parameter_count() <= 65000);
  CHECK(m.d_feat() == 32);
}

TEST_CASE("analytic gradient agrees with finite differences", "[prober]") {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 3; ++trial) {
    ProberArch arch;
    arch.conv_channels = {6, 5};
    arch.mlp_hidden = {12};
    arch.seed = 100 + trial;
    const auto m = make_prober(arch, 8, 24, {0, 1});
    const auto b = random_bundle(gen, 8, 8, 2);
    CHECK(gradient_check(m, b, trial % 2) < 1e-3);
  }
  CHECK_THROWS_WITH(gradient_check(make_prober(ProberArch{}, 2, 6, {0}), random_bundle(gen, 2, 3, 1), 1, 0.0),
                    ContainsSubstring("invalid step"));
}

TEST_CASE("time-axis repetition leaves the output bit-equal", "[prober]") {
  std::mt19937_64 gen(77);
  const auto m = make_prober(ProberArch{}, 16, 48, {0, 1, 2, 3});
  for (int t = 0; t < 20; ++t) {
    const auto b = random_bundle(gen, 16, 8, 4);
    FeatureBundle rep = b;
    rep.n_steps = 2 * b.n_steps;
    rep.channels.clear();
    for (int c = 0; c < b.n_channels; ++c)
      for (int k = 0; k < 2; ++k) rep.channels.insert(rep.channels.end(), b.channel(c).begin(), b.channel(c).end());
    CHECK(prober_forward(m, rep) == prober_forward(m, b));
  }
}

TEST_CASE("prober rejects mismatched bundles", "[prober]") {
  std::mt19937_64 gen(1);
  const auto m = make_prober(ProberArch{}, 16, 48, {0, 1, 2, 3});
  CHECK_THROWS_WITH(prober_forward(m, random_bundle(gen, 12, 8, 3)), ContainsSubstring("model expects 16"));
  auto b = random_bundle(gen, 16, 8, 4);
  b.channels.pop_back();
  CHECK_THROWS_AS(prober_forward(m, b), Error);
}

TEST_CASE("stratified split", "[prober]") {
  LabeledDataset d;
  for (int i = 0; i < 50; ++i) {
    d.bundles.emplace_back();
    d.labels.push_back(i < 20 ? 1 : 0);
  }
  d.split_seed = 3;
  const auto s = split_dataset(d);
  CHECK(s.train.size() == 40);
  CHECK(s.validation.size() == 10);
  int pos = 0;
  for (auto i : s.train) pos += d.labels[i];
  CHECK(pos == 16);
  const auto again = split_dataset(d);
  CHECK(again.train == s.train);
}

TEST_CASE("training separates a learnable toy problem deterministically", "[prober]") {
  std::mt19937_64 gen(2);
  LabeledDataset d;
  for (int i = 0; i < 60; ++i) {
    auto b = random_bundle(gen, 4, 6, 1);
    const int label = i % 2;
    if (label)
      for (int t = 0; t < 6; ++t) b.channels[t] *= 0.2;  // low entropy on channel 0
    d.bundles.push_back(b);
    d.labels.push_back(label);
  }
  ProberArch arch;
  arch.conv_channels = {8};
  arch.mlp_hidden = {16};
  TrainOptions opt;
  opt.epochs = 80;
  opt.batch_size = 8;
  const auto a = prober_train(d, arch, opt);
  const auto b = prober_train(d, arch, opt);
  CHECK(a.model == b.model);
  CHECK(a.log.size() == 80);
  CHECK(a.log.back().loss < a.log.front().loss);
  CHECK(a.log.back().val_accuracy >= 0.9);

  d.labels.assign(d.labels.size(), 1);
  CHECK_THROWS_WITH(prober_train(d, arch, opt), ContainsSubstring("single-class data"));
}

TEST_CASE("prober checkpoint round trip", "[prober]") {
  std::mt19937_64 gen(4);
  const auto m = make_prober(ProberArch{}, 16, 48, {1, 2, 3, 5});
  const auto bytes = save_prober(m);
  CHECK(bytes.substr(0, 4) == "PRB1");
  const auto back = load_prober(bytes);
  CHECK(save_prober(back) == bytes);
  CHECK(back.selected_layers == m.selected_layers);
  CHECK(back.arch == m.arch);
  const auto b = random_bundle(gen, 16, 8, 4);
  CHECK_THAT(prober_forward(back, b), WithinAbs(prober_forward(m, b), 1e-5));
  CHECK_THROWS_WITH(load_prober("PRB0" + bytes.substr(4)), ContainsSubstring("magic"));
}
