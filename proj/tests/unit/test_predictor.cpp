#include <gtest/gtest.h>

#include "moesim/predictor.hpp"

using namespace moesim;

namespace {

ModelSpec model_d4_l2_m4() {
  ModelSpec m;
  m.num_layers = 2;
  m.experts_per_layer = 4;
  m.top_k = 1;
  m.vocab_size = 10;
  m.embed_dim = 4;
  return m;
}

Sample sample(std::vector<std::uint32_t> tokens, std::uint32_t layer,
              std::vector<std::uint32_t> actual, std::uint32_t step,
              std::vector<std::uint32_t> predicted = {}) {
  Sample s;
  s.token_ids = std::move(tokens);
  s.layer_idx = layer;
  s.actual_experts = std::move(actual);
  s.predicted_experts = std::move(predicted);
  s.step_size = step;
  return s;
}

EmbeddingTable counting_table(std::uint32_t V, std::uint32_t d) {
  std::vector<double> v(V * d);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  return EmbeddingTable(V, d, v);
}

}  // namespace

TEST(GroupRequests, SortsByLayer) {
  const std::vector<Sample> s{sample({1, 2}, 3, {0}, 1), sample({1, 2}, 1, {1}, 1)};
  const auto g = group_requests(s);
  ASSERT_EQ(g.size(), 1u);
  const auto& members = g.begin()->second;
  EXPECT_EQ(members[0].layer_idx, 1u);
  EXPECT_EQ(members[1].layer_idx, 3u);
}

TEST(GroupRequests, StepSizeSeparatesGroups) {
  const std::vector<Sample> s{sample({1, 2}, 1, {0}, 1), sample({1, 2}, 1, {0}, 2)};
  EXPECT_EQ(group_requests(s).size(), 2u);
}

TEST(GroupRequests, DuplicateRejected) {
  const std::vector<Sample> s{sample({1, 2}, 1, {0}, 1), sample({1, 2}, 1, {3}, 1)};
  EXPECT_THROW(group_requests(s), ConfigError);
}

TEST(Features, WidthFormula) {
  const auto layout = FeatureLayout::of(model_d4_l2_m4());
  EXPECT_EQ(layout.width(), 14u);
}

TEST(Features, WidthMatchesFormulaOnRandomShapes) {
  for (std::uint32_t d = 1; d <= 5; ++d) {
    for (std::uint32_t L = 1; L <= 6; ++L) {
      for (std::uint32_t M = 1; M <= 4; ++M) {
        EXPECT_EQ((FeatureLayout{d, L, M}.width()), d + 2 + L * M);
      }
    }
  }
}

TEST(Features, FirstLayerHasNoHistory) {
  const auto m = model_d4_l2_m4();
  const auto t = counting_table(10, 4);
  const std::vector<Sample> s{sample({2}, 0, {2}, 1), sample({2}, 1, {3}, 1)};
  const auto set = build_features(group_requests(s), t, m);
  ASSERT_EQ(set.features.rows, 2u);
  for (std::size_t c = 6; c < 14; ++c) EXPECT_EQ(set.features.at(0, c), 0.0);
  // Embedding of token 2 is (8, 9, 10, 11); then step and layer.
  EXPECT_EQ(set.features.at(0, 0), 8.0);
  EXPECT_EQ(set.features.at(0, 3), 11.0);
  EXPECT_EQ(set.features.at(0, 4), 1.0);
  EXPECT_EQ(set.features.at(0, 5), 0.0);
}

TEST(Features, SecondLayerSeesOnlyTheFirstLayerBit) {
  const auto m = model_d4_l2_m4();
  const auto t = counting_table(10, 4);
  const std::vector<Sample> s{sample({2}, 0, {2}, 1), sample({2}, 1, {3}, 1, {3, 1})};
  const auto set = build_features(group_requests(s), t, m);
  const auto layout = set.layout;
  for (std::uint32_t l = 0; l < 2; ++l) {
    for (std::uint32_t e = 0; e < 4; ++e) {
      EXPECT_EQ(set.features.at(1, layout.prev_act_column(l, e)), l == 0 && e == 2 ? 1.0 : 0.0);
    }
  }
  EXPECT_EQ(set.labels.row(1)[3], 1.0);
  EXPECT_EQ(set.pregate.at(1, 1), 1.0);
  EXPECT_EQ(set.pregate.at(1, 3), 1.0);
  EXPECT_EQ(set.pregate.at(1, 0), 0.0);
}

TEST(Features, HistoryMaskedByStep) {
  ModelSpec m = model_d4_l2_m4();
  m.num_layers = 5;
  const auto t = counting_table(10, 4);
  std::vector<Sample> s;
  for (std::uint32_t l = 0; l < 5; ++l) s.push_back(sample({1}, l, {l % 4}, 2));
  const auto set = build_features(group_requests(s), t, m);
  const auto layout = set.layout;
  // Row for layer 4 at step 2 may only see layers 0..2.
  for (std::uint32_t l = 0; l < 5; ++l) {
    EXPECT_EQ(set.features.at(4, layout.prev_act_column(l, l % 4)), l <= 2 ? 1.0 : 0.0);
  }
  // Layer 1 at step 2 sees nothing.
  for (std::size_t c = 6; c < layout.width(); ++c) EXPECT_EQ(set.features.at(1, c), 0.0);
}

TEST(Mse, Definition) {
  Matrix y(2, 2), p(2, 2);
  y.data = {1, 0, 0, 1};
  p.data = {0.5, 0, 0, 0};
  EXPECT_DOUBLE_EQ(mean_squared_error(y, p), (0.25 + 1.0) / 2.0);
  EXPECT_THROW(mean_squared_error(y, Matrix(1, 2)), ConfigError);
}

TEST(BitAccuracy, PerfectIsHundred) {
  const FeatureLayout layout{1, 1, 2};
  Matrix y(2, 2), x(2, layout.width());
  y.data = {1, 0, 0, 1};
  x.at(0, layout.step_column()) = 1;
  x.at(1, layout.step_column()) = 1;
  const auto r = bit_accuracy(y, y, x, layout, 0.5);
  EXPECT_DOUBLE_EQ(r.overall, 100.0);
}

TEST(BitAccuracy, AllZeroAgainstTopTwoOfEight) {
  const FeatureLayout layout{1, 1, 8};
  Matrix y(3, 8), x(3, layout.width()), zero(3, 8);
  for (std::size_t i = 0; i < 3; ++i) {
    y.at(i, i) = 1;
    y.at(i, i + 3) = 1;
    x.at(i, layout.step_column()) = 1;
  }
  EXPECT_DOUBLE_EQ(bit_accuracy(zero, y, x, layout, 0.5).overall, 75.0);
}

TEST(BitAccuracy, PerStepKeys) {
  const FeatureLayout layout{1, 1, 2};
  Matrix y(3, 2), x(3, layout.width()), p(3, 2);
  y.data = {1, 0, 1, 0, 1, 0};
  p.data = {1, 0, 0, 0, 1, 1};
  x.at(0, layout.step_column()) = 1;
  x.at(1, layout.step_column()) = 3;
  x.at(2, layout.step_column()) = 3;
  const auto r = bit_accuracy(p, y, x, layout, 0.5);
  ASSERT_EQ(r.per_step.size(), 2u);
  EXPECT_DOUBLE_EQ(r.per_step.at(1), 100.0);
  EXPECT_DOUBLE_EQ(r.per_step.at(3), 50.0);
  EXPECT_EQ(r.rows_per_step.at(3), 2u);
  EXPECT_NEAR(r.overall, 4.0 / 6.0 * 100.0, 1e-12);
}
