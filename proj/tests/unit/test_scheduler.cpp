#include <gtest/gtest.h>

#include "exact.hpp"
#include "moesim/rng.hpp"
#include "moesim/scheduler.hpp"
#include "trace_builder.hpp"

using namespace moesim;
using moesim::testing::step_by_search;
using moesim::testing::swap_ns;

namespace {

ModelSpec model_with_size(std::uint64_t bytes) {
  ModelSpec m;
  m.num_layers = 8;
  m.experts_per_layer = 4;
  m.top_k = 1;
  m.expert_size_bytes = bytes;
  return m;
}

HardwareSpec hw(std::uint64_t bw, Nanos t) {
  HardwareSpec h;
  h.link_bandwidth_bytes_per_sec = bw;
  h.layer_compute_time = t;
  h.device_memory_bytes = 100 * kGB;
  return h;
}

class CountingScorer final : public ActivationScorer {
 public:
  explicit CountingScorer(std::vector<double> s) : scores_(std::move(s)) {}
  std::vector<double> score(const ScoreQuery&) const override {
    ++calls;
    return scores_;
  }
  mutable int calls = 0;

 private:
  std::vector<double> scores_;
};

}  // namespace

TEST(ExpectedExpertCount, Examples) {
  EXPECT_EQ(expected_expert_count(GateDistribution::from_probs({0, 1, 0}), 0.99), 1u);
  EXPECT_EQ(expected_expert_count(GateDistribution::from_probs({0, 1, 0}), 1.0), 1u);
  EXPECT_EQ(expected_expert_count(GateDistribution::uniform(4), 0.9), 4u);
  EXPECT_EQ(expected_expert_count(GateDistribution::from_probs({0.2, 0.5, 0.3}), 0.8), 2u);
  EXPECT_THROW(expected_expert_count(GateDistribution::uniform(4), 0.0), ConfigError);
  EXPECT_THROW(expected_expert_count(GateDistribution::uniform(4), 1.5), ConfigError);
}

TEST(ComputeStep, Examples) {
  const auto m = model_with_size(500 * kMB);
  const StepBounds b{1, 8};
  EXPECT_EQ(compute_step(4, m, hw(64 * kGB, Nanos(31'250'000)), b), 1u);
  EXPECT_EQ(compute_step(4, m, hw(find_preset("RTX 4090")->link_bandwidth_bytes_per_sec,
                                  Nanos(31'250'000)), b), 2u);
  EXPECT_EQ(compute_step(0, m, hw(64 * kGB, Nanos(31'250'000)), b), 1u);
  EXPECT_EQ(compute_step(400, m, hw(64 * kGB, Nanos(31'250'000)), b), 8u);
  EXPECT_THROW(compute_step(1, m, hw(64 * kGB, Nanos(1)), StepBounds{3, 2}), ConfigError);
}

TEST(ComputeStep, MatchesRationalSearch) {
  Rng rng(Seed{21});
  for (int i = 0; i < 200; ++i) {
    const auto n = rng.below(20);
    const auto size = 1 + rng.below(2 * kGB);
    const auto bw = 1 + rng.below(200 * kGB);
    const auto t = 1 + static_cast<std::int64_t>(rng.below(100'000'000));
    const auto lo = 1 + static_cast<std::uint32_t>(rng.below(3));
    const auto hi = lo + static_cast<std::uint32_t>(rng.below(40));
    EXPECT_EQ(compute_step(n, size, bw, Nanos(t), StepBounds{lo, hi}),
              step_by_search(n, size, bw, t, lo, hi));
  }
}

TEST(SwapInLatency, Examples) {
  EXPECT_EQ(swap_in_latency(0, model_with_size(500 * kMB), 64 * kGB), Nanos(0));
  EXPECT_EQ(swap_in_latency(4, model_with_size(500 * kMB), 64 * kGB), Nanos(31'250'000));
  EXPECT_EQ(swap_in_latency(1, model_with_size(10 * kMB),
                            find_preset("RX 6500 XT")->link_bandwidth_bytes_per_sec),
            Nanos(1'250'000));
}

TEST(SwapInLatency, MatchesRationalCeiling) {
  Rng rng(Seed{22});
  for (int i = 0; i < 200; ++i) {
    const auto n = rng.below(64);
    const auto size = 1 + rng.below(4 * kGB);
    const auto bw = 1 + rng.below(256 * kGB);
    EXPECT_EQ(swap_in_latency(n, model_with_size(size), bw).count(),
              static_cast<std::int64_t>(swap_ns(n, size, bw)));
  }
}

TEST(Feedback, StallCounter) {
  StepState s;
  s.current = 2;
  s.max_step = 5;
  s = on_stall(on_stall(s));
  EXPECT_EQ(s.current, 2u);
  EXPECT_EQ(s.stall_counter, 2u);
  s = on_stall(s);
  EXPECT_EQ(s.current, 3u);
  EXPECT_EQ(s.stall_counter, 0u);
}

TEST(Feedback, StallAtMaxStillResets) {
  StepState s;
  s.current = s.max_step = 4;
  for (int i = 0; i < 3; ++i) s = on_stall(s);
  EXPECT_EQ(s.current, 4u);
  EXPECT_EQ(s.stall_counter, 0u);
}

TEST(Feedback, OverfetchCounter) {
  StepState s;
  s.current = 3;
  s.max_step = 5;
  for (int i = 0; i < 3; ++i) s = on_overfetch(s);
  EXPECT_EQ(s.current, 2u);
  EXPECT_EQ(s.overfetch_counter, 0u);
  s.current = 1;
  for (int i = 0; i < 3; ++i) s = on_overfetch(s);
  EXPECT_EQ(s.current, 1u);
  EXPECT_EQ(s.overfetch_counter, 0u);
}

TEST(Feedback, CountersAreIndependent) {
  StepState s;
  s.current = 3;
  s.max_step = 6;
  for (int i = 0; i < 2; ++i) {
    s = on_stall(s);
    s = on_overfetch(s);
  }
  EXPECT_EQ(s.current, 3u);
  EXPECT_EQ(s.stall_counter, 2u);
  EXPECT_EQ(s.overfetch_counter, 2u);
}

TEST(Feedback, StepStaysInBoundsUnderRandomEvents) {
  Rng rng(Seed{4});
  StepState s;
  s.min_step = 2;
  s.max_step = 6;
  s.current = 4;
  s.stall_threshold = 2;
  for (int i = 0; i < 5000; ++i) {
    const auto before = s;
    s = rng.below(2) ? on_stall(s) : on_overfetch(s);
    ASSERT_GE(s.current, s.min_step);
    ASSERT_LE(s.current, s.max_step);
    ASSERT_LE(s.current > before.current ? s.current - before.current : before.current - s.current, 1u);
    ASSERT_LT(s.stall_counter, s.stall_threshold);
    ASSERT_LT(s.overfetch_counter, s.overfetch_threshold);
  }
}

TEST(Feedback, ConvergesToThreeFromOne) {
  // Stationary demand that needs three layers of lead: any shorter horizon stalls.
  StepState s;
  s.current = 1;
  s.max_step = 10;
  const std::uint32_t target = 3;
  std::uint32_t reached = 0;
  for (std::uint32_t step = 1; step <= 40; ++step) {
    if (s.current < target) s = on_stall(s);
    if (s.current == target && reached == 0) reached = step;
    if (reached) ASSERT_EQ(s.current, target) << "left the fixed point at step " << step;
  }
  EXPECT_GT(reached, 0u);
  EXPECT_LE(reached, s.stall_threshold * 2 + 1);
}

TEST(MissRate, Examples) {
  EXPECT_EQ(miss_rate({4, 4}), 0.0);
  EXPECT_DOUBLE_EQ(miss_rate({3, 4}), 0.25);
  EXPECT_EQ(miss_rate({0, 5}), 1.0);
  EXPECT_EQ(miss_rate({0, 0}), 0.0);
  EXPECT_THROW(miss_rate({5, 4}), ConfigError);
  MissStats a{1, 2};
  a += MissStats{2, 3};
  EXPECT_EQ(a, (MissStats{3, 5}));
}

TEST(MissRate, MatchesRationalOnRandomCounts) {
  Rng rng(Seed{8});
  for (int i = 0; i < 50; ++i) {
    const auto total = 1 + rng.below(1000);
    const auto sel = rng.below(total + 1);
    const moesim::testing::Rational exact(moesim::testing::BigInt(total - sel),
                                          moesim::testing::BigInt(total));
    const double want = static_cast<double>(exact.numerator()) / static_cast<double>(exact.denominator());
    EXPECT_NEAR(miss_rate({sel, total}), want, 1e-15);
  }
}

TEST(PredictionCacheTest, LeastRecentlyUsedEviction) {
  PredictionCache c(2);
  const PredictionKey a{{1}, 0, 1}, b{{1}, 0, 2}, d{{2}, 0, 1};
  c.insert(a, {ExpertId::unchecked(1, 1)});
  c.insert(b, {ExpertId::unchecked(1, 2)});
  EXPECT_TRUE(c.lookup(a).has_value());
  c.insert(d, {});
  EXPECT_FALSE(c.lookup(b).has_value());
  EXPECT_TRUE(c.lookup(a).has_value());
  EXPECT_TRUE(c.lookup(d).has_value());
  EXPECT_EQ(c.size(), 2u);
  EXPECT_EQ(c.hits(), 3u);
  EXPECT_EQ(c.misses(), 1u);
  EXPECT_THROW(PredictionCache(0), ConfigError);
}

namespace {

struct Fixture {
  TokenBatch batch{{3, 4}, 1};
  ActivationHistory history = ActivationHistory(4);
  StepState state;
  std::vector<GateDistribution> pregate;
};

}  // namespace

TEST(PredictExperts, CacheShortCircuitsTheScorer) {
  Fixture f;
  f.pregate = {GateDistribution::uniform(8)};
  PredictionCache cache;
  cache.insert(PredictionKey{{3, 4}, 0, 1}, {ExpertId::unchecked(1, 1), ExpertId::unchecked(1, 5)});
  CountingScorer scorer(std::vector<double>(8, 1.0));
  const PredictionRequest req{f.batch, 0, 4, 8, f.state, f.pregate, f.history, 2, 2};
  const auto p = predict_experts(req, &cache, &scorer);
  EXPECT_EQ(p.source, Prediction::Source::kCache);
  EXPECT_EQ(p.experts, (std::vector<ExpertId>{ExpertId::unchecked(1, 1), ExpertId::unchecked(1, 5)}));
  EXPECT_EQ(scorer.calls, 0);
}

TEST(PredictExperts, RouterTopKFallback) {
  Fixture f;
  f.pregate = {GateDistribution::softmax(std::vector<double>{0.1, 0.9, 0.3, 0.7})};
  const PredictionRequest req{f.batch, 0, 4, 4, f.state, f.pregate, f.history, 2, 2};
  const auto p = predict_experts(req, nullptr, nullptr);
  EXPECT_EQ(p.source, Prediction::Source::kRouter);
  EXPECT_EQ(p.experts, (std::vector<ExpertId>{ExpertId::unchecked(1, 1), ExpertId::unchecked(1, 3)}));
}

TEST(PredictExperts, CoversTheWholeHorizonAndCaches) {
  Fixture f;
  f.state.current = 3;
  f.state.max_step = 3;
  for (int i = 0; i < 3; ++i) f.pregate.push_back(GateDistribution::from_probs({0.1, 0.2, 0.3, 0.4}));
  PredictionCache cache;
  const PredictionRequest req{f.batch, 0, 3, 4, f.state, f.pregate, f.history, 1, 1};
  // Horizon truncates at the last layer: layers 1 and 2 only.
  const auto p = predict_experts(req, &cache, nullptr);
  EXPECT_EQ(p.experts, (std::vector<ExpertId>{ExpertId::unchecked(1, 3), ExpertId::unchecked(2, 3)}));
  EXPECT_EQ(predict_experts(req, &cache, nullptr).source, Prediction::Source::kCache);
  EXPECT_EQ(prediction_horizon(2, 3, 3), 0u);
  EXPECT_EQ(prediction_horizon(0, 3, 3), 2u);
  EXPECT_EQ(prediction_horizon(0, 1, 3), 1u);
}

TEST(PredictExperts, Errors) {
  Fixture f;
  f.state.current = 2;
  f.state.max_step = 2;
  f.pregate = {GateDistribution::uniform(4)};
  const PredictionRequest short_req{f.batch, 0, 4, 4, f.state, f.pregate, f.history, 1, 1};
  EXPECT_THROW(predict_experts(short_req, nullptr, nullptr), std::out_of_range);
  const PredictionRequest past{f.batch, 4, 4, 4, f.state, f.pregate, f.history, 1, 1};
  EXPECT_THROW(predict_experts(past, nullptr, nullptr), std::out_of_range);
}

TEST(PredictExperts, ScorerSelectionKeepsThresholdAndTopK) {
  Fixture f;
  f.pregate = {GateDistribution::uniform(6)};
  CountingScorer scorer({0.9, 0.1, 0.6, 0.2, 0.3, 0.55});
  const PredictionRequest req{f.batch, 0, 4, 6, f.state, f.pregate, f.history, 1, 1};
  auto p = predict_experts(req, nullptr, &scorer);
  EXPECT_EQ(p.source, Prediction::Source::kScorer);
  EXPECT_EQ(p.experts.size(), 3u);  // 0.9, 0.6 and 0.55 pass the 0.5 threshold
  CountingScorer low({0.1, 0.4, 0.2, 0.0, 0.3, 0.05});
  const PredictionRequest req2{f.batch, 0, 4, 6, f.state, f.pregate, f.history, 1, 2};
  p = predict_experts(req2, nullptr, &low);
  EXPECT_EQ(p.experts, (std::vector<ExpertId>{ExpertId::unchecked(1, 1), ExpertId::unchecked(1, 4)}));
}

TEST(PredictExperts, ExactForestGivesTheActualSets) {
  // A forest that memorized the trace's activation bits predicts every set exactly.
  ModelSpec m;
  m.num_layers = 6;
  m.experts_per_layer = 6;
  m.top_k = 2;
  m.vocab_size = 4;
  m.embed_dim = 2;
  const std::vector<std::vector<std::uint32_t>> actual{{0, 1}, {1, 4}, {2, 5}, {0, 3}, {3, 4}, {1, 2}};
  const auto trace = moesim::testing::manual_trace(6, actual);
  EmbeddingTable table(4, 2, {0, 0, 1, 1, 2, 2, 3, 3});
  std::vector<Sample> samples;
  for (std::uint32_t l = 0; l < 6; ++l) {
    Sample s;
    s.token_ids = trace.batch.token_ids;
    s.layer_idx = l;
    s.actual_experts = actual[l];
    s.step_size = 1;
    samples.push_back(s);
  }
  const auto set = build_features(group_requests(samples), table, m);
  ForestHyper h;
  h.num_trees = 3;
  h.bootstrap = false;
  h.min_samples_leaf = 1;
  h.max_features = static_cast<std::uint32_t>(set.layout.width());
  const auto forest = train_forest(set.features, set.labels, h, Seed{1});
  const ForestScorer scorer(forest, table, m);

  ActivationHistory history(6);
  MissStats stats;
  StepState state;
  state.max_step = 5;
  for (std::uint32_t l = 0; l + 1 < 6; ++l) {
    history[l] = actual[l];
    const std::vector<GateDistribution> pregate{GateDistribution::uniform(6)};
    const PredictionRequest req{trace.batch, l, 6, 6, state, pregate, history, 2, 2};
    const auto p = predict_experts(req, nullptr, &scorer);
    std::vector<std::uint32_t> got;
    for (const auto& e : p.experts) got.push_back(e.expert());
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, actual[l + 1]) << "layer " << l + 1;
    std::uint64_t selected = 0;
    for (auto e : actual[l + 1]) selected += std::count(got.begin(), got.end(), e);
    stats += MissStats{selected, actual[l + 1].size()};
  }
  EXPECT_EQ(miss_rate(stats), 0.0);
}

TEST(PredictExperts, OracleScorerIsExact) {
  const std::vector<std::vector<std::uint32_t>> actual{{0}, {3}, {1, 2}, {2}};
  const auto trace = moesim::testing::manual_trace(4, actual);
  const OracleScorer oracle(trace, 4);
  StepState state;
  state.current = 3;
  state.max_step = 3;
  std::vector<GateDistribution> pregate(3, GateDistribution::uniform(4));
  ActivationHistory history(4);
  const PredictionRequest req{trace.batch, 0, 4, 4, state, pregate, history, 1, 1};
  const auto p = predict_experts(req, nullptr, &oracle);
  std::vector<ExpertId> want{ExpertId::unchecked(1, 3), ExpertId::unchecked(2, 1),
                             ExpertId::unchecked(2, 2), ExpertId::unchecked(3, 2)};
  EXPECT_EQ(p.experts, want);
}
