#include <gtest/gtest.h>

#include <sstream>

#include "moesim/engine.hpp"
#include "scenarios.hpp"
#include "trace_builder.hpp"

using namespace moesim;
using moesim::testing::manual_trace;

namespace {

constexpr Nanos kT{5'000'000};

ModelSpec tiny(std::uint32_t L, std::uint32_t M, std::uint32_t k, std::uint64_t size) {
  return ModelSpec{L, M, size, k, 16, 4};
}

/// Hardware on which one expert of `size` bytes takes `transfer` to move.
HardwareSpec link_for(std::uint64_t size, Nanos transfer, std::uint64_t memory_experts) {
  const auto bw = static_cast<std::uint64_t>(size * 1'000'000'000ULL / transfer.count());
  return HardwareSpec{bw, kT, memory_experts * size};
}

void expect_accounting(const ModelSpec& m, const HardwareSpec& hw, const SimMetrics& r) {
  EXPECT_EQ(r.total, hw.layer_compute_time * m.num_layers + r.waiting);
  EXPECT_LE(r.waiting, r.total);
  EXPECT_GE(r.waiting, Nanos::zero());
  EXPECT_GE(r.miss, Nanos::zero());
  ASSERT_EQ(r.layers.size(), m.num_layers);
  Nanos stalls{0};
  MissStats from_layers;
  for (const auto& rec : r.layers) {
    stalls += rec.stall;
    EXPECT_EQ(rec.end - rec.start >= hw.layer_compute_time, true);
    if (rec.layer > 0) from_layers += MissStats{rec.selected, rec.required};
  }
  EXPECT_EQ(stalls, r.waiting);
  EXPECT_EQ(from_layers, r.miss_stats);
}

std::vector<PolicyConfig> all_policies() {
  return {PolicyConfig::static_baseline(),
          PolicyConfig::reactive(PredictorKind::kPregate),
          PolicyConfig::fixed_interval(2, PredictorKind::kPregate),
          PolicyConfig::fixed_interval(3, PredictorKind::kOracle),
          PolicyConfig::adaptive(PredictorKind::kPregate),
          PolicyConfig::adaptive(PredictorKind::kOracle),
          PolicyConfig::adaptive(PredictorKind::kPregate, true)};
}

}  // namespace

TEST(Simulate, AllResidentNeverWaits) {
  const auto m = tiny(5, 4, 2, kMB);
  const auto hw = link_for(kMB, Nanos(7'000'000), 40);
  const auto tr = manual_trace(4, {{0, 1}, {2, 3}, {1, 2}, {0, 3}, {1, 3}});
  EngineConfig cfg;
  cfg.cold_start = ColdStart::kAllResident;
  for (const auto& p : all_policies()) {
    const auto r = simulate(m, hw, tr, p, Seed{1}, cfg);
    EXPECT_EQ(r.waiting, Nanos::zero()) << p.label();
    EXPECT_EQ(r.total, kT * 5) << p.label();
    expect_accounting(m, hw, r);
  }
}

TEST(Simulate, ReactiveWithTransferEqualToComputeHidesEverything) {
  const auto m = tiny(4, 4, 1, kMB);
  const auto hw = link_for(kMB, kT, 8);
  const auto tr = manual_trace(4, {{0}, {1}, {2}, {3}});
  EngineConfig cfg;
  cfg.cold_start = ColdStart::kPrefetched;
  const auto r = simulate(m, hw, tr, PolicyConfig::reactive(PredictorKind::kOracle), Seed{1}, cfg);
  EXPECT_EQ(r.waiting, Nanos::zero());
  EXPECT_EQ(r.total, kT * 4);
}

TEST(Simulate, ReactiveWithDoubleTransferWaitsOneLayerEach) {
  // Each fetch starts when the previous layer starts and needs 2T: every layer
  // after the first waits T.
  const auto m = tiny(4, 4, 1, kMB);
  const auto hw = link_for(kMB, 2 * kT, 8);
  ASSERT_EQ(swap_in_latency(1, m, hw.link_bandwidth_bytes_per_sec), 2 * kT);
  const auto tr = manual_trace(4, {{0}, {1}, {2}, {3}});
  EngineConfig cfg;
  cfg.cold_start = ColdStart::kPrefetched;
  const auto r = simulate(m, hw, tr, PolicyConfig::reactive(PredictorKind::kOracle), Seed{1}, cfg);
  EXPECT_EQ(r.waiting, 3 * kT);
  EXPECT_EQ(r.total, 7 * kT);
  EXPECT_EQ(r.miss, Nanos::zero());
  for (std::uint32_t l = 1; l < 4; ++l) EXPECT_EQ(r.layers[l].stall, kT);
}

TEST(Simulate, AdaptiveOracleOnlyPaysTheColdStart) {
  const auto m = tiny(6, 4, 1, 4 * kMB);
  const auto hw = link_for(4 * kMB, Nanos(4'000'000), 24);
  const auto tr = manual_trace(4, {{2}, {0}, {3}, {1}, {1}, {0}});
  const auto r = simulate(m, hw, tr, PolicyConfig::adaptive(PredictorKind::kOracle), Seed{3});
  EXPECT_EQ(r.waiting, swap_in_latency(1, m, hw.link_bandwidth_bytes_per_sec));
  EXPECT_EQ(r.layers[0].stall, r.waiting);
  EXPECT_EQ(r.miss, Nanos::zero());
  EXPECT_EQ(miss_rate(r.miss_stats), 0.0);
  expect_accounting(m, hw, r);
}

TEST(Simulate, StaticFetchesOnDemand) {
  const auto m = tiny(3, 4, 1, kMB);
  const auto hw = link_for(kMB, Nanos(2'000'000), 8);
  const auto tr = manual_trace(4, {{0}, {1}, {2}});
  const auto r = simulate(m, hw, tr, PolicyConfig::static_baseline(), Seed{1});
  EXPECT_EQ(r.waiting, Nanos(6'000'000));
  // The first layer's wait is a cold start; the later two count as misses.
  EXPECT_EQ(r.miss, Nanos(4'000'000));
  EXPECT_EQ(r.final_step, 0u);
  EXPECT_EQ(miss_rate(r.miss_stats), 1.0);
}

TEST(Simulate, MismatchedTraceRejected) {
  const auto m = tiny(3, 4, 1, kMB);
  const auto hw = link_for(kMB, kT, 8);
  EXPECT_THROW(simulate(m, hw, manual_trace(4, {{0}, {1}}), PolicyConfig::static_baseline(), Seed{1}),
               ConfigError);
  EXPECT_THROW(simulate(m, hw, manual_trace(5, {{0}, {1}, {2}}), PolicyConfig::static_baseline(), Seed{1}),
               ConfigError);
  EXPECT_THROW(simulate(m, hw, manual_trace(4, {{0}, {1}, {2}}),
                        PolicyConfig::adaptive(PredictorKind::kForest), Seed{1}),
               ConfigError);
}

TEST(Simulate, LayerLargerThanMemoryFails) {
  const auto m = tiny(2, 4, 3, kMB);
  const auto hw = link_for(kMB, kT, 2);
  EXPECT_THROW(simulate(m, hw, manual_trace(4, {{0, 1, 2}, {1}}), PolicyConfig::static_baseline(), Seed{1}),
               std::runtime_error);
}

TEST(Simulate, EventsAreTimeOrdered) {
  const auto m = moesim::testing::reference_model();
  const auto hw = moesim::testing::reference_hardware();
  const auto tr = moesim::testing::reference_workloads(1).front();
  EngineConfig cfg;
  cfg.record_events = true;
  cfg.record_cache_events = true;
  const auto r = simulate(m, hw, tr, PolicyConfig::adaptive(PredictorKind::kPregate, true), Seed{7}, cfg);
  ASSERT_FALSE(r.events.empty());
  for (std::size_t i = 1; i < r.events.size(); ++i) {
    EXPECT_LE(r.events[i - 1].time, r.events[i].time);
    EXPECT_EQ(r.events[i].sequence, i);
  }
  EXPECT_FALSE(r.cache_events.empty());
  std::ostringstream out;
  write_events_csv(out, r.events);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')),
            "seq,time_ns,kind,layer,group,expert_layer,expert,priority,direction");
}

TEST(Simulate, DeterministicUnderSeed) {
  const auto m = moesim::testing::reference_model();
  const auto hw = moesim::testing::reference_hardware();
  const auto tr = moesim::testing::reference_workloads(1).front();
  EngineConfig cfg;
  cfg.record_events = true;
  for (const auto& p : all_policies()) {
    EXPECT_EQ(simulate(m, hw, tr, p, Seed{9}, cfg), simulate(m, hw, tr, p, Seed{9}, cfg)) << p.label();
  }
}

TEST(Simulate, AccountingHoldsAcrossPoliciesAndSeeds) {
  const auto m = moesim::testing::reference_model();
  const auto traces = moesim::testing::reference_workloads(4);
  for (std::uint64_t mem : {1 * kGB, 2 * kGB}) {
    const auto hw = moesim::testing::reference_hardware(mem);
    for (const auto& tr : traces) {
      for (const auto& p : all_policies()) {
        const auto r = simulate(m, hw, tr, p, Seed{7});
        expect_accounting(m, hw, r);
        // One link, one transfer at a time.
        EXPECT_LE(r.link_busy, r.total);
        EXPECT_EQ(r.link_busy, swap_in_latency(1, m, hw.link_bandwidth_bytes_per_sec) *
                                   static_cast<std::int64_t>(r.transfers_in + r.transfers_out));
      }
    }
  }
}

TEST(Simulate, MoreBandwidthNeverWaitsLonger) {
  // Policies whose horizon does not react to stalls. With a noisy predictor the
  // adaptive horizon shrinks on a faster link and coverage drops with it, so
  // that combination is excluded.
  const auto m = moesim::testing::reference_model();
  const auto traces = moesim::testing::reference_workloads(6);
  auto policies = all_policies();
  std::erase_if(policies, [](const PolicyConfig& p) {
    return p.strategy == Strategy::kAdaptive && p.predictor != PredictorKind::kOracle;
  });
  for (const auto& p : policies) {
    for (const auto& tr : traces) {
      Nanos prev = Nanos::max();
      for (std::uint64_t gbps : {8, 16, 32, 64, 128, 256}) {
        auto hw = moesim::testing::reference_hardware();
        hw.link_bandwidth_bytes_per_sec = gbps * kGB;
        const auto w = simulate(m, hw, tr, p, Seed{7}).waiting;
        EXPECT_LE(w, prev) << p.label() << " at " << gbps << " GB/s";
        prev = w;
      }
    }
  }
}

TEST(Simulate, RoutingNeverWaitsLonger) {
  const auto m = moesim::testing::reference_model();
  const auto hw = moesim::testing::reference_hardware();
  const auto traces = moesim::testing::reference_workloads(8);
  for (auto p : all_policies()) {
    for (const auto& tr : traces) {
      p.cache_aware_routing = false;
      const auto off = simulate(m, hw, tr, p, Seed{7});
      p.cache_aware_routing = true;
      const auto on = simulate(m, hw, tr, p, Seed{7});
      EXPECT_LE(on.waiting, off.waiting) << p.label();
    }
  }
}

TEST(RouteBatch, Examples) {
  auto id = [](std::uint32_t e) { return ExpertId::unchecked(0, e); };
  const std::vector<RoutingGroup> g{{0, {id(0), id(1)}}, {1, {id(2)}}, {2, {id(3)}}};
  const auto all = route_batch(g, [](ExpertId) { return true; });
  EXPECT_EQ(all.order, (std::vector<std::uint32_t>{0, 1, 2}));
  EXPECT_TRUE(all.deferred_missing.empty());

  const auto first_missing = route_batch(g, [&](ExpertId e) { return e != id(1); });
  EXPECT_EQ(first_missing.order, (std::vector<std::uint32_t>{1, 2, 0}));
  EXPECT_EQ(first_missing.deferred_missing, (std::vector<ExpertId>{id(1)}));

  const auto none = route_batch(g, [](ExpertId) { return false; });
  EXPECT_EQ(none.order, (std::vector<std::uint32_t>{0, 1, 2}));
  EXPECT_EQ(none.deferred_missing, (std::vector<ExpertId>{id(0), id(1), id(2), id(3)}));

  EXPECT_THROW(route_batch({}, [](ExpertId) { return true; }), ConfigError);
}

TEST(Comparison, SinglePolicyHasNoReductions) {
  const auto m = moesim::testing::reference_model();
  const auto hw = moesim::testing::reference_hardware();
  const auto traces = moesim::testing::reference_workloads(2);
  const std::vector<PolicyConfig> one{PolicyConfig::static_baseline()};
  const auto t = run_comparison(m, hw, traces, one, Seed{1});
  ASSERT_EQ(t.rows.size(), 2u);
  for (const auto& r : t.rows) EXPECT_FALSE(r.reduction_pct.has_value());
  EXPECT_FALSE(t.summary[0].reduction_pct.has_value());
}

TEST(Comparison, IdenticalPoliciesReduceNothing) {
  const auto m = moesim::testing::reference_model();
  const auto hw = moesim::testing::reference_hardware();
  const auto traces = moesim::testing::reference_workloads(2);
  const std::vector<PolicyConfig> two{PolicyConfig::adaptive(PredictorKind::kPregate),
                                      PolicyConfig::adaptive(PredictorKind::kPregate)};
  const auto t = run_comparison(m, hw, traces, two, Seed{1});
  for (const auto& r : t.rows) {
    if (r.policy == 1) EXPECT_EQ(*r.reduction_pct, 0.0);
  }
  EXPECT_EQ(*t.summary[1].reduction_pct, 0.0);
}

TEST(Comparison, PairedAndThreadIndependent) {
  const auto m = moesim::testing::reference_model();
  const auto hw = moesim::testing::reference_hardware();
  const auto traces = moesim::testing::reference_workloads(3);
  const std::vector<PolicyConfig> pols{PolicyConfig::static_baseline(),
                                       PolicyConfig::adaptive(PredictorKind::kOracle)};
  const auto a = run_comparison(m, hw, traces, pols, Seed{1}, {}, {}, 1);
  const auto b = run_comparison(m, hw, traces, pols, Seed{1}, {}, {}, 4);
  std::ostringstream ca, cb;
  write_comparison_csv(ca, a);
  write_comparison_csv(cb, b);
  EXPECT_EQ(ca.str(), cb.str());
  ASSERT_EQ(a.rows.size(), 6u);
  for (std::size_t w = 0; w < 3; ++w) {
    const auto& base = a.rows[2 * w].metrics;
    const auto& ad = a.rows[2 * w + 1].metrics;
    EXPECT_EQ(a.rows[2 * w].workload, w);
    const auto direct = simulate(m, hw, traces[w], pols[1], Seed{1}.derive(w));
    EXPECT_EQ(direct, ad);
    EXPECT_NEAR(*a.rows[2 * w + 1].reduction_pct,
                reduction_pct(base.waiting + base.miss, ad.waiting + ad.miss), 1e-12);
  }
  EXPECT_EQ(reduction_pct(Nanos(200), Nanos(50)), 75.0);
  EXPECT_EQ(reduction_pct(Nanos(0), Nanos(50)), 0.0);
}

TEST(Comparison, MetricsCsvShape) {
  const auto m = tiny(3, 4, 1, kMB);
  const auto hw = link_for(kMB, Nanos(2'000'000), 8);
  const std::vector<ActivationTrace> traces{manual_trace(4, {{0}, {1}, {2}})};
  const std::vector<PolicyConfig> pols{PolicyConfig::static_baseline()};
  const auto t = run_comparison(m, hw, traces, pols, Seed{1});
  std::ostringstream out;
  write_metrics_csv(out, t.rows);
  EXPECT_EQ(out.str(),
            "policy,workload,waiting_ns,miss_ns,total_ns,final_S,hit_rate\n"
            "static,0,6000000,4000000,21000000,0,0.000000\n");
}

TEST(ActivationExport, OneRecordPerLayer) {
  const auto m = moesim::testing::reference_model();
  const auto hw = moesim::testing::reference_hardware();
  const auto tr = moesim::testing::reference_workloads(1).front();
  const auto r = simulate(m, hw, tr, PolicyConfig::adaptive(PredictorKind::kPregate), Seed{7});
  const auto log = export_activation_log(tr, r);
  ASSERT_EQ(log.size(), m.num_layers);
  EXPECT_TRUE(log[0].predicted_experts.empty());
  for (std::uint32_t l = 0; l < m.num_layers; ++l) {
    EXPECT_EQ(log[l].layer_idx, l);
    EXPECT_EQ(log[l].actual_experts, tr.per_layer_actual[l]);
    EXPECT_GE(log[l].step_size, 1u);
    EXPECT_EQ(log[l].token_ids, tr.batch.token_ids);
  }
  for (std::uint32_t l = 1; l < m.num_layers; ++l) EXPECT_FALSE(log[l].predicted_experts.empty());
}

TEST(PolicyConfigTest, LabelsAndParsing) {
  EXPECT_EQ(PolicyConfig::adaptive(PredictorKind::kOracle, true).label(), "adaptive/oracle+routing");
  EXPECT_EQ(PolicyConfig::fixed_interval(2, PredictorKind::kPregate).label(), "fixed_interval(2)/pregate");
  EXPECT_EQ(PolicyConfig::static_baseline().label(), "static");
  EXPECT_THROW(PolicyConfig::fixed_interval(0, PredictorKind::kPregate).check(), ConfigError);
  EXPECT_EQ(parse_strategy("fixed_interval"), Strategy::kFixedInterval);
  EXPECT_EQ(parse_predictor("forest"), PredictorKind::kForest);
  EXPECT_FALSE(parse_strategy("bogus").has_value());
  EXPECT_TRUE(PolicyConfig::adaptive(PredictorKind::kPregate).uses_tiers());
  EXPECT_FALSE(PolicyConfig::static_baseline().uses_tiers());
}
