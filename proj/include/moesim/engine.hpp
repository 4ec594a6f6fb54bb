#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moesim/activation_log.hpp"
#include "moesim/core.hpp"
#include "moesim/forest.hpp"
#include "moesim/memory.hpp"
#include "moesim/scheduler.hpp"
#include "moesim/workload.hpp"

namespace moesim {

enum class Strategy : std::uint8_t { kStatic, kReactive, kFixedInterval, kAdaptive };
enum class PredictorKind : std::uint8_t { kNone, kPregate, kForest, kOracle };

const char* to_string(Strategy s);
const char* to_string(PredictorKind p);
std::optional<Strategy> parse_strategy(std::string_view text);
std::optional<PredictorKind> parse_predictor(std::string_view text);

struct PolicyConfig {
  Strategy strategy = Strategy::kStatic;
  std::uint32_t interval = 1;  // horizon of kFixedInterval
  bool cache_aware_routing = false;
  PredictorKind predictor = PredictorKind::kNone;
  std::optional<bool> tiered_cache;  // default: only the adaptive strategy uses tiers
  std::string name;                  // report label; derived when empty

  bool uses_tiers() const { return tiered_cache.value_or(strategy == Strategy::kAdaptive); }
  std::string label() const;
  /// Throws ConfigError for a zero interval.
  void check() const;

  static PolicyConfig static_baseline();
  static PolicyConfig reactive(PredictorKind predictor);
  static PolicyConfig fixed_interval(std::uint32_t step, PredictorKind predictor);
  static PolicyConfig adaptive(PredictorKind predictor, bool routing = false);
};

/// How the experts of layer 0 reach the device.
enum class ColdStart : std::uint8_t {
  kCounted,    // fetched from t = 0; the wait counts as waiting latency
  kPrefetched,  // resident before t = 0
  kAllResident  // every required expert of the pass is resident before t = 0
};

struct EngineConfig {
  NoiseConfig noise;
  double cum_threshold = 0.9;
  std::uint32_t stall_threshold = 3;
  std::uint32_t overfetch_threshold = 3;
  std::uint32_t min_step = 1;
  std::uint32_t max_step = 0;  // 0 selects L - 1
  std::size_t prediction_cache_capacity = 4096;
  double score_threshold = 0.5;
  DeltaMode delta_mode = DeltaMode::kReplace;
  ColdStart cold_start = ColdStart::kCounted;
  double bandwidth_smoothing = 0.5;
  std::optional<std::uint32_t> recent_window;  // default: the current step size
  bool record_events = false;
  bool record_cache_events = false;

  void check() const;
};

/// Trained predictor inputs; needed only by PredictorKind::kForest.
struct PredictorResources {
  const ForestModel* forest = nullptr;
  const EmbeddingTable* table = nullptr;
};

enum class EventKind : std::uint8_t {
  // Declaration order is the tie-break rank at equal timestamps.
  kTransferEnd,
  kLayerEnd,
  kGroupEnd,
  kStallEnd,
  kLayerStart,
  kPrefetchIssue,
  kStallBegin,
  kTransferStart,
};

const char* to_string(EventKind kind);

struct SimEvent {
  Nanos time{0};
  EventKind kind = EventKind::kLayerStart;
  std::uint64_t sequence = 0;
  std::uint32_t layer = 0;
  std::int32_t group = -1;             // routing group, when relevant
  std::optional<ExpertId> expert;      // transfer events
  std::optional<Priority> priority;    // transfer events
  std::optional<Direction> direction;  // transfer events

  bool operator==(const SimEvent&) const = default;
};

/// Columns: seq,time_ns,kind,layer,group,expert_layer,expert,priority,direction
void write_events_csv(std::ostream& out, std::span<const SimEvent> events);

struct LayerRecord {
  std::uint32_t layer = 0;
  std::uint32_t step = 0;  // step size in force when the layer became ready (0: none)
  Nanos ready{0};          // compute could have started
  Nanos start{0};          // first compute slice started
  Nanos end{0};
  Nanos stall{0};
  std::uint32_t required = 0;
  std::uint32_t selected = 0;  // required experts resident or in flight at `ready`
  std::vector<std::uint32_t> predicted;  // first prediction made for this layer, sorted
  std::uint32_t predicted_horizon = 0;   // how far ahead that prediction was issued
  std::vector<std::uint32_t> group_order;

  bool operator==(const LayerRecord&) const = default;
};

struct SimMetrics {
  Nanos waiting{0};  // compute stalled on experts
  Nanos miss{0};     // transfer time of required experts nobody prefetched
  Nanos total{0};
  std::vector<LayerRecord> layers;
  MissStats miss_stats;  // layers >= 1; layer 0 has no earlier signal
  std::vector<std::pair<std::uint32_t, std::uint32_t>> step_history;  // (layer, S)
  std::uint32_t final_step = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  std::uint64_t transfers_in = 0;
  std::uint64_t transfers_out = 0;
  std::uint64_t prefetches_issued = 0;
  std::uint64_t prefetches_dropped = 0;
  std::uint64_t stall_events = 0;
  std::uint64_t overfetch_events = 0;
  std::uint64_t prediction_cache_hits = 0;
  Nanos link_busy{0};
  std::vector<SimEvent> events;
  std::vector<CacheEvent> cache_events;

  double hit_rate() const;
  bool operator==(const SimMetrics&) const = default;
};

/// Runs one forward pass of `trace`. Throws ConfigError on invalid configs or a
/// trace that does not match the model, and std::runtime_error when a single
/// layer's experts cannot fit in device memory.
SimMetrics simulate(const ModelSpec& model, const HardwareSpec& hw, const ActivationTrace& trace,
                    const PolicyConfig& policy, Seed seed, const EngineConfig& config = {},
                    const PredictorResources& resources = {});

struct RoutingGroup {
  std::uint32_t id = 0;
  std::vector<ExpertId> experts;
};

struct RouteResult {
  std::vector<std::uint32_t> order;    // group ids, resident groups first
  std::vector<ExpertId> deferred_missing;  // non-resident experts of deferred groups, in order
};

/// Stable partition of groups by whether all their experts are resident.
/// Throws ConfigError when `groups` is empty.
RouteResult route_batch(std::span<const RoutingGroup> groups,
                        const std::function<bool(ExpertId)>& resident);

/// Per-layer activation records of a run, predicted vs actual, ready for training.
/// Layer 0 is logged with no prediction.
std::vector<Sample> export_activation_log(const ActivationTrace& trace, const SimMetrics& metrics);

struct ComparisonRow {
  std::uint64_t workload = 0;
  std::size_t policy = 0;
  std::string policy_label;
  SimMetrics metrics;
  std::optional<double> reduction_pct;  // of waiting + miss, against policy 0 on the same workload
};

struct ComparisonSummary {
  std::string policy_label;
  Nanos waiting{0};
  Nanos miss{0};
  Nanos total{0};
  std::optional<double> reduction_pct;  // of summed waiting + miss, against policy 0
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;  // workload-major, policy order within a workload
  std::vector<ComparisonSummary> summary;
};

/// Percentage reduction of `value` relative to `baseline`; 0 when the baseline is 0.
double reduction_pct(Nanos baseline, Nanos value);

/// Every policy runs on every workload with the same per-workload seed, so the
/// comparison is paired. Runs execute on `threads` workers (0: hardware
/// concurrency); results do not depend on the thread count.
ComparisonTable run_comparison(const ModelSpec& model, const HardwareSpec& hw,
                               std::span<const ActivationTrace> workloads,
                               std::span<const PolicyConfig> policies, Seed seed,
                               const EngineConfig& config = {},
                               const PredictorResources& resources = {}, unsigned threads = 0);

/// Columns: policy,workload,waiting_ns,miss_ns,total_ns,final_S,hit_rate
void write_metrics_csv(std::ostream& out, std::span<const ComparisonRow> rows);
/// Adds reduction_pct to the metrics columns.
void write_comparison_csv(std::ostream& out, const ComparisonTable& table);
/// Columns: layer,step,ready_ns,start_ns,end_ns,stall_ns,required,selected
void write_layers_csv(std::ostream& out, const SimMetrics& metrics);

}  // namespace moesim
