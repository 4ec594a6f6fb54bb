#pragma once

#include <cstdint>
#include <list>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "moesim/core.hpp"
#include "moesim/forest.hpp"
#include "moesim/predictor.hpp"
#include "moesim/workload.hpp"

namespace moesim {

// ---------------------------------------------------------------------------
// Step size

struct StepBounds {
  std::uint32_t min_step = 1;
  std::uint32_t max_step = 1;
};

/// Prefetch horizon plus the stall/overfetch feedback counters.
struct StepState {
  std::uint32_t current = 1;
  std::uint32_t stall_counter = 0;
  std::uint32_t overfetch_counter = 0;
  std::uint32_t stall_threshold = 3;
  std::uint32_t overfetch_threshold = 3;
  std::uint32_t min_step = 1;
  std::uint32_t max_step = 1;

  /// Throws ConfigError on empty bounds, zero thresholds or `current` out of bounds.
  void check() const;
  bool operator==(const StepState&) const = default;
};

/// Counts a stall; every `stall_threshold` stalls widen the horizon by one.
StepState on_stall(StepState state);
/// Counts an overfetch; every `overfetch_threshold` of them narrow the horizon by one.
StepState on_overfetch(StepState state);

/// Smallest prefix of experts, by descending probability (ties: lower index),
/// whose mass reaches `cum_threshold`. Always >= 1.
std::uint32_t expected_expert_count(const GateDistribution& gate, double cum_threshold);

/// clamp(ceil(experts * expert_bytes / (bandwidth * layer_time)), bounds), evaluated exactly in integers.
std::uint32_t compute_step(std::uint64_t expected_experts, std::uint64_t expert_size_bytes,
                           std::uint64_t bandwidth_bytes_per_sec, Nanos layer_time,
                           StepBounds bounds);
std::uint32_t compute_step(std::uint64_t expected_experts, const ModelSpec& model,
                           const HardwareSpec& hw, StepBounds bounds);

/// ceil(num_experts * expert_size_bytes / bandwidth) in nanoseconds.
Nanos swap_in_latency(std::uint64_t num_experts, const ModelSpec& model,
                      std::uint64_t bandwidth_bytes_per_sec);

// ---------------------------------------------------------------------------
// Miss accounting

struct MissStats {
  std::uint64_t n_selected = 0;  // required experts that were already on their way
  std::uint64_t n_total = 0;     // required experts

  MissStats& operator+=(const MissStats& o) {
    n_selected += o.n_selected;
    n_total += o.n_total;
    return *this;
  }
  bool operator==(const MissStats&) const = default;
};

/// 1 - selected/total; defined as 0 when nothing was required.
double miss_rate(const MissStats& stats);

// ---------------------------------------------------------------------------
// Prediction cache

struct PredictionKey {
  std::vector<std::uint32_t> token_ids;
  std::uint32_t layer = 0;
  std::uint32_t step = 0;

  bool operator==(const PredictionKey&) const = default;
};

struct PredictionKeyHash {
  std::size_t operator()(const PredictionKey& k) const noexcept;
};

/// LRU map from (tokens, layer, step) to a predicted expert set.
class PredictionCache {
 public:
  explicit PredictionCache(std::size_t capacity = 4096);

  /// Returns the stored set and marks it most recently used.
  std::optional<std::vector<ExpertId>> lookup(const PredictionKey& key);
  void insert(const PredictionKey& key, std::vector<ExpertId> experts);

  std::size_t size() const noexcept { return index_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  std::uint64_t hits() const noexcept { return hits_; }
  std::uint64_t misses() const noexcept { return misses_; }

 private:
  using Entry = std::pair<PredictionKey, std::vector<ExpertId>>;
  std::size_t capacity_;
  std::list<Entry> order_;  // front = most recent
  std::unordered_map<PredictionKey, std::list<Entry>::iterator, PredictionKeyHash> index_;
  std::uint64_t hits_ = 0;
  std::uint64_t misses_ = 0;
};

// ---------------------------------------------------------------------------
// Scorers

struct ScoreQuery {
  const TokenBatch& batch;
  std::uint32_t target_layer;
  std::uint32_t horizon;                // target_layer - issuing layer
  std::span<const double> pregate;      // pre-gate probabilities for the target layer
  std::uint32_t router_k;               // pre-gate selection size
  const ActivationHistory& history;     // observed activations, layers <= issuing layer
};

/// Produces per-expert activation scores for one future layer.
class ActivationScorer {
 public:
  virtual ~ActivationScorer() = default;
  virtual std::vector<double> score(const ScoreQuery& query) const = 0;
};

/// How the learned correction is combined with the pre-gate estimate.
enum class DeltaMode {
  kReplace,   // the forest was trained on activation bits; its output is the corrected score
  kAdditive,  // the forest was trained on (actual - pre-gate) bits; score = pre-gate bits + output
};

class ForestScorer final : public ActivationScorer {
 public:
  ForestScorer(const ForestModel& forest, const EmbeddingTable& table, const ModelSpec& model,
               DeltaMode mode = DeltaMode::kReplace);
  std::vector<double> score(const ScoreQuery& query) const override;

 private:
  const ForestModel& forest_;
  const EmbeddingTable& table_;
  FeatureLayout layout_;
  DeltaMode mode_;
};

/// Emits the ground-truth activation bits of a trace. Used to isolate scheduling
/// behavior from prediction error.
class OracleScorer final : public ActivationScorer {
 public:
  OracleScorer(const ActivationTrace& trace, std::uint32_t experts_per_layer);
  std::vector<double> score(const ScoreQuery& query) const override;

 private:
  const ActivationTrace& trace_;
  std::uint32_t experts_;
};

// ---------------------------------------------------------------------------
// Expert prediction

struct PredictionRequest {
  const TokenBatch& batch;
  std::uint32_t layer;                        // issuing layer
  std::uint32_t num_layers;
  std::uint32_t experts_per_layer;
  const StepState& state;
  std::span<const GateDistribution> pregate;  // one per target layer, nearest first
  const ActivationHistory& history;
  std::uint32_t router_k;        // top-k of the router signal on fallback
  std::uint32_t min_select;      // scorer path keeps at least this many per layer
  double score_threshold = 0.5;  // scorer path keeps every expert scoring at least this
};

struct Prediction {
  enum class Source { kCache, kScorer, kRouter };
  std::vector<ExpertId> experts;  // target-layer ascending, then by descending score
  Source source = Source::kRouter;
};

/// Number of future layers covered when issuing from `layer` with horizon `step`.
std::uint32_t prediction_horizon(std::uint32_t layer, std::uint32_t step, std::uint32_t num_layers);

/// Resolves predictions for layers (layer, layer + S]: cache hit, else the
/// scorer's corrected scores, else top-k of the router signal. Non-cache results
/// are inserted into the cache. Throws std::out_of_range when `layer` is past the
/// model or fewer pre-gate signals than layers to cover are supplied.
Prediction predict_experts(const PredictionRequest& request, PredictionCache* cache,
                           const ActivationScorer* scorer);

}  // namespace moesim
