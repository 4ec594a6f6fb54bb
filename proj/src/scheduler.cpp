#include "moesim/scheduler.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace moesim {

void StepState::check() const {
  if (min_step < 1) throw ConfigError("min step must be >= 1");
  if (min_step > max_step) throw ConfigError("min step exceeds max step");
  if (current < min_step || current > max_step) throw ConfigError("step outside its bounds");
  if (stall_threshold < 1 || overfetch_threshold < 1) {
    throw ConfigError("feedback thresholds must be >= 1");
  }
}

StepState on_stall(StepState s) {
  if (++s.stall_counter >= s.stall_threshold) {
    s.stall_counter = 0;
    s.current = std::min(s.current + 1, s.max_step);
  }
  return s;
}

StepState on_overfetch(StepState s) {
  if (++s.overfetch_counter >= s.overfetch_threshold) {
    s.overfetch_counter = 0;
    s.current = std::max(s.current > 0 ? s.current - 1 : 0, s.min_step);
  }
  return s;
}

std::uint32_t expected_expert_count(const GateDistribution& gate, double cum_threshold) {
  if (!(cum_threshold > 0.0 && cum_threshold <= 1.0)) {
    throw ConfigError("cumulative threshold must lie in (0, 1]");
  }
  const auto order = top_k_indices(gate.probs(), gate.size());
  double mass = 0.0;
  std::uint32_t count = 0;
  for (auto e : order) {
    mass += gate[e];
    ++count;
    // Allow for the rounding of a distribution that sums to 1 within 1e-9.
    if (mass >= cum_threshold - 1e-12) break;
  }
  return std::max<std::uint32_t>(count, 1);
}

std::uint32_t compute_step(std::uint64_t expected_experts, std::uint64_t expert_size_bytes,
                           std::uint64_t bandwidth_bytes_per_sec, Nanos layer_time,
                           StepBounds bounds) {
  if (bounds.min_step > bounds.max_step) throw ConfigError("min step exceeds max step");
  if (bandwidth_bytes_per_sec == 0 || layer_time <= Nanos::zero()) {
    throw ConfigError("bandwidth and layer time must be positive");
  }
  using u128 = unsigned __int128;
  const u128 num = static_cast<u128>(expected_experts) * expert_size_bytes * 1'000'000'000ULL;
  const u128 den = static_cast<u128>(bandwidth_bytes_per_sec) *
                   static_cast<std::uint64_t>(layer_time.count());
  const u128 raw = (num + den - 1) / den;
  if (raw < bounds.min_step) return bounds.min_step;
  if (raw > bounds.max_step) return bounds.max_step;
  return static_cast<std::uint32_t>(raw);
}

std::uint32_t compute_step(std::uint64_t expected_experts, const ModelSpec& model,
                           const HardwareSpec& hw, StepBounds bounds) {
  return compute_step(expected_experts, model.expert_size_bytes, hw.link_bandwidth_bytes_per_sec,
                      hw.layer_compute_time, bounds);
}

Nanos swap_in_latency(std::uint64_t num_experts, const ModelSpec& model,
                      std::uint64_t bandwidth_bytes_per_sec) {
  if (bandwidth_bytes_per_sec == 0) throw ConfigError("bandwidth must be positive");
  using u128 = unsigned __int128;
  const u128 num = static_cast<u128>(num_experts) * model.expert_size_bytes * 1'000'000'000ULL;
  const u128 ns = (num + bandwidth_bytes_per_sec - 1) / bandwidth_bytes_per_sec;
  return Nanos(static_cast<std::int64_t>(ns));
}

double miss_rate(const MissStats& stats) {
  if (stats.n_total == 0) return 0.0;
  if (stats.n_selected > stats.n_total) throw ConfigError("more experts selected than required");
  return static_cast<double>(stats.n_total - stats.n_selected) / static_cast<double>(stats.n_total);
}

std::size_t PredictionKeyHash::operator()(const PredictionKey& k) const noexcept {
  std::uint64_t h = splitmix64(k.layer) ^ splitmix64(std::uint64_t{k.step} << 32);
  for (auto t : k.token_ids) h = splitmix64(h ^ t);
  return static_cast<std::size_t>(h);
}

PredictionCache::PredictionCache(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw ConfigError("prediction cache capacity must be >= 1");
}

std::optional<std::vector<ExpertId>> PredictionCache::lookup(const PredictionKey& key) {
  const auto it = index_.find(key);
  if (it == index_.end()) {
    ++misses_;
    return std::nullopt;
  }
  ++hits_;
  order_.splice(order_.begin(), order_, it->second);
  return it->second->second;
}

void PredictionCache::insert(const PredictionKey& key, std::vector<ExpertId> experts) {
  if (const auto it = index_.find(key); it != index_.end()) {
    it->second->second = std::move(experts);
    order_.splice(order_.begin(), order_, it->second);
    return;
  }
  order_.emplace_front(key, std::move(experts));
  index_.emplace(key, order_.begin());
  while (index_.size() > capacity_) {
    index_.erase(order_.back().first);
    order_.pop_back();
  }
}

ForestScorer::ForestScorer(const ForestModel& forest, const EmbeddingTable& table,
                           const ModelSpec& model, DeltaMode mode)
    : forest_(forest), table_(table), layout_(FeatureLayout::of(model)), mode_(mode) {
  if (forest_.num_inputs() != layout_.width() ||
      forest_.num_outputs() != model.experts_per_layer) {
    throw ConfigError("forest dimensions (" + std::to_string(forest_.num_inputs()) + " -> " +
                      std::to_string(forest_.num_outputs()) + ") do not match the model (" +
                      std::to_string(layout_.width()) + " -> " +
                      std::to_string(model.experts_per_layer) + ")");
  }
  if (table_.dim() != model.embed_dim) {
    throw ConfigError("embedding table dimension does not match the model");
  }
}

std::vector<double> ForestScorer::score(const ScoreQuery& q) const {
  std::vector<double> row(layout_.width());
  const auto pooled = mean_pool(q.batch, table_);
  fill_feature_row(row, layout_, pooled, q.horizon, q.target_layer, q.history);
  auto scores = forest_.predict(row);
  if (mode_ == DeltaMode::kAdditive) {
    for (auto e : top_k_indices(q.pregate, q.router_k)) scores[e] += 1.0;
  }
  return scores;
}

OracleScorer::OracleScorer(const ActivationTrace& trace, std::uint32_t experts_per_layer)
    : trace_(trace), experts_(experts_per_layer) {}

std::vector<double> OracleScorer::score(const ScoreQuery& q) const {
  std::vector<double> bits(experts_, 0.0);
  for (auto e : trace_.per_layer_actual.at(q.target_layer)) bits.at(e) = 1.0;
  return bits;
}

std::uint32_t prediction_horizon(std::uint32_t layer, std::uint32_t step, std::uint32_t num_layers) {
  if (layer + 1 >= num_layers) return 0;
  return std::min(step, num_layers - 1 - layer);
}

namespace {

std::vector<std::uint32_t> select_scored(std::span<const double> scores, std::uint32_t min_select,
                                         double threshold) {
  const auto ranked = top_k_indices(scores, scores.size());
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (i < min_select || scores[ranked[i]] >= threshold) {
      out.push_back(ranked[i]);
    } else {
      break;
    }
  }
  return out;
}

}  // namespace

Prediction predict_experts(const PredictionRequest& r, PredictionCache* cache,
                           const ActivationScorer* scorer) {
  if (r.layer >= r.num_layers) {
    throw std::out_of_range("prediction issued from layer " + std::to_string(r.layer) +
                            " of a " + std::to_string(r.num_layers) + "-layer model");
  }
  const auto horizon = prediction_horizon(r.layer, r.state.current, r.num_layers);
  if (r.pregate.size() < horizon) {
    throw std::out_of_range("need " + std::to_string(horizon) + " pre-gate signals, got " +
                            std::to_string(r.pregate.size()));
  }
  const PredictionKey key{r.batch.token_ids, r.layer, r.state.current};
  if (cache) {
    if (auto hit = cache->lookup(key)) return Prediction{std::move(*hit), Prediction::Source::kCache};
  }

  Prediction out;
  out.source = scorer ? Prediction::Source::kScorer : Prediction::Source::kRouter;
  for (std::uint32_t j = 1; j <= horizon; ++j) {
    const std::uint32_t target = r.layer + j;
    const auto pregate = r.pregate[j - 1].probs();
    std::vector<std::uint32_t> chosen;
    if (scorer) {
      const ScoreQuery q{r.batch, target, j, pregate, r.router_k, r.history};
      const auto scores = scorer->score(q);
      if (scores.size() != r.experts_per_layer) throw ConfigError("scorer output has wrong length");
      chosen = select_scored(scores, r.min_select, r.score_threshold);
    } else {
      chosen = top_k_indices(pregate, r.router_k);
    }
    for (auto e : chosen) out.experts.push_back(ExpertId::unchecked(target, e));
  }
  if (cache) cache->insert(key, out.experts);
  return out;
}

}  // namespace moesim
