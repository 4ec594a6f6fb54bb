#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "moesim/core.hpp"

namespace moesim {

/// Fixed random V x d token embedding table, row-major.
class EmbeddingTable {
 public:
  EmbeddingTable(std::uint32_t vocab_size, std::uint32_t dim, std::vector<double> values);

  std::uint32_t vocab_size() const noexcept { return vocab_; }
  std::uint32_t dim() const noexcept { return dim_; }
  std::span<const double> row(std::uint32_t token) const;
  const std::vector<double>& values() const noexcept { return values_; }

  bool operator==(const EmbeddingTable&) const = default;

 private:
  std::uint32_t vocab_;
  std::uint32_t dim_;
  std::vector<double> values_;
};

/// Entries are i.i.d. uniform on [-1, 1).
EmbeddingTable build_embedding_table(const ModelSpec& model, Seed seed);

struct TokenBatch {
  std::vector<std::uint32_t> token_ids;
  std::uint32_t batch_size = 1;  // requests merged into this batch

  bool operator==(const TokenBatch&) const = default;
};

/// Throws ConfigError when the batch is empty or references a token >= vocab_size.
void check_batch(const TokenBatch& batch, std::uint32_t vocab_size);

/// Probability vector over the experts of one layer.
class GateDistribution {
 public:
  GateDistribution() = default;

  /// Throws ConfigError unless entries are >= 0 and sum to 1 within 1e-9.
  static GateDistribution from_probs(std::vector<double> probs);
  static GateDistribution softmax(std::span<const double> logits, double scale = 1.0);
  static GateDistribution uniform(std::size_t num_experts);

  std::span<const double> probs() const noexcept { return probs_; }
  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }

  bool operator==(const GateDistribution&) const = default;

 private:
  std::vector<double> probs_;
};

/// Indices of the k largest scores, descending; ties go to the lower index.
std::vector<std::uint32_t> top_k_indices(std::span<const double> scores, std::size_t k);

/// Sum over unordered token pairs of the Euclidean distance between embeddings.
double token_diversity(const TokenBatch& batch, const EmbeddingTable& table);

/// Row mean of the batch's embeddings.
std::vector<double> mean_pool(const TokenBatch& batch, const EmbeddingTable& table);

struct TraceGenConfig {
  double persistence = 0.8;        // layer-to-layer correlation of routing logits, in [0, 1]
  double gate_sharpness = 3.0;     // inverse softmax temperature
  double popularity_weight = 0.7;  // variance share of the per-layer expert popularity
  double token_affinity = 0.5;     // variance share of the initial state set by the tokens
  double group_radius = -1.0;      // < 0 selects 0.5 * sqrt(2d/3)
  std::uint32_t max_groups = 8;
  Seed router_seed{0x7e57'a11c'e5ee'd000ULL};  // shared across traces: the "router weights"

  void check() const;
};

/// Leader clustering of tokens by embedding distance; returns a group index per token.
/// Identical tokens always share a group. At most `max_groups` groups are formed.
std::vector<std::uint32_t> routing_groups(const TokenBatch& batch, const EmbeddingTable& table,
                                          const TraceGenConfig& gen);

/// Ground-truth activations of one forward pass.
struct ActivationTrace {
  TokenBatch batch;
  std::vector<std::vector<std::uint32_t>> per_layer_actual;  // sorted, deduplicated
  std::vector<GateDistribution> per_layer_gate;               // token-weighted batch gate
  std::vector<std::uint32_t> token_group;
  std::vector<std::vector<GateDistribution>> group_gate;           // [layer][group]
  std::vector<std::vector<std::vector<std::uint32_t>>> group_actual;  // [layer][group], top-k

  std::uint32_t num_layers() const noexcept {
    return static_cast<std::uint32_t>(per_layer_actual.size());
  }
  std::uint32_t num_groups() const noexcept {
    return static_cast<std::uint32_t>(group_gate.empty() ? 0 : group_gate.front().size());
  }
  /// Tokens of the batch belonging to routing group `group`.
  std::vector<std::uint32_t> group_tokens(std::uint32_t group) const;
};

ActivationTrace generate_trace(const ModelSpec& model, const TokenBatch& batch,
                               const EmbeddingTable& table, const TraceGenConfig& gen, Seed seed);

/// Pre-gate corruption: probs' = (1 - w) * true + w * noise, noise ~ Dirichlet(concentration),
/// w(s) = 1 - exp(-decay_rate * s) unless `fixed_weight` overrides it. An infinite
/// concentration makes the noise exactly uniform.
struct NoiseConfig {
  double decay_rate = 1.0;
  double concentration = 1.0;
  std::optional<double> fixed_weight;

  double weight(std::uint32_t horizon) const;
  void check() const;
};

/// Noisy estimate, available at `from_layer`, of the gate at `from_layer + horizon`.
/// Throws std::out_of_range when the target layer is past the model.
GateDistribution pregate_signal(const ActivationTrace& trace, std::uint32_t from_layer,
                                std::uint32_t horizon, const NoiseConfig& noise, Seed seed);

/// Selection size used when only a router signal is available: top_k per routing group.
std::uint32_t router_selection_size(const ModelSpec& model, const ActivationTrace& trace);

struct DiversityRow {
  std::uint64_t workload = 0;
  std::uint32_t batch_size = 0;
  std::uint32_t num_tokens = 0;
  std::uint32_t num_groups = 0;
  double diversity = 0.0;
  double mean_active_experts = 0.0;
};

DiversityRow diversity_row(std::uint64_t workload, const ActivationTrace& trace,
                           const EmbeddingTable& table);

/// Columns: workload,batch_size,num_tokens,num_groups,diversity,mean_active_experts
void write_diversity_csv(std::ostream& out, std::span<const DiversityRow> rows);

}  // namespace moesim
