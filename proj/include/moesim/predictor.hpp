#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "moesim/activation_log.hpp"
#include "moesim/core.hpp"
#include "moesim/workload.hpp"

namespace moesim {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool operator==(const Matrix&) const = default;
};

/// Column layout of a feature row: [embedding (d), step, layer, prev_act (L*M)].
struct FeatureLayout {
  std::uint32_t embed_dim = 0;
  std::uint32_t num_layers = 0;
  std::uint32_t experts_per_layer = 0;

  static FeatureLayout of(const ModelSpec& model) {
    return {model.embed_dim, model.num_layers, model.experts_per_layer};
  }
  std::size_t width() const noexcept {
    return std::size_t{embed_dim} + 2 + std::size_t{num_layers} * experts_per_layer;
  }
  std::size_t step_column() const noexcept { return embed_dim; }
  std::size_t layer_column() const noexcept { return std::size_t{embed_dim} + 1; }
  std::size_t prev_act_column(std::uint32_t layer, std::uint32_t expert) const noexcept {
    return std::size_t{embed_dim} + 2 + std::size_t{layer} * experts_per_layer + expert;
  }
};

/// Observed activations of earlier layers, indexed by layer. Layers beyond
/// `size()` or with no entry are unknown.
using ActivationHistory = std::vector<std::vector<std::uint32_t>>;

/// Fills one feature row. Only layers <= layer - step contribute prev_act bits,
/// i.e. the activations that were already observed when a prediction `step`
/// layers ahead was issued.
void fill_feature_row(std::span<double> out, const FeatureLayout& layout,
                      std::span<const double> pooled_embedding, std::uint32_t step,
                      std::uint32_t layer, const ActivationHistory& history);

struct GroupKey {
  std::vector<std::uint32_t> token_ids;
  std::uint32_t step_size = 1;

  auto operator<=>(const GroupKey&) const = default;
};

using RequestGroups = std::map<GroupKey, std::vector<Sample>>;

/// Groups by (token_ids, step_size); each group sorted by layer. A repeated
/// (token_ids, step_size, layer_idx) triple raises ConfigError.
RequestGroups group_requests(std::span<const Sample> samples);

struct TrainingSet {
  FeatureLayout layout;
  Matrix features;  // N x F
  Matrix labels;    // N x M actual activation bits
  Matrix pregate;   // N x M bits of the logged (pre-gate) prediction
};

/// One row per sample; rows follow group order, then layer order.
TrainingSet build_features(const RequestGroups& groups, const EmbeddingTable& table,
                           const ModelSpec& model);

/// Mean squared error (1/N) sum ||y - yhat||^2.
double mean_squared_error(const Matrix& labels, const Matrix& predictions);

struct AccuracyReport {
  double overall = 0.0;                          // percent of bits correct
  std::map<std::uint32_t, double> per_step;      // percent, keyed by step feature
  std::map<std::uint32_t, std::size_t> rows_per_step;
};

/// Bit b is correct iff (score_b >= threshold) == (label_b == 1).
/// `features` supplies the step column for the per-step breakdown.
AccuracyReport bit_accuracy(const Matrix& scores, const Matrix& labels, const Matrix& features,
                            const FeatureLayout& layout, double threshold);

}  // namespace moesim
