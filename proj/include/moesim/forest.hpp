#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "moesim/core.hpp"
#include "moesim/predictor.hpp"

namespace moesim {

struct ForestHyper {
  std::uint32_t num_trees = 50;
  std::uint32_t max_depth = 12;
  std::uint32_t min_samples_leaf = 2;
  std::uint32_t max_features = 0;  // 0 selects ceil(sqrt(F))
  bool bootstrap = true;
  std::uint32_t threads = 0;       // 0 uses the hardware concurrency; result is unaffected

  bool operator==(const ForestHyper&) const = default;
};

/// Axis-aligned multi-output regression tree. Rows with x[feature] <= threshold go left.
class RegressionTree {
 public:
  struct Node {
    std::int32_t feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::uint32_t leaf = 0;     // index into the leaf table when feature == -1

    bool operator==(const Node&) const = default;
  };

  RegressionTree() = default;
  RegressionTree(std::vector<Node> nodes, std::vector<double> leaf_values, std::size_t outputs);

  /// Leaf output reached by `x`; length equals the number of outputs.
  std::span<const double> evaluate(std::span<const double> x) const;

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const std::vector<double>& leaf_values() const noexcept { return leaf_values_; }
  std::size_t depth() const;

  bool operator==(const RegressionTree&) const = default;

 private:
  std::vector<Node> nodes_;
  std::vector<double> leaf_values_;
  std::size_t outputs_ = 0;
};

/// Bootstrap ensemble of regression trees with per-split feature subsampling.
class ForestModel {
 public:
  ForestModel() = default;
  ForestModel(std::size_t inputs, std::size_t outputs, ForestHyper hyper, Seed seed,
              std::vector<RegressionTree> trees);

  std::size_t num_inputs() const noexcept { return inputs_; }
  std::size_t num_outputs() const noexcept { return outputs_; }
  const ForestHyper& hyper() const noexcept { return hyper_; }
  Seed train_seed() const noexcept { return seed_; }
  const std::vector<RegressionTree>& trees() const noexcept { return trees_; }

  /// Mean of tree outputs. Throws ConfigError on a length mismatch.
  std::vector<double> predict(std::span<const double> x) const;
  Matrix predict_all(const Matrix& features) const;

  /// Versioned little-endian binary encoding; round-trips exactly.
  void save(std::ostream& out) const;
  static ForestModel load(std::istream& in);

  bool operator==(const ForestModel&) const = default;

 private:
  std::size_t inputs_ = 0;
  std::size_t outputs_ = 0;
  ForestHyper hyper_;
  Seed seed_;
  std::vector<RegressionTree> trees_;
};

/// Minimizes squared error per split. Deterministic for a given seed regardless
/// of `hyper.threads`. Throws ConfigError on empty or mismatched inputs.
ForestModel train_forest(const Matrix& features, const Matrix& labels, const ForestHyper& hyper,
                         Seed seed);

}  // namespace moesim
