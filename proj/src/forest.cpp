#include "moesim/forest.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <string>
#include <thread>

#include "moesim/rng.hpp"

namespace moesim {

RegressionTree::RegressionTree(std::vector<Node> nodes, std::vector<double> leaf_values,
                               std::size_t outputs)
    : nodes_(std::move(nodes)), leaf_values_(std::move(leaf_values)), outputs_(outputs) {
  if (nodes_.empty() || outputs_ == 0 || leaf_values_.size() % outputs_ != 0) {
    throw ConfigError("malformed regression tree");
  }
  const auto leaves = leaf_values_.size() / outputs_;
  for (const auto& n : nodes_) {
    const bool bad_leaf = n.feature < 0 && n.leaf >= leaves;
    const auto count = static_cast<std::int32_t>(nodes_.size());
    const bool bad_split =
        n.feature >= 0 && (n.left <= 0 || n.right <= 0 || n.left >= count || n.right >= count);
    if (bad_leaf || bad_split) throw ConfigError("malformed regression tree node");
  }
}

std::span<const double> RegressionTree::evaluate(std::span<const double> x) const {
  std::size_t i = 0;
  while (nodes_[i].feature >= 0) {
    const auto& n = nodes_[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left
                                                                                       : n.right);
  }
  return std::span<const double>(leaf_values_).subspan(nodes_[i].leaf * outputs_, outputs_);
}

std::size_t RegressionTree::depth() const {
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
  std::size_t deepest = 0;
  while (!stack.empty()) {
    auto [i, d] = stack.back();
    stack.pop_back();
    deepest = std::max(deepest, d);
    if (nodes_[i].feature >= 0) {
      stack.emplace_back(static_cast<std::size_t>(nodes_[i].left), d + 1);
      stack.emplace_back(static_cast<std::size_t>(nodes_[i].right), d + 1);
    }
  }
  return deepest;
}

ForestModel::ForestModel(std::size_t inputs, std::size_t outputs, ForestHyper hyper, Seed seed,
                         std::vector<RegressionTree> trees)
    : inputs_(inputs), outputs_(outputs), hyper_(hyper), seed_(seed), trees_(std::move(trees)) {
  if (trees_.empty()) throw ConfigError("forest has no trees");
}

std::vector<double> ForestModel::predict(std::span<const double> x) const {
  if (x.size() != inputs_) {
    throw ConfigError("feature row has length " + std::to_string(x.size()) + ", model expects " +
                      std::to_string(inputs_));
  }
  std::vector<double> out(outputs_, 0.0);
  for (const auto& tree : trees_) {
    const auto leaf = tree.evaluate(x);
    for (std::size_t m = 0; m < outputs_; ++m) out[m] += leaf[m];
  }
  const double scale = 1.0 / static_cast<double>(trees_.size());
  for (auto& v : out) v *= scale;
  return out;
}

Matrix ForestModel::predict_all(const Matrix& features) const {
  Matrix out(features.rows, outputs_);
  for (std::size_t i = 0; i < features.rows; ++i) {
    const auto p = predict(features.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

namespace {

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& x, const Matrix& y, const ForestHyper& hyper, std::size_t mtry,
              Seed seed)
      : x_(x), y_(y), hyper_(hyper), mtry_(mtry), rng_(seed) {}

  RegressionTree build() {
    const std::size_t n = x_.rows;
    rows_.resize(n);
    if (hyper_.bootstrap) {
      for (auto& r : rows_) r = static_cast<std::uint32_t>(rng_.below(n));
    } else {
      for (std::size_t i = 0; i < n; ++i) rows_[i] = static_cast<std::uint32_t>(i);
    }
    features_.resize(x_.cols);
    for (std::size_t f = 0; f < x_.cols; ++f) features_[f] = static_cast<std::uint32_t>(f);
    sums_.resize(y_.cols);
    left_.resize(y_.cols);
    grow(0, n, 0);
    return RegressionTree(std::move(nodes_), std::move(leaves_), y_.cols);
  }

 private:
  struct Split {
    std::int32_t feature = -1;
    double threshold = 0.0;
    double score = -INFINITY;
  };

  std::int32_t grow(std::size_t begin, std::size_t end, std::uint32_t depth) {
    const auto index = static_cast<std::int32_t>(nodes_.size());
    nodes_.emplace_back();
    const std::size_t n = end - begin;
    const std::size_t outputs = y_.cols;

    std::fill(sums_.begin(), sums_.end(), 0.0);
    double sum_sq = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto y = y_.row(rows_[i]);
      for (std::size_t m = 0; m < outputs; ++m) {
        sums_[m] += y[m];
        sum_sq += y[m] * y[m];
      }
    }
    double parent_score = 0.0;
    for (double s : sums_) parent_score += s * s / static_cast<double>(n);
    const double impurity = sum_sq - parent_score;

    Split split;
    if (depth < hyper_.max_depth && n >= 2 * std::size_t{hyper_.min_samples_leaf} &&
        impurity > 1e-12) {
      split = best_split(begin, end, parent_score);
    }
    if (split.feature < 0 || split.score <= parent_score + 1e-12 * std::max(1.0, parent_score)) {
      make_leaf(index, n);
      return index;
    }

    const auto f = static_cast<std::size_t>(split.feature);
    const auto mid = std::stable_partition(rows_.begin() + static_cast<std::ptrdiff_t>(begin),
                                           rows_.begin() + static_cast<std::ptrdiff_t>(end),
                                           [&](std::uint32_t r) {
                                             return x_.at(r, f) <= split.threshold;
                                           }) -
                     rows_.begin();
    nodes_[static_cast<std::size_t>(index)].feature = split.feature;
    nodes_[static_cast<std::size_t>(index)].threshold = split.threshold;
    const auto left = grow(begin, static_cast<std::size_t>(mid), depth + 1);
    const auto right = grow(static_cast<std::size_t>(mid), end, depth + 1);
    nodes_[static_cast<std::size_t>(index)].left = left;
    nodes_[static_cast<std::size_t>(index)].right = right;
    return index;
  }

  void make_leaf(std::int32_t index, std::size_t n) {
    auto& node = nodes_[static_cast<std::size_t>(index)];
    node.feature = -1;
    node.leaf = static_cast<std::uint32_t>(leaves_.size() / y_.cols);
    for (double s : sums_) leaves_.push_back(s / static_cast<double>(n));
  }

  // Candidate features are drawn without replacement; constant features do not
  // count toward the mtry budget, so sparse indicator columns do not starve a node.
  Split best_split(std::size_t begin, std::size_t end, double parent_score) {
    const std::size_t n = end - begin;
    const std::size_t outputs = y_.cols;
    const std::size_t min_leaf = std::max<std::size_t>(1, hyper_.min_samples_leaf);
    Split best;
    best.score = parent_score;
    std::size_t evaluated = 0;
    std::size_t remaining = features_.size();
    order_.resize(n);
    while (evaluated < mtry_ && remaining > 0) {
      const auto pick = rng_.below(remaining);
      std::swap(features_[pick], features_[remaining - 1]);
      const auto f = features_[--remaining];

      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = rows_[begin + i];
        const double v = x_.at(r, f);
        order_[i] = {v, r};
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (!(lo < hi)) continue;
      ++evaluated;
      std::sort(order_.begin(), order_.end());

      std::fill(left_.begin(), left_.end(), 0.0);
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const auto y = y_.row(order_[i].second);
        for (std::size_t m = 0; m < outputs; ++m) left_[m] += y[m];
        const std::size_t nl = i + 1;
        const std::size_t nr = n - nl;
        if (nl < min_leaf) continue;
        if (nr < min_leaf) break;
        if (order_[i].first == order_[i + 1].first) continue;
        double score = 0.0;
        for (std::size_t m = 0; m < outputs; ++m) {
          const double r = sums_[m] - left_[m];
          score += left_[m] * left_[m] / static_cast<double>(nl) +
                   r * r / static_cast<double>(nr);
        }
        if (score > best.score) {
          best.score = score;
          best.feature = static_cast<std::int32_t>(f);
          const double a = order_[i].first;
          const double b = order_[i + 1].first;
          double t = a + (b - a) / 2.0;
          if (!(t < b)) t = a;
          best.threshold = t;
        }
      }
    }
    // Restore the canonical order so draws at the next node do not depend on
    // how this node's loop ended.
    for (std::size_t f = 0; f < features_.size(); ++f) features_[f] = static_cast<std::uint32_t>(f);
    return best;
  }

  const Matrix& x_;
  const Matrix& y_;
  const ForestHyper& hyper_;
  std::size_t mtry_;
  Rng rng_;
  std::vector<std::uint32_t> rows_;
  std::vector<std::uint32_t> features_;
  std::vector<std::pair<double, std::uint32_t>> order_;
  std::vector<double> sums_;
  std::vector<double> left_;
  std::vector<RegressionTree::Node> nodes_;
  std::vector<double> leaves_;
};

}  // namespace

ForestModel train_forest(const Matrix& features, const Matrix& labels, const ForestHyper& hyper,
                         Seed seed) {
  if (features.rows == 0) throw ConfigError("cannot train on an empty dataset");
  if (features.rows != labels.rows) {
    throw ConfigError("feature rows (" + std::to_string(features.rows) + ") != label rows (" +
                      std::to_string(labels.rows) + ")");
  }
  if (features.cols == 0 || labels.cols == 0) throw ConfigError("dataset has no columns");
  if (hyper.num_trees == 0) throw ConfigError("num_trees must be >= 1");
  if (hyper.min_samples_leaf == 0) throw ConfigError("min_samples_leaf must be >= 1");

  std::size_t mtry = hyper.max_features;
  if (mtry == 0) mtry = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(features.cols))));
  mtry = std::clamp<std::size_t>(mtry, 1, features.cols);

  std::vector<RegressionTree> trees(hyper.num_trees);
  unsigned workers = hyper.threads ? hyper.threads : std::thread::hardware_concurrency();
  workers = std::clamp<unsigned>(workers, 1, hyper.num_trees);
  std::atomic<std::uint32_t> next{0};
  auto work = [&] {
    for (auto t = next.fetch_add(1); t < hyper.num_trees; t = next.fetch_add(1)) {
      TreeBuilder builder(features, labels, hyper, mtry, seed.derive(t));
      trees[t] = builder.build();
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  ForestHyper stored = hyper;
  stored.threads = 0;
  return ForestModel(features.cols, labels.cols, stored, seed, std::move(trees));
}

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'F', 'R', 'S', 'T', '\0'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}
void put_u32(std::ostream& out, std::uint32_t v) { put_u64(out, v); }
void put_i32(std::ostream& out, std::int32_t v) {
  put_u64(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(v)));
}
void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    throw ConfigError("forest model file is truncated");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}
std::uint32_t get_u32(std::istream& in) {
  const auto v = get_u64(in);
  if (v > UINT32_MAX) throw ConfigError("forest model field out of range");
  return static_cast<std::uint32_t>(v);
}
std::int32_t get_i32(std::istream& in) {
  return static_cast<std::int32_t>(static_cast<std::int64_t>(get_u64(in)));
}
double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

std::uint64_t get_count(std::istream& in, std::uint64_t limit) {
  const auto v = get_u64(in);
  if (v > limit) throw ConfigError("forest model count out of range");
  return v;
}

}  // namespace

void ForestModel::save(std::ostream& out) const {
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kFormatVersion);
  put_u64(out, inputs_);
  put_u64(out, outputs_);
  put_u32(out, hyper_.num_trees);
  put_u32(out, hyper_.max_depth);
  put_u32(out, hyper_.min_samples_leaf);
  put_u32(out, hyper_.max_features);
  put_u32(out, hyper_.bootstrap ? 1 : 0);
  put_u64(out, seed_.value);
  put_u64(out, trees_.size());
  for (const auto& tree : trees_) {
    put_u64(out, tree.nodes().size());
    for (const auto& n : tree.nodes()) {
      put_i32(out, n.feature);
      put_f64(out, n.threshold);
      put_i32(out, n.left);
      put_i32(out, n.right);
      put_u32(out, n.leaf);
    }
    put_u64(out, tree.leaf_values().size());
    for (double v : tree.leaf_values()) put_f64(out, v);
  }
  if (!out) throw std::runtime_error("failed to write forest model");
}

ForestModel ForestModel::load(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kMagic)) {
    throw ConfigError("not a forest model file");
  }
  const auto version = get_u32(in);
  if (version != kFormatVersion) {
    throw ConfigError("unsupported forest model version " + std::to_string(version));
  }
  constexpr std::uint64_t kLimit = 1ULL << 32;
  const auto inputs = get_count(in, kLimit);
  const auto outputs = get_count(in, kLimit);
  ForestHyper hyper;
  hyper.num_trees = get_u32(in);
  hyper.max_depth = get_u32(in);
  hyper.min_samples_leaf = get_u32(in);
  hyper.max_features = get_u32(in);
  hyper.bootstrap = get_u32(in) != 0;
  const Seed seed{get_u64(in)};
  const auto count = get_count(in, kLimit);
  std::vector<RegressionTree> trees;
  trees.reserve(count);
  for (std::uint64_t t = 0; t < count; ++t) {
    std::vector<RegressionTree::Node> nodes(get_count(in, kLimit));
    for (auto& n : nodes) {
      n.feature = get_i32(in);
      n.threshold = get_f64(in);
      n.left = get_i32(in);
      n.right = get_i32(in);
      n.leaf = get_u32(in);
      if (n.feature >= static_cast<std::int64_t>(inputs)) {
        throw ConfigError("forest model references a feature past its input width");
      }
    }
    std::vector<double> leaves(get_count(in, kLimit));
    for (auto& v : leaves) v = get_f64(in);
    trees.emplace_back(std::move(nodes), std::move(leaves), outputs);
  }
  return ForestModel(inputs, outputs, hyper, seed, std::move(trees));
}

}  // namespace moesim
