#include "moesim/predictor.hpp"

#include <algorithm>
#include <set>
#include <string>

namespace moesim {

void fill_feature_row(std::span<double> out, const FeatureLayout& layout,
                      std::span<const double> pooled_embedding, std::uint32_t step,
                      std::uint32_t layer, const ActivationHistory& history) {
  if (out.size() != layout.width()) throw ConfigError("feature row has the wrong width");
  if (pooled_embedding.size() != layout.embed_dim) {
    throw ConfigError("pooled embedding has the wrong dimension");
  }
  std::fill(out.begin(), out.end(), 0.0);
  std::copy(pooled_embedding.begin(), pooled_embedding.end(), out.begin());
  out[layout.step_column()] = static_cast<double>(step);
  out[layout.layer_column()] = static_cast<double>(layer);
  if (step > layer) return;
  const std::uint32_t known_through = layer - step;
  const auto limit = std::min<std::size_t>(history.size(), std::size_t{known_through} + 1);
  for (std::uint32_t l = 0; l < limit; ++l) {
    for (auto e : history[l]) {
      if (e < layout.experts_per_layer) out[layout.prev_act_column(l, e)] = 1.0;
    }
  }
}

RequestGroups group_requests(std::span<const Sample> samples) {
  RequestGroups groups;
  for (const auto& s : samples) {
    groups[GroupKey{s.token_ids, s.step_size}].push_back(s);
  }
  for (auto& [key, members] : groups) {
    std::stable_sort(members.begin(), members.end(),
                     [](const Sample& a, const Sample& b) { return a.layer_idx < b.layer_idx; });
    for (std::size_t i = 1; i < members.size(); ++i) {
      if (members[i].layer_idx == members[i - 1].layer_idx) {
        throw ConfigError("duplicate record for layer " + std::to_string(members[i].layer_idx) +
                          " and step size " + std::to_string(key.step_size) +
                          " of one token sequence (lines " +
                          std::to_string(members[i - 1].line) + " and " +
                          std::to_string(members[i].line) + ")");
      }
    }
  }
  return groups;
}

TrainingSet build_features(const RequestGroups& groups, const EmbeddingTable& table,
                           const ModelSpec& model) {
  if (table.dim() != model.embed_dim) {
    throw ConfigError("embedding table dimension does not match the model");
  }
  TrainingSet set;
  set.layout = FeatureLayout::of(model);
  std::size_t n = 0;
  for (const auto& [key, members] : groups) n += members.size();
  set.features = Matrix(n, set.layout.width());
  set.labels = Matrix(n, model.experts_per_layer);
  set.pregate = Matrix(n, model.experts_per_layer);

  // A pass may be logged under several step sizes; every record of the same
  // token sequence contributes to one shared history.
  std::map<std::vector<std::uint32_t>, ActivationHistory> histories;
  for (const auto& [key, members] : groups) {
    auto& h = histories[key.token_ids];
    h.resize(model.num_layers);
    for (const auto& s : members) {
      if (s.layer_idx >= model.num_layers) throw ConfigError("sample layer outside the model");
      h[s.layer_idx] = s.actual_experts;
    }
  }

  std::size_t row = 0;
  for (const auto& [key, members] : groups) {
    for (auto t : key.token_ids) {
      if (t >= table.vocab_size()) {
        throw ConfigError("token id " + std::to_string(t) + " >= vocab size " +
                          std::to_string(table.vocab_size()));
      }
    }
    const auto pooled = mean_pool(TokenBatch{key.token_ids, 1}, table);
    const auto& history = histories.at(key.token_ids);
    for (const auto& s : members) {
      fill_feature_row(set.features.row(row), set.layout, pooled, key.step_size, s.layer_idx,
                       history);
      for (auto e : s.actual_experts) {
        if (e >= model.experts_per_layer) throw ConfigError("sample expert outside the model");
        set.labels.at(row, e) = 1.0;
      }
      for (auto e : s.predicted_experts) {
        if (e >= model.experts_per_layer) throw ConfigError("sample expert outside the model");
        set.pregate.at(row, e) = 1.0;
      }
      ++row;
    }
  }
  return set;
}

double mean_squared_error(const Matrix& labels, const Matrix& predictions) {
  if (labels.rows != predictions.rows || labels.cols != predictions.cols) {
    throw ConfigError("MSE operands differ in shape");
  }
  if (labels.rows == 0) throw ConfigError("MSE of an empty set");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const double d = labels.data[i] - predictions.data[i];
    total += d * d;
  }
  return total / static_cast<double>(labels.rows);
}

AccuracyReport bit_accuracy(const Matrix& scores, const Matrix& labels, const Matrix& features,
                            const FeatureLayout& layout, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  if (labels.rows == 0) throw ConfigError("accuracy of an empty evaluation set");
  if (scores.rows != labels.rows || scores.cols != labels.cols || features.rows != labels.rows) {
    throw ConfigError("accuracy operands differ in shape");
  }
  std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> tally;  // correct, total bits
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.rows; ++i) {
    const auto step = static_cast<std::uint32_t>(features.at(i, layout.step_column()));
    auto& [c, t] = tally[step];
    for (std::size_t b = 0; b < labels.cols; ++b) {
      const bool predicted = scores.at(i, b) >= threshold;
      const bool actual = labels.at(i, b) == 1.0;
      if (predicted == actual) {
        ++c;
        ++correct;
      }
      ++t;
    }
  }
  AccuracyReport report;
  report.overall = 100.0 * static_cast<double>(correct) /
                   static_cast<double>(labels.rows * labels.cols);
  for (const auto& [step, ct] : tally) {
    report.per_step[step] = 100.0 * static_cast<double>(ct.first) / static_cast<double>(ct.second);
    report.rows_per_step[step] = ct.second / labels.cols;
  }
  return report;
}

}  // namespace moesim
