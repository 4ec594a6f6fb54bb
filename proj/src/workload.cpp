#include "moesim/workload.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include "moesim/csv.hpp"
#include "moesim/rng.hpp"

namespace moesim {

EmbeddingTable::EmbeddingTable(std::uint32_t vocab_size, std::uint32_t dim,
                               std::vector<double> values)
    : vocab_(vocab_size), dim_(dim), values_(std::move(values)) {
  if (vocab_ == 0 || dim_ == 0) throw ConfigError("embedding table needs V >= 1 and d >= 1");
  if (values_.size() != static_cast<std::size_t>(vocab_) * dim_) {
    throw ConfigError("embedding table: expected " +
                      std::to_string(static_cast<std::size_t>(vocab_) * dim_) + " values, got " +
                      std::to_string(values_.size()));
  }
}

std::span<const double> EmbeddingTable::row(std::uint32_t token) const {
  if (token >= vocab_) {
    throw std::out_of_range("token id " + std::to_string(token) + " >= vocab size " +
                            std::to_string(vocab_));
  }
  return std::span<const double>(values_).subspan(static_cast<std::size_t>(token) * dim_, dim_);
}

EmbeddingTable build_embedding_table(const ModelSpec& model, Seed seed) {
  if (model.vocab_size == 0 || model.embed_dim == 0) {
    throw ConfigError("embedding table needs V >= 1 and d >= 1");
  }
  Rng rng(seed);
  std::vector<double> values(static_cast<std::size_t>(model.vocab_size) * model.embed_dim);
  for (auto& v : values) v = rng.uniform(-1.0, 1.0);
  return EmbeddingTable(model.vocab_size, model.embed_dim, std::move(values));
}

void check_batch(const TokenBatch& batch, std::uint32_t vocab_size) {
  if (batch.token_ids.empty()) throw ConfigError("token batch is empty");
  for (auto t : batch.token_ids) {
    if (t >= vocab_size) {
      throw ConfigError("token id " + std::to_string(t) + " >= vocab size " +
                        std::to_string(vocab_size));
    }
  }
}

GateDistribution GateDistribution::from_probs(std::vector<double> probs) {
  if (probs.empty()) throw ConfigError("gate distribution is empty");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("gate probability must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("gate probabilities sum to " + std::to_string(sum) + ", expected 1");
  }
  GateDistribution g;
  g.probs_ = std::move(probs);
  return g;
}

GateDistribution GateDistribution::softmax(std::span<const double> logits, double scale) {
  if (logits.empty()) throw ConfigError("softmax of empty logits");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(scale * (logits[i] - peak));
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  GateDistribution g;
  g.probs_ = std::move(p);
  return g;
}

GateDistribution GateDistribution::uniform(std::size_t num_experts) {
  if (num_experts == 0) throw ConfigError("gate distribution is empty");
  GateDistribution g;
  g.probs_.assign(num_experts, 1.0 / static_cast<double>(num_experts));
  return g;
}

std::vector<std::uint32_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::uint32_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0u);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

namespace {

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

double token_diversity(const TokenBatch& batch, const EmbeddingTable& table) {
  check_batch(batch, table.vocab_size());
  const auto& ids = batch.token_ids;
  double total = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      if (ids[i] != ids[j]) total += distance(table.row(ids[i]), table.row(ids[j]));
    }
  }
  return total;
}

std::vector<double> mean_pool(const TokenBatch& batch, const EmbeddingTable& table) {
  check_batch(batch, table.vocab_size());
  std::vector<double> mean(table.dim(), 0.0);
  for (auto t : batch.token_ids) {
    const auto r = table.row(t);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += r[i];
  }
  const double k = static_cast<double>(batch.token_ids.size());
  for (auto& v : mean) v /= k;
  return mean;
}

void TraceGenConfig::check() const {
  if (!(persistence >= 0.0 && persistence <= 1.0)) {
    throw ConfigError("persistence must lie in [0, 1]");
  }
  if (!(popularity_weight >= 0.0 && popularity_weight <= 1.0)) {
    throw ConfigError("popularity_weight must lie in [0, 1]");
  }
  if (!(token_affinity >= 0.0 && token_affinity <= 1.0)) {
    throw ConfigError("token_affinity must lie in [0, 1]");
  }
  if (!(gate_sharpness > 0.0) || !std::isfinite(gate_sharpness)) {
    throw ConfigError("gate_sharpness must be positive");
  }
  if (max_groups == 0) throw ConfigError("max_groups must be >= 1");
}

std::vector<std::uint32_t> routing_groups(const TokenBatch& batch, const EmbeddingTable& table,
                                          const TraceGenConfig& gen) {
  check_batch(batch, table.vocab_size());
  const double radius = gen.group_radius >= 0.0
                            ? gen.group_radius
                            : 0.5 * std::sqrt(2.0 * table.dim() / 3.0);
  std::vector<std::uint32_t> leaders;  // token id of each group's first member
  std::vector<std::uint32_t> assignment;
  assignment.reserve(batch.token_ids.size());
  for (auto token : batch.token_ids) {
    std::uint32_t best = 0;
    double best_dist = INFINITY;
    for (std::uint32_t g = 0; g < leaders.size(); ++g) {
      const double d = leaders[g] == token ? 0.0 : distance(table.row(leaders[g]), table.row(token));
      if (d < best_dist) {
        best_dist = d;
        best = g;
      }
    }
    if (leaders.empty() || (best_dist > radius && leaders.size() < gen.max_groups)) {
      leaders.push_back(token);
      assignment.push_back(static_cast<std::uint32_t>(leaders.size() - 1));
    } else {
      assignment.push_back(best);
    }
  }
  return assignment;
}

std::vector<std::uint32_t> ActivationTrace::group_tokens(std::uint32_t group) const {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < token_group.size(); ++i) {
    if (token_group[i] == group) out.push_back(batch.token_ids[i]);
  }
  return out;
}

namespace {

/// Per-layer expert popularity shared by every trace of one router seed.
std::vector<std::vector<double>> popularity_profile(const ModelSpec& model, double rho,
                                                    Seed router_seed) {
  Rng rng(router_seed.derive("popularity"));
  const double innovation = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  std::vector<std::vector<double>> b(model.num_layers,
                                     std::vector<double>(model.experts_per_layer));
  for (auto& v : b[0]) v = rng.normal();
  for (std::uint32_t l = 1; l < model.num_layers; ++l) {
    for (std::uint32_t e = 0; e < model.experts_per_layer; ++e) {
      b[l][e] = rho * b[l - 1][e] + innovation * rng.normal();
    }
  }
  return b;
}

/// Unit-variance projection of a pooled embedding onto expert space.
std::vector<double> token_direction(const ModelSpec& model, std::span<const double> pooled,
                                    Seed router_seed) {
  Rng rng(router_seed.derive("projection"));
  std::vector<double> out(model.experts_per_layer, 0.0);
  double norm2 = 0.0;
  for (double v : pooled) norm2 += v * v;
  for (auto& o : out) {
    for (double v : pooled) o += rng.normal() * v;
  }
  if (norm2 <= 0.0) return std::vector<double>(model.experts_per_layer, 0.0);
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& o : out) o *= inv;
  return out;
}

}  // namespace

ActivationTrace generate_trace(const ModelSpec& model, const TokenBatch& batch,
                               const EmbeddingTable& table, const TraceGenConfig& gen,
                               Seed seed) {
  gen.check();
  require_valid(model, HardwareSpec{1, Nanos(1), model.expert_size_bytes});
  check_batch(batch, table.vocab_size());

  ActivationTrace trace;
  trace.batch = batch;
  trace.token_group = routing_groups(batch, table, gen);
  const std::uint32_t groups =
      *std::max_element(trace.token_group.begin(), trace.token_group.end()) + 1;
  const std::uint32_t L = model.num_layers;
  const std::uint32_t M = model.experts_per_layer;

  const double rho = gen.persistence;
  const double innovation = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  const double pop_w = std::sqrt(gen.popularity_weight);
  const double own_w = std::sqrt(1.0 - gen.popularity_weight);
  const auto popularity = popularity_profile(model, rho, gen.router_seed);

  std::vector<double> weight(groups, 0.0);
  for (auto g : trace.token_group) weight[g] += 1.0;
  for (auto& w : weight) w /= static_cast<double>(batch.token_ids.size());

  // Latent routing state per group, AR(1) across layers.
  std::vector<std::vector<double>> state(groups);
  Rng rng(seed.derive("trace"));
  for (std::uint32_t g = 0; g < groups; ++g) {
    const auto pooled = mean_pool(TokenBatch{trace.group_tokens(g), 1}, table);
    const auto dir = token_direction(model, pooled, gen.router_seed);
    state[g].resize(M);
    for (std::uint32_t e = 0; e < M; ++e) {
      state[g][e] = std::sqrt(gen.token_affinity) * dir[e] +
                    std::sqrt(1.0 - gen.token_affinity) * rng.normal();
    }
  }

  trace.per_layer_actual.resize(L);
  trace.per_layer_gate.resize(L);
  trace.group_gate.resize(L);
  trace.group_actual.resize(L);
  std::vector<double> logits(M);
  for (std::uint32_t l = 0; l < L; ++l) {
    if (l > 0) {
      for (auto& s : state) {
        for (auto& v : s) v = rho * v + innovation * rng.normal();
      }
    }
    std::vector<double> batch_probs(M, 0.0);
    std::vector<std::uint32_t> active;
    for (std::uint32_t g = 0; g < groups; ++g) {
      for (std::uint32_t e = 0; e < M; ++e) {
        logits[e] = pop_w * popularity[l][e] + own_w * state[g][e];
      }
      auto gate = GateDistribution::softmax(logits, gen.gate_sharpness);
      auto chosen = top_k_indices(gate.probs(), model.top_k);
      for (std::uint32_t e = 0; e < M; ++e) batch_probs[e] += weight[g] * gate[e];
      active.insert(active.end(), chosen.begin(), chosen.end());
      std::sort(chosen.begin(), chosen.end());
      trace.group_gate[l].push_back(std::move(gate));
      trace.group_actual[l].push_back(std::move(chosen));
    }
    std::sort(active.begin(), active.end());
    active.erase(std::unique(active.begin(), active.end()), active.end());
    trace.per_layer_actual[l] = std::move(active);
    const double sum = std::accumulate(batch_probs.begin(), batch_probs.end(), 0.0);
    for (auto& p : batch_probs) p /= sum;
    trace.per_layer_gate[l] = GateDistribution::from_probs(std::move(batch_probs));
  }
  return trace;
}

double NoiseConfig::weight(std::uint32_t horizon) const {
  if (fixed_weight) return *fixed_weight;
  return 1.0 - std::exp(-decay_rate * static_cast<double>(horizon));
}

void NoiseConfig::check() const {
  if (fixed_weight && !(*fixed_weight >= 0.0 && *fixed_weight <= 1.0)) {
    throw ConfigError("noise weight must lie in [0, 1]");
  }
  if (!(decay_rate >= 0.0) || !std::isfinite(decay_rate)) {
    throw ConfigError("noise decay_rate must be >= 0");
  }
  if (!(concentration > 0.0)) {
    throw ConfigError("noise concentration must be > 0");
  }
}

namespace {

/// Marsaglia-Tsang gamma sampler; shape >= 1 directly, shape < 1 by boosting.
double sample_gamma(Rng& rng, double shape) {
  if (shape == 1.0) return rng.exponential();
  if (shape < 1.0) {
    double u = rng.uniform01();
    while (u <= 0.0) u = rng.uniform01();
    return sample_gamma(rng, shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform01();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

}  // namespace

GateDistribution pregate_signal(const ActivationTrace& trace, std::uint32_t from_layer,
                                std::uint32_t horizon, const NoiseConfig& noise, Seed seed) {
  noise.check();
  const std::uint64_t target = static_cast<std::uint64_t>(from_layer) + horizon;
  if (target >= trace.num_layers()) {
    throw std::out_of_range("pre-gate target layer " + std::to_string(target) +
                            " is past the last layer " + std::to_string(trace.num_layers() - 1));
  }
  const auto truth = trace.per_layer_gate[target].probs();
  const double w = noise.weight(horizon);
  if (w == 0.0) return trace.per_layer_gate[target];

  Rng rng(seed.derive(from_layer).derive(horizon));
  std::vector<double> draw(truth.size(), 1.0);
  double sum = static_cast<double>(truth.size());
  if (std::isfinite(noise.concentration)) {
    sum = 0.0;
    for (auto& v : draw) {
      v = sample_gamma(rng, noise.concentration);
      sum += v;
    }
  }
  std::vector<double> out(truth.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - w) * truth[i] + w * draw[i] / sum;
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  for (auto& v : out) v /= total;
  return GateDistribution::from_probs(std::move(out));
}

std::uint32_t router_selection_size(const ModelSpec& model, const ActivationTrace& trace) {
  const auto groups = std::max<std::uint32_t>(1, trace.num_groups());
  return std::min<std::uint32_t>(model.experts_per_layer, model.top_k * groups);
}

DiversityRow diversity_row(std::uint64_t workload, const ActivationTrace& trace,
                           const EmbeddingTable& table) {
  DiversityRow row;
  row.workload = workload;
  row.batch_size = trace.batch.batch_size;
  row.num_tokens = static_cast<std::uint32_t>(trace.batch.token_ids.size());
  row.num_groups = trace.num_groups();
  row.diversity = token_diversity(trace.batch, table);
  double total = 0.0;
  for (const auto& a : trace.per_layer_actual) total += static_cast<double>(a.size());
  row.mean_active_experts = trace.num_layers() ? total / trace.num_layers() : 0.0;
  return row;
}

void write_diversity_csv(std::ostream& out, std::span<const DiversityRow> rows) {
  out << "workload,batch_size,num_tokens,num_groups,diversity,mean_active_experts\n";
  for (const auto& r : rows) {
    out << r.workload << ',' << r.batch_size << ',' << r.num_tokens << ',' << r.num_groups << ','
        << csv::num(r.diversity) << ',' << csv::num(r.mean_active_experts) << '\n';
  }
}

}  // namespace moesim
