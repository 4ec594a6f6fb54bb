#include "moesim/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "moesim/activation_log.hpp"
#include "moesim/csv.hpp"
#include "moesim/predictor.hpp"
#include "moesim/rng.hpp"

namespace moesim {

namespace fs = std::filesystem;

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

TraceGenConfig gen_from_json(const Json& j, TraceGenConfig gen) {
  constexpr std::string_view s = "workload";
  gen.persistence = get_field_or(j, s, "persistence", gen.persistence);
  gen.gate_sharpness = get_field_or(j, s, "gate_sharpness", gen.gate_sharpness);
  gen.popularity_weight = get_field_or(j, s, "popularity_weight", gen.popularity_weight);
  gen.token_affinity = get_field_or(j, s, "token_affinity", gen.token_affinity);
  gen.group_radius = get_field_or(j, s, "group_radius", gen.group_radius);
  gen.max_groups = get_field_or(j, s, "max_groups", gen.max_groups);
  gen.router_seed.value = get_field_or(j, s, "router_seed", gen.router_seed.value);
  gen.check();
  return gen;
}

WorkloadConfig workload_from_json(const Json& j, const fs::path& base) {
  reject_unknown_keys(j, "workload",
                      {"num_workloads", "requests_per_batch", "tokens_per_request", "persistence",
                       "gate_sharpness", "popularity_weight", "token_affinity", "group_radius",
                       "max_groups", "router_seed", "log"});
  WorkloadConfig w;
  constexpr std::string_view s = "workload";
  w.num_workloads = get_field_or(j, s, "num_workloads", w.num_workloads);
  w.requests_per_batch = get_field_or(j, s, "requests_per_batch", w.requests_per_batch);
  w.tokens_per_request = get_field_or(j, s, "tokens_per_request", w.tokens_per_request);
  w.gen = gen_from_json(j, w.gen);
  if (j.contains("log")) w.log = resolve(base, get_field<std::string>(j, s, "log"));
  if (w.num_workloads < 1 || w.requests_per_batch < 1 || w.tokens_per_request < 1) {
    throw ConfigError("workload: counts must be >= 1");
  }
  return w;
}

NoiseConfig noise_from_json(const Json& j) {
  reject_unknown_keys(j, "noise", {"decay_rate", "concentration", "fixed_weight"});
  NoiseConfig n;
  n.decay_rate = get_field_or(j, "noise", "decay_rate", n.decay_rate);
  n.concentration = get_field_or(j, "noise", "concentration", n.concentration);
  if (j.contains("fixed_weight")) n.fixed_weight = get_field<double>(j, "noise", "fixed_weight");
  n.check();
  return n;
}

EngineConfig engine_from_json(const Json& j, EngineConfig e) {
  reject_unknown_keys(j, "engine",
                      {"cum_threshold", "stall_threshold", "overfetch_threshold", "min_step",
                       "max_step", "prediction_cache_capacity", "score_threshold", "delta_mode",
                       "cold_start", "bandwidth_smoothing", "recent_window"});
  constexpr std::string_view s = "engine";
  e.cum_threshold = get_field_or(j, s, "cum_threshold", e.cum_threshold);
  e.stall_threshold = get_field_or(j, s, "stall_threshold", e.stall_threshold);
  e.overfetch_threshold = get_field_or(j, s, "overfetch_threshold", e.overfetch_threshold);
  e.min_step = get_field_or(j, s, "min_step", e.min_step);
  e.max_step = get_field_or(j, s, "max_step", e.max_step);
  e.prediction_cache_capacity =
      get_field_or(j, s, "prediction_cache_capacity", e.prediction_cache_capacity);
  e.score_threshold = get_field_or(j, s, "score_threshold", e.score_threshold);
  e.bandwidth_smoothing = get_field_or(j, s, "bandwidth_smoothing", e.bandwidth_smoothing);
  if (j.contains("recent_window")) e.recent_window = get_field<std::uint32_t>(j, s, "recent_window");
  if (j.contains("delta_mode")) {
    const auto mode = get_field<std::string>(j, s, "delta_mode");
    if (mode == "replace") e.delta_mode = DeltaMode::kReplace;
    else if (mode == "additive") e.delta_mode = DeltaMode::kAdditive;
    else throw ConfigError("engine.delta_mode: expected 'replace' or 'additive', got '" + mode + "'");
  }
  if (j.contains("cold_start")) {
    const auto mode = get_field<std::string>(j, s, "cold_start");
    if (mode == "counted") e.cold_start = ColdStart::kCounted;
    else if (mode == "prefetched") e.cold_start = ColdStart::kPrefetched;
    else if (mode == "all_resident") e.cold_start = ColdStart::kAllResident;
    else throw ConfigError("engine.cold_start: expected 'counted', 'prefetched' or 'all_resident', got '" + mode + "'");
  }
  return e;
}

PolicyConfig policy_from_json(const Json& j, std::size_t index) {
  const std::string s = "policies[" + std::to_string(index) + "]";
  reject_unknown_keys(j, s, {"strategy", "interval", "predictor", "routing", "tiered_cache", "name"});
  PolicyConfig p;
  const auto strategy = get_field<std::string>(j, s, "strategy");
  const auto parsed = parse_strategy(strategy);
  if (!parsed) throw ConfigError(s + ".strategy: unknown strategy '" + strategy + "'");
  p.strategy = *parsed;
  p.predictor = p.strategy == Strategy::kStatic ? PredictorKind::kNone : PredictorKind::kPregate;
  if (j.contains("predictor")) {
    const auto name = get_field<std::string>(j, s, "predictor");
    const auto kind = parse_predictor(name);
    if (!kind) throw ConfigError(s + ".predictor: unknown predictor '" + name + "'");
    p.predictor = *kind;
  }
  p.interval = get_field_or(j, s, "interval", p.interval);
  p.cache_aware_routing = get_field_or(j, s, "routing", false);
  if (j.contains("tiered_cache")) p.tiered_cache = get_field<bool>(j, s, "tiered_cache");
  p.name = get_field_or<std::string>(j, s, "name", "");
  p.check();
  return p;
}

ForestConfig forest_from_json(const Json& j, const fs::path& base) {
  reject_unknown_keys(j, "forest",
                      {"model_path", "num_trees", "max_depth", "min_samples_leaf", "max_features",
                       "bootstrap", "threads", "holdout_fraction", "threshold"});
  ForestConfig f;
  constexpr std::string_view s = "forest";
  if (j.contains("model_path")) f.model_path = resolve(base, get_field<std::string>(j, s, "model_path"));
  f.hyper.num_trees = get_field_or(j, s, "num_trees", f.hyper.num_trees);
  f.hyper.max_depth = get_field_or(j, s, "max_depth", f.hyper.max_depth);
  f.hyper.min_samples_leaf = get_field_or(j, s, "min_samples_leaf", f.hyper.min_samples_leaf);
  f.hyper.max_features = get_field_or(j, s, "max_features", f.hyper.max_features);
  f.hyper.bootstrap = get_field_or(j, s, "bootstrap", f.hyper.bootstrap);
  f.hyper.threads = get_field_or(j, s, "threads", f.hyper.threads);
  f.holdout_fraction = get_field_or(j, s, "holdout_fraction", f.holdout_fraction);
  f.threshold = get_field_or(j, s, "threshold", f.threshold);
  if (f.hyper.num_trees < 1) throw ConfigError("forest.num_trees must be >= 1");
  if (!(f.holdout_fraction >= 0.0 && f.holdout_fraction < 1.0)) {
    throw ConfigError("forest.holdout_fraction must lie in [0, 1)");
  }
  return f;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const Json& j, const fs::path& base_dir) {
  reject_unknown_keys(j, "config",
                      {"seed", "model", "hardware", "workload", "noise", "engine", "policies",
                       "forest", "threads"});
  ExperimentConfig c;
  c.seed.value = get_field_or<std::uint64_t>(j, "config", "seed", c.seed.value);
  c.model = model_from_json(get_field<Json>(j, "config", "model"));
  c.hw = hardware_from_json(get_field<Json>(j, "config", "hardware"));
  require_valid(c.model, c.hw);
  if (j.contains("workload")) c.workload = workload_from_json(j.at("workload"), base_dir);
  if (j.contains("noise")) c.engine.noise = noise_from_json(j.at("noise"));
  if (j.contains("engine")) c.engine = engine_from_json(j.at("engine"), c.engine);
  c.engine.check();
  if (j.contains("forest")) c.forest = forest_from_json(j.at("forest"), base_dir);
  c.threads = get_field_or<unsigned>(j, "config", "threads", 0);
  const auto policies = get_field<Json>(j, "config", "policies");
  if (!policies.is_array() || policies.empty()) {
    throw ConfigError("config: 'policies' must be a non-empty list");
  }
  for (std::size_t i = 0; i < policies.size(); ++i) c.policies.push_back(policy_from_json(policies[i], i));
  return c;
}

ExperimentConfig load_experiment(const fs::path& path, const ConfigOverrides& overrides) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config '" + path.string() + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  if (overrides.preset) {
    if (!j.contains("hardware") || !j["hardware"].is_object()) j["hardware"] = Json::object();
    j["hardware"]["preset"] = *overrides.preset;
    j["hardware"].erase("link_bandwidth_bytes_per_sec");
  }
  if (overrides.seed) j["seed"] = *overrides.seed;
  return ExperimentConfig::from_json(j, path.parent_path());
}

EmbeddingTable experiment_embedding(const ExperimentConfig& cfg) {
  return build_embedding_table(cfg.model, cfg.seed.derive("embedding"));
}

std::vector<ActivationTrace> traces_from_log(std::span<const Sample> samples, const ModelSpec& model) {
  std::map<std::vector<std::uint32_t>, std::vector<std::optional<std::vector<std::uint32_t>>>> passes;
  for (const auto& s : samples) {
    auto& layers = passes[s.token_ids];
    layers.resize(model.num_layers);
    auto actual = s.actual_experts;
    std::sort(actual.begin(), actual.end());
    actual.erase(std::unique(actual.begin(), actual.end()), actual.end());
    auto& slot = layers.at(s.layer_idx);
    if (slot && *slot != actual) {
      throw ConfigError("activation log line " + std::to_string(s.line) +
                        ": conflicting activations for layer " + std::to_string(s.layer_idx));
    }
    slot = std::move(actual);
  }
  std::vector<ActivationTrace> out;
  for (auto& [tokens, layers] : passes) {
    ActivationTrace t;
    t.batch = TokenBatch{tokens, 1};
    t.token_group.assign(tokens.size(), 0);
    for (std::uint32_t l = 0; l < model.num_layers; ++l) {
      if (!layers[l]) {
        throw ConfigError("activation log: layer " + std::to_string(l) +
                          " missing for a replayed request");
      }
      std::vector<double> probs(model.experts_per_layer, 0.0);
      for (auto e : *layers[l]) probs[e] = 1.0 / static_cast<double>(layers[l]->size());
      auto gate = GateDistribution::from_probs(std::move(probs));
      t.per_layer_actual.push_back(*layers[l]);
      t.per_layer_gate.push_back(gate);
      t.group_gate.push_back({gate});
      t.group_actual.push_back({*layers[l]});
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<ActivationTrace> build_workloads(const ExperimentConfig& cfg, const EmbeddingTable& table) {
  if (cfg.workload.log) {
    std::ifstream in(*cfg.workload.log);
    if (!in) throw std::runtime_error("cannot read activation log '" + cfg.workload.log->string() + "'");
    const auto samples = parse_activation_log(in, cfg.model);
    if (samples.empty()) throw ConfigError("activation log has no records");
    return traces_from_log(samples, cfg.model);
  }
  std::vector<ActivationTrace> out;
  const auto& w = cfg.workload;
  for (std::uint32_t i = 0; i < w.num_workloads; ++i) {
    Rng rng(cfg.seed.derive("workload").derive(i));
    TokenBatch batch;
    batch.batch_size = w.requests_per_batch;
    for (std::uint32_t t = 0; t < w.requests_per_batch * w.tokens_per_request; ++t) {
      batch.token_ids.push_back(static_cast<std::uint32_t>(rng.below(cfg.model.vocab_size)));
    }
    out.push_back(generate_trace(cfg.model, batch, table, w.gen, cfg.seed.derive("trace").derive(i)));
  }
  return out;
}

namespace {

Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(rows.size(), m.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  }
  return out;
}

}  // namespace

TrainResult train_from_samples(std::span<const Sample> samples, const ExperimentConfig& cfg) {
  if (samples.empty()) throw ConfigError("activation log has no records");
  const auto groups = group_requests(samples);
  const Seed split = cfg.seed.derive("holdout");
  RequestGroups train_groups, test_groups;
  for (const auto& [key, members] : groups) {
    std::uint64_t h = split.value;
    for (auto t : key.token_ids) h = splitmix64(h ^ t);
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    (u < cfg.forest.holdout_fraction ? test_groups : train_groups).emplace(key, members);
  }
  if (train_groups.empty()) std::swap(train_groups, test_groups);

  const auto table = experiment_embedding(cfg);
  const auto train = build_features(train_groups, table, cfg.model);
  const bool additive = cfg.engine.delta_mode == DeltaMode::kAdditive;
  Matrix targets = train.labels;
  if (additive) {
    for (std::size_t i = 0; i < targets.data.size(); ++i) targets.data[i] -= train.pregate.data[i];
  }

  TrainResult result;
  result.model = train_forest(train.features, targets, cfg.forest.hyper, cfg.seed.derive("forest"));
  result.evaluated_on_training = test_groups.empty();
  const auto test = result.evaluated_on_training ? train : build_features(test_groups, table, cfg.model);

  const auto& layout = test.layout;
  std::vector<std::size_t> scored;
  for (std::size_t r = 0; r < test.features.rows; ++r) {
    if (test.features.at(r, layout.layer_column()) >= test.features.at(r, layout.step_column())) {
      scored.push_back(r);
    }
  }
  if (scored.empty()) throw ConfigError("activation log has no scorable records");
  const auto X = select_rows(test.features, scored);
  const auto Y = select_rows(test.labels, scored);
  const auto G = select_rows(test.pregate, scored);
  auto scores = result.model.predict_all(X);
  if (additive) {
    for (std::size_t i = 0; i < scores.data.size(); ++i) scores.data[i] += G.data[i];
  }
  const auto pred = bit_accuracy(scores, Y, X, layout, cfg.forest.threshold);
  const auto base = bit_accuracy(G, Y, X, layout, cfg.forest.threshold);
  for (const auto& [step, acc] : pred.per_step) {
    result.accuracy.push_back(
        AccuracyRow{std::to_string(step), pred.rows_per_step.at(step), acc, base.per_step.at(step)});
  }
  result.accuracy.push_back(AccuracyRow{"all", X.rows, pred.overall, base.overall});
  return result;
}

void write_accuracy_csv(std::ostream& out, std::span<const AccuracyRow> rows) {
  out << "step_size,predictor_acc,pregate_acc,rows\n";
  for (const auto& r : rows) {
    out << r.step << ',' << csv::fixed(r.predictor, 4) << ',' << csv::fixed(r.pregate, 4) << ','
        << r.rows << '\n';
  }
}

FitReport fit_accuracy_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("accuracy CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = csv::split(line);
  std::vector<std::size_t> columns;
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (header[c] != "rows") columns.push_back(c);
  }
  if (columns.empty()) throw ConfigError("accuracy CSV has no curve columns");
  std::vector<std::vector<DecayPoint>> series(columns.size());
  std::size_t line_no = 1;
  auto parse = [&](const std::string& text, double& v) {
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    return ec == std::errc{} && ptr == end;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = csv::split(line);
    double step = 0.0;
    if (!parse(cells[0], step)) continue;
    if (cells.size() != header.size()) {
      throw ConfigError("accuracy CSV line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " columns");
    }
    for (std::size_t i = 0; i < columns.size(); ++i) {
      double v = 0.0;
      if (!parse(cells[columns[i]], v)) {
        throw ConfigError("accuracy CSV line " + std::to_string(line_no) + ": '" +
                          cells[columns[i]] + "' is not a number");
      }
      series[i].push_back(DecayPoint{step, v});
    }
  }
  FitReport report;
  for (std::size_t i = 0; i < columns.size(); ++i) {
    auto points = series[i];
    std::sort(points.begin(), points.end(),
              [](const DecayPoint& a, const DecayPoint& b) { return a.step < b.step; });
    if (points.size() < 3) {
      throw ConfigError("curve '" + header[columns[i]] + "' has " + std::to_string(points.size()) +
                        " points; at least 3 are needed");
    }
    report.curves.push_back(CurveReport{header[columns[i]], fit_decay(points)});
  }
  for (std::size_t i = 0; i + 1 < report.curves.size(); i += 2) {
    const auto gap = compare_curves(report.curves[i].fit, report.curves[i + 1].fit);
    report.gaps.emplace_back(report.curves[i].name + " - " + report.curves[i + 1].name, gap.asymptote());
  }
  return report;
}

namespace {

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const LogParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const Json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

std::string ms(Nanos n) { return csv::fixed(static_cast<double>(n.count()) / 1e6, 3); }

void write_summary(std::ostream& out, const ComparisonTable& table) {
  std::map<std::size_t, MissStats> misses;
  for (const auto& row : table.rows) misses[row.policy] += row.metrics.miss_stats;
  out << std::left << std::setw(32) << "policy" << std::right << std::setw(14) << "waiting_ms"
      << std::setw(14) << "miss_ms" << std::setw(14) << "total_ms" << std::setw(11) << "miss_rate"
      << std::setw(12) << "reduction" << '\n';
  for (std::size_t p = 0; p < table.summary.size(); ++p) {
    const auto& s = table.summary[p];
    out << std::left << std::setw(32) << s.policy_label << std::right << std::setw(14) << ms(s.waiting)
        << std::setw(14) << ms(s.miss) << std::setw(14) << ms(s.total) << std::setw(11)
        << csv::fixed(miss_rate(misses[p]), 4) << std::setw(12)
        << (s.reduction_pct ? csv::fixed(*s.reduction_pct, 2) + "%" : std::string("-")) << '\n';
  }
}

struct RunOutput {
  ExperimentConfig cfg;
  std::vector<ActivationTrace> traces;
  ComparisonTable table;
};

RunOutput run_experiment(const CommandOptions& opts) {
  RunOutput r{load_experiment(opts.config, opts.overrides), {}, {}};
  auto& cfg = r.cfg;
  if (opts.emit_events) {
    cfg.engine.record_events = true;
    cfg.engine.record_cache_events = true;
  }
  const auto table = experiment_embedding(cfg);
  r.traces = build_workloads(cfg, table);

  std::optional<ForestModel> forest;
  const bool wants_forest = std::any_of(cfg.policies.begin(), cfg.policies.end(), [](const auto& p) {
    return p.strategy != Strategy::kStatic && p.predictor == PredictorKind::kForest;
  });
  if (wants_forest) {
    if (!cfg.forest.model_path) throw ConfigError("forest predictor selected but forest.model_path is unset");
    std::ifstream in(*cfg.forest.model_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read model '" + cfg.forest.model_path->string() + "'");
    forest = ForestModel::load(in);
  }
  const PredictorResources res{forest ? &*forest : nullptr, &table};
  r.table = run_comparison(cfg.model, cfg.hw, r.traces, cfg.policies, cfg.seed.derive("engine"),
                           cfg.engine, res, cfg.threads);
  return r;
}

void write_run_files(const CommandOptions& opts, const RunOutput& r) {
  fs::create_directories(opts.out_dir);
  {
    auto out = open_out(opts.out_dir / "summary.txt");
    write_summary(out, r.table);
  }
  // The first policy that issues predictions supplies the training log.
  std::size_t log_policy = 0;
  for (std::size_t p = 0; p < r.cfg.policies.size(); ++p) {
    const auto& pol = r.cfg.policies[p];
    if (pol.strategy != Strategy::kStatic && pol.predictor != PredictorKind::kNone) {
      log_policy = p;
      break;
    }
  }
  {
    auto out = open_out(opts.out_dir / "activations.log");
    for (const auto& row : r.table.rows) {
      if (row.policy != log_policy) continue;
      const auto samples = export_activation_log(r.traces[row.workload], row.metrics);
      write_activation_log(out, samples);
    }
  }
  if (opts.emit_events) {
    for (const auto& row : r.table.rows) {
      const auto stem = "w" + std::to_string(row.workload) + "_p" + std::to_string(row.policy);
      auto ev = open_out(opts.out_dir / ("events_" + stem + ".csv"));
      write_events_csv(ev, row.metrics.events);
      auto ce = open_out(opts.out_dir / ("cache_" + stem + ".csv"));
      write_cache_events(ce, row.metrics.cache_events);
      auto lr = open_out(opts.out_dir / ("layers_" + stem + ".csv"));
      write_layers_csv(lr, row.metrics);
    }
  }
}

}  // namespace

int cmd_simulate(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto r = run_experiment(opts);
    write_run_files(opts, r);
    auto csv_out = open_out(opts.out_dir / "metrics.csv");
    write_metrics_csv(csv_out, r.table.rows);
    write_summary(out, r.table);
    return int{kExitOk};
  });
}

int cmd_compare(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_experiment(opts.config, opts.overrides);
    if (cfg.policies.size() < 2) throw ConfigError("compare needs at least two policies");
    const auto r = run_experiment(opts);
    write_run_files(opts, r);
    auto csv_out = open_out(opts.out_dir / "comparison.csv");
    write_comparison_csv(csv_out, r.table);
    write_summary(out, r.table);
    return int{kExitOk};
  });
}

int cmd_train(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_experiment(opts.config, opts.overrides);
    if (opts.log.empty()) throw ConfigError("train needs --log");
    std::ifstream in(opts.log);
    if (!in) throw std::runtime_error("cannot read activation log '" + opts.log.string() + "'");
    const auto samples = parse_activation_log(in, cfg.model);
    const auto result = train_from_samples(samples, cfg);

    fs::path model_path = opts.model_out;
    if (model_path.empty()) model_path = cfg.forest.model_path.value_or(opts.out_dir / "forest.bin");
    if (model_path.has_parent_path()) fs::create_directories(model_path.parent_path());
    {
      auto model_out = open_out(model_path);
      result.model.save(model_out);
    }
    auto acc = open_out(opts.out_dir / "accuracy.csv");
    write_accuracy_csv(acc, result.accuracy);

    out << "trained " << result.model.trees().size() << " trees on " << samples.size()
        << " records -> " << model_path.string() << '\n';
    if (result.evaluated_on_training) out << "note: no holdout request; accuracy is on training data\n";
    out << std::left << std::setw(10) << "step" << std::right << std::setw(12) << "predictor"
        << std::setw(12) << "pre-gate" << std::setw(10) << "rows" << '\n';
    for (const auto& r : result.accuracy) {
      out << std::left << std::setw(10) << r.step << std::right << std::setw(12)
          << csv::fixed(r.predictor, 2) << std::setw(12) << csv::fixed(r.pregate, 2) << std::setw(10)
          << r.rows << '\n';
    }
    return int{kExitOk};
  });
}

int cmd_fit(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opts.csv.empty()) throw ConfigError("fit needs --csv");
    std::ifstream in(opts.csv);
    if (!in) throw std::runtime_error("cannot read '" + opts.csv.string() + "'");
    const auto report = fit_accuracy_csv(in);
    for (const auto& c : report.curves) {
      out << "curve " << c.name << ": a=" << csv::fixed(c.fit.a, 4) << " b=" << csv::fixed(c.fit.b, 4)
          << " c=" << csv::fixed(c.fit.c, 4) << " residual=" << csv::fixed(c.fit.residual_norm, 4)
          << '\n';
    }
    for (const auto& [name, gap] : report.gaps) {
      out << "asymptote gap " << name << ": " << csv::fixed(gap, 4) << '\n';
    }
    return int{kExitOk};
  });
}

}  // namespace moesim
