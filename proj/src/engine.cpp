#include "moesim/engine.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <queue>
#include <thread>
#include <tuple>
#include <unordered_set>

#include "moesim/csv.hpp"

namespace moesim {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kStatic: return "static";
    case Strategy::kReactive: return "reactive";
    case Strategy::kFixedInterval: return "fixed_interval";
    case Strategy::kAdaptive: return "adaptive";
  }
  return "?";
}

const char* to_string(PredictorKind p) {
  switch (p) {
    case PredictorKind::kNone: return "none";
    case PredictorKind::kPregate: return "pregate";
    case PredictorKind::kForest: return "forest";
    case PredictorKind::kOracle: return "oracle";
  }
  return "?";
}

std::optional<Strategy> parse_strategy(std::string_view text) {
  for (auto s : {Strategy::kStatic, Strategy::kReactive, Strategy::kFixedInterval,
                 Strategy::kAdaptive}) {
    if (text == to_string(s)) return s;
  }
  return std::nullopt;
}

std::optional<PredictorKind> parse_predictor(std::string_view text) {
  for (auto p : {PredictorKind::kNone, PredictorKind::kPregate, PredictorKind::kForest,
                 PredictorKind::kOracle}) {
    if (text == to_string(p)) return p;
  }
  return std::nullopt;
}

std::string PolicyConfig::label() const {
  if (!name.empty()) return name;
  std::string out = to_string(strategy);
  if (strategy == Strategy::kFixedInterval) out += "(" + std::to_string(interval) + ")";
  if (strategy != Strategy::kStatic) out += std::string("/") + to_string(predictor);
  if (cache_aware_routing) out += "+routing";
  return out;
}

void PolicyConfig::check() const {
  if (strategy == Strategy::kFixedInterval && interval < 1) {
    throw ConfigError("fixed_interval requires a step of at least 1");
  }
}

PolicyConfig PolicyConfig::static_baseline() { return PolicyConfig{}; }

PolicyConfig PolicyConfig::reactive(PredictorKind predictor) {
  PolicyConfig p;
  p.strategy = Strategy::kReactive;
  p.predictor = predictor;
  return p;
}

PolicyConfig PolicyConfig::fixed_interval(std::uint32_t step, PredictorKind predictor) {
  PolicyConfig p;
  p.strategy = Strategy::kFixedInterval;
  p.interval = step;
  p.predictor = predictor;
  return p;
}

PolicyConfig PolicyConfig::adaptive(PredictorKind predictor, bool routing) {
  PolicyConfig p;
  p.strategy = Strategy::kAdaptive;
  p.predictor = predictor;
  p.cache_aware_routing = routing;
  return p;
}

void EngineConfig::check() const {
  noise.check();
  if (!(cum_threshold > 0.0 && cum_threshold <= 1.0)) {
    throw ConfigError("cum_threshold must lie in (0, 1]");
  }
  if (stall_threshold < 1 || overfetch_threshold < 1) {
    throw ConfigError("feedback thresholds must be >= 1");
  }
  if (min_step < 1) throw ConfigError("min_step must be >= 1");
  if (max_step != 0 && max_step < min_step) throw ConfigError("max_step below min_step");
  if (prediction_cache_capacity < 1) throw ConfigError("prediction cache capacity must be >= 1");
  if (!(bandwidth_smoothing > 0.0 && bandwidth_smoothing <= 1.0)) {
    throw ConfigError("bandwidth_smoothing must lie in (0, 1]");
  }
}

const char* to_string(EventKind kind) {
  switch (kind) {
    case EventKind::kTransferEnd: return "transfer_end";
    case EventKind::kLayerEnd: return "layer_end";
    case EventKind::kGroupEnd: return "group_end";
    case EventKind::kStallEnd: return "stall_end";
    case EventKind::kLayerStart: return "layer_start";
    case EventKind::kPrefetchIssue: return "prefetch_issue";
    case EventKind::kStallBegin: return "stall_begin";
    case EventKind::kTransferStart: return "transfer_start";
  }
  return "?";
}

void write_events_csv(std::ostream& out, std::span<const SimEvent> events) {
  out << "seq,time_ns,kind,layer,group,expert_layer,expert,priority,direction\n";
  for (const auto& e : events) {
    out << e.sequence << ',' << e.time.count() << ',' << to_string(e.kind) << ',' << e.layer
        << ',';
    if (e.group >= 0) out << e.group;
    out << ',';
    if (e.expert) out << e.expert->layer() << ',' << e.expert->expert();
    else out << ',';
    out << ',';
    if (e.priority) out << to_string(*e.priority);
    out << ',';
    if (e.direction) out << (*e.direction == Direction::kIn ? "in" : "out");
    out << '\n';
  }
}

double SimMetrics::hit_rate() const {
  const auto n = cache_hits + cache_misses;
  return n == 0 ? 0.0 : static_cast<double>(cache_hits) / static_cast<double>(n);
}

RouteResult route_batch(std::span<const RoutingGroup> groups,
                        const std::function<bool(ExpertId)>& resident) {
  if (groups.empty()) throw ConfigError("route_batch needs at least one group");
  RouteResult out;
  std::vector<const RoutingGroup*> deferred;
  for (const auto& g : groups) {
    if (std::all_of(g.experts.begin(), g.experts.end(), resident)) {
      out.order.push_back(g.id);
    } else {
      deferred.push_back(&g);
    }
  }
  std::unordered_set<ExpertId> seen;
  for (const auto* g : deferred) {
    out.order.push_back(g->id);
    for (const auto& e : g->experts) {
      if (!resident(e) && seen.insert(e).second) out.deferred_missing.push_back(e);
    }
  }
  return out;
}

namespace {

struct Pending {
  Nanos time;
  EventKind kind;
  std::uint64_t seq;
  std::uint32_t layer;

  bool operator>(const Pending& o) const {
    return std::tie(time, kind, seq) > std::tie(o.time, o.kind, o.seq);
  }
};

struct Slice {
  std::uint32_t group = 0;
  Nanos duration{0};
  std::vector<ExpertId> experts;
};

struct InFlight {
  TransferRequest request;
  Nanos start{0};
  Nanos duration{0};
};

struct FirstPrediction {
  std::vector<std::uint32_t> experts;
  std::uint32_t horizon = 0;
};

void check_trace(const ModelSpec& model, const ActivationTrace& trace) {
  if (trace.num_layers() != model.num_layers || trace.per_layer_gate.size() != model.num_layers) {
    throw ConfigError("trace has " + std::to_string(trace.num_layers()) + " layers, model has " +
                      std::to_string(model.num_layers));
  }
  for (std::uint32_t l = 0; l < model.num_layers; ++l) {
    if (trace.per_layer_gate[l].size() != model.experts_per_layer) {
      throw ConfigError("trace gate at layer " + std::to_string(l) + " does not match the model");
    }
    if (trace.per_layer_actual[l].empty()) {
      throw ConfigError("trace layer " + std::to_string(l) + " activates no expert");
    }
    for (auto e : trace.per_layer_actual[l]) {
      if (e >= model.experts_per_layer) throw ConfigError("trace expert outside the model");
    }
  }
}

class Simulation {
 public:
  Simulation(const ModelSpec& model, const HardwareSpec& hw, const ActivationTrace& trace,
             const PolicyConfig& policy, Seed seed, const EngineConfig& cfg,
             const PredictorResources& res)
      : model_(model),
        hw_(hw),
        trace_(trace),
        policy_(policy),
        cfg_(cfg),
        noise_seed_(seed.derive("pregate")),
        cache_(hw.device_memory_bytes, model.expert_size_bytes),
        bw_(cfg.bandwidth_smoothing),
        pcache_(cfg.prediction_cache_capacity),
        transfer_time_(swap_in_latency(1, model, hw.link_bandwidth_bytes_per_sec)) {
    const auto L = model_.num_layers;
    max_step_ = cfg_.max_step != 0 ? cfg_.max_step : std::max<std::uint32_t>(1, L - 1);
    max_step_ = std::max(max_step_, cfg_.min_step);
    step_.stall_threshold = cfg_.stall_threshold;
    step_.overfetch_threshold = cfg_.overfetch_threshold;
    switch (policy_.strategy) {
      case Strategy::kStatic:
      case Strategy::kReactive:
        step_.min_step = step_.max_step = step_.current = 1;
        break;
      case Strategy::kFixedInterval:
        step_.min_step = step_.max_step = step_.current = policy_.interval;
        break;
      case Strategy::kAdaptive:
        step_.min_step = cfg_.min_step;
        step_.max_step = max_step_;
        step_.current = cfg_.min_step;
        break;
    }
    if (policy_.strategy != Strategy::kStatic) {
      switch (policy_.predictor) {
        case PredictorKind::kForest:
          if (!res.forest || !res.table) {
            throw ConfigError("forest predictor selected but no trained model was supplied");
          }
          scorer_ = std::make_unique<ForestScorer>(*res.forest, *res.table, model_, cfg_.delta_mode);
          break;
        case PredictorKind::kOracle:
          scorer_ = std::make_unique<OracleScorer>(trace_, model_.experts_per_layer);
          break;
        default:
          break;
      }
    }
    if (cfg_.record_cache_events) cache_.set_event_log(&m_.cache_events);
    router_k_ = router_selection_size(model_, trace_);
    history_.assign(L, {});
    first_pred_.resize(L);
    latest_pred_.resize(L);
  }

  SimMetrics run() {
    const auto L = model_.num_layers;
    if (cfg_.cold_start != ColdStart::kCounted) {
      const std::uint32_t through = cfg_.cold_start == ColdStart::kAllResident ? L : 1;
      for (std::uint32_t l = 0; l < through; ++l) {
        for (auto e : trace_.per_layer_actual[l]) {
          const auto id = ExpertId::unchecked(l, e);
          if (cache_.size() >= cache_.capacity_slots()) {
            throw std::runtime_error("device memory cannot hold the preloaded experts");
          }
          cache_.admit(id, Tier::kHigh, 0);
        }
      }
    }
    layer_ready(0, Nanos::zero());
    while (!done_) {
      if (pending_.empty()) {
        throw std::runtime_error("layer " + std::to_string(layer_) + " needs " +
                                 std::to_string(required_.size()) +
                                 " experts but device memory holds " +
                                 std::to_string(cache_.capacity_slots()));
      }
      const auto ev = pending_.top();
      pending_.pop();
      switch (ev.kind) {
        case EventKind::kTransferEnd: on_transfer_end(ev.time); break;
        case EventKind::kGroupEnd: on_slice_end(ev.time, false); break;
        case EventKind::kLayerEnd: on_slice_end(ev.time, true); break;
        default: throw std::logic_error("unexpected scheduled event");
      }
    }

    for (std::uint32_t l = 0; l < L; ++l) {
      auto& rec = m_.layers[l];
      if (first_pred_[l]) {
        rec.predicted = first_pred_[l]->experts;
        rec.predicted_horizon = first_pred_[l]->horizon;
      }
    }
    m_.final_step = policy_.strategy == Strategy::kStatic ? 0 : step_.current;
    m_.prediction_cache_hits = pcache_.hits();
    m_.cache_hits = cache_.hits();
    m_.cache_misses = cache_.misses();

    const Nanos compute = hw_.layer_compute_time * L;
    if (m_.total != compute + m_.waiting) {
      throw std::logic_error("time conservation violated");
    }
    const Nanos bound = last_start_demand_ - hw_.layer_compute_time * (L - 1);
    if (m_.waiting < std::max(Nanos::zero(), bound)) {
      throw std::logic_error("waiting latency below the link-throughput lower bound");
    }
    return std::move(m_);
  }

 private:
  void log(Nanos t, EventKind kind, std::int32_t group = -1,
           std::optional<TransferRequest> req = std::nullopt) {
    if (!cfg_.record_events) return;
    SimEvent e;
    e.time = t;
    e.kind = kind;
    e.sequence = log_seq_++;
    e.layer = layer_;
    e.group = group;
    if (req) {
      e.expert = req->expert;
      e.priority = req->priority;
      e.direction = req->direction;
    }
    m_.events.push_back(e);
  }

  void schedule(Nanos t, EventKind kind) { pending_.push(Pending{t, kind, seq_++, layer_}); }

  bool requested(ExpertId e) const {
    return queue_.pending(e) || (link_ && link_->request.direction == Direction::kIn &&
                                 link_->request.expert == e);
  }

  bool predicting() const {
    return policy_.strategy != Strategy::kStatic && policy_.predictor != PredictorKind::kNone;
  }

  void init_step() {
    if (model_.num_layers < 2) return;
    const auto gate = pregate_signal(trace_, 0, 1, cfg_.noise, noise_seed_);
    const auto n = expected_expert_count(gate, cfg_.cum_threshold);
    step_.current = compute_step(n, model_.expert_size_bytes,
                                 bw_.value_or(hw_.link_bandwidth_bytes_per_sec),
                                 hw_.layer_compute_time, StepBounds{step_.min_step, step_.max_step});
  }

  void enqueue_in(ExpertId e, Priority p, Nanos now) {
    queue_.enqueue(TransferRequest{e, Direction::kIn, p, now, 0});
  }

  void layer_ready(std::uint32_t l, Nanos now) {
    layer_ = l;
    if (policy_.strategy == Strategy::kAdaptive && l == 0) init_step();
    const std::uint32_t step = policy_.strategy == Strategy::kStatic ? 0 : step_.current;
    m_.step_history.emplace_back(l, step);

    LayerRecord rec;
    rec.layer = l;
    rec.step = step;
    rec.ready = now;

    required_.clear();
    required_set_.clear();
    for (auto e : trace_.per_layer_actual[l]) {
      required_.push_back(ExpertId::unchecked(l, e));
      required_set_.insert(required_.back());
    }
    history_[l] = trace_.per_layer_actual[l];

    std::unordered_set<ExpertId> missing;
    for (const auto& e : required_) {
      if (cache_.access(e, l) == AccessResult::kHit) {
        cache_.pin(e);
      } else if (requested(e)) {
        queue_.promote(e, Priority::kMiss, now);
      } else {
        missing.insert(e);
      }
    }
    rec.required = static_cast<std::uint32_t>(required_.size());
    rec.selected = static_cast<std::uint32_t>(required_.size() - missing.size());
    if (l > 0) m_.miss_stats += MissStats{rec.selected, rec.required};

    // A cold layer 0 pays its fetch as waiting, not as a prediction miss.
    const bool attribute = l > 0;
    auto request_miss = [&](ExpertId e) {
      if (!missing.erase(e)) return;
      enqueue_in(e, Priority::kMiss, now);
      if (attribute) miss_class_.insert(e);
    };

    slices_.clear();
    const Nanos T = hw_.layer_compute_time;
    if (policy_.cache_aware_routing && trace_.num_groups() > 1) {
      const auto G = trace_.num_groups();
      std::vector<RoutingGroup> groups(G);
      for (std::uint32_t g = 0; g < G; ++g) {
        groups[g].id = g;
        for (auto e : trace_.group_actual[l][g]) groups[g].experts.push_back(ExpertId::unchecked(l, e));
      }
      const auto route =
          route_batch(groups, [&](ExpertId e) { return cache_.contains(e); });
      const auto base = T / G;
      const auto rem = static_cast<std::uint32_t>(T.count() % G);
      for (auto g : route.order) {
        slices_.push_back(Slice{g, base + Nanos(g < rem ? 1 : 0), groups[g].experts});
        rec.group_order.push_back(g);
      }
      for (const auto& e : route.deferred_missing) request_miss(e);
    } else {
      slices_.push_back(Slice{0, T, required_});
    }
    for (const auto& e : required_) request_miss(e);

    issue_predictions(l, now);
    if (policy_.uses_tiers()) {
      std::unordered_set<ExpertId> predicted;
      for (std::uint32_t t = l + 1; t < model_.num_layers; ++t) {
        predicted.insert(latest_pred_[t].begin(), latest_pred_[t].end());
      }
      const std::uint64_t window = cfg_.recent_window.value_or(std::max<std::uint32_t>(step, 1));
      cache_.reassign_tiers(predicted, window, l);
    }

    m_.layers.push_back(std::move(rec));
    slice_ = 0;
    slice_ready_ = now;
    stalled_ = false;
    start_link(now);
    try_start_slice(now);
  }

  void issue_predictions(std::uint32_t l, Nanos now) {
    if (!predicting()) return;
    std::uint32_t step = 0;
    switch (policy_.strategy) {
      case Strategy::kReactive: step = 1; break;
      case Strategy::kFixedInterval:
        if (l % policy_.interval != 0) return;
        step = policy_.interval;
        break;
      case Strategy::kAdaptive: step = step_.current; break;
      case Strategy::kStatic: return;
    }
    const auto horizon = prediction_horizon(l, step, model_.num_layers);
    if (horizon == 0) return;
    std::vector<GateDistribution> pregate;
    pregate.reserve(horizon);
    for (std::uint32_t j = 1; j <= horizon; ++j) {
      pregate.push_back(pregate_signal(trace_, l, j, cfg_.noise, noise_seed_));
    }
    StepState state = step_;
    state.current = step;
    const PredictionRequest req{trace_.batch,     l,        model_.num_layers,
                                model_.experts_per_layer, state, pregate,
                                history_,         router_k_, model_.top_k,
                                cfg_.score_threshold};
    const auto pred = predict_experts(req, &pcache_, scorer_.get());
    log(now, EventKind::kPrefetchIssue);

    std::map<std::uint32_t, std::vector<ExpertId>> by_layer;
    for (const auto& e : pred.experts) by_layer[e.layer()].push_back(e);
    for (auto& [target, experts] : by_layer) {
      latest_pred_[target] = experts;
      if (!first_pred_[target]) {
        FirstPrediction fp;
        for (const auto& e : experts) fp.experts.push_back(e.expert());
        std::sort(fp.experts.begin(), fp.experts.end());
        fp.horizon = target - l;
        first_pred_[target] = std::move(fp);
      }
    }
    for (const auto& e : pred.experts) {
      if (cache_.contains(e) || requested(e)) continue;
      enqueue_in(e, Priority::kPrefetch, now);
      ++m_.prefetches_issued;
    }
  }

  void try_start_slice(Nanos now) {
    if (computing_ || done_) return;
    const auto& s = slices_[slice_];
    const bool ready = std::all_of(s.experts.begin(), s.experts.end(),
                                   [&](ExpertId e) { return cache_.contains(e); });
    const auto group = static_cast<std::int32_t>(s.group);
    if (!ready) {
      if (!stalled_) {
        stalled_ = true;
        log(now, EventKind::kStallBegin, group);
      }
      return;
    }
    if (stalled_) {
      stalled_ = false;
      log(now, EventKind::kStallEnd, group);
    }
    auto& rec = m_.layers.back();
    const Nanos idle = now - slice_ready_;
    rec.stall += idle;
    m_.waiting += idle;
    if (slice_ == 0) {
      rec.start = now;
      log(now, EventKind::kLayerStart);
      if (layer_ + 1 == model_.num_layers) last_start_demand_ = completed_transfer_time_;
    }
    computing_ = true;
    schedule(now + s.duration,
             slice_ + 1 == slices_.size() ? EventKind::kLayerEnd : EventKind::kGroupEnd);
  }

  void on_slice_end(Nanos now, bool last) {
    computing_ = false;
    if (!last) {
      log(now, EventKind::kGroupEnd, static_cast<std::int32_t>(slices_[slice_].group));
      ++slice_;
      slice_ready_ = now;
      try_start_slice(now);
      return;
    }
    log(now, EventKind::kLayerEnd);
    auto& rec = m_.layers.back();
    rec.end = now;
    for (const auto& e : required_) cache_.unpin(e);
    feedback(rec);
    if (layer_ + 1 == model_.num_layers) {
      done_ = true;
      m_.total = now;
      return;
    }
    layer_ready(layer_ + 1, now);
  }

  void feedback(const LayerRecord& rec) {
    if (policy_.strategy != Strategy::kAdaptive || rec.layer == 0) return;
    if (rec.stall > Nanos::zero()) {
      step_ = on_stall(step_);
      ++m_.stall_events;
      return;
    }
    const bool early = std::all_of(required_.begin(), required_.end(), [&](ExpertId e) {
      const auto it = arrival_.find(e);
      return it != arrival_.end() && it->second + hw_.layer_compute_time < rec.ready;
    });
    if (early) {
      step_ = on_overfetch(step_);
      ++m_.overfetch_events;
    }
  }

  void start_link(Nanos now) {
    if (link_ || done_) return;
    const auto* next = queue_.peek();
    if (!next) return;
    // Wait for the running layer to release its pins rather than land nowhere.
    if (next->direction == Direction::kIn && !cache_.can_admit()) return;
    auto req = *queue_.pop();
    link_ = InFlight{req, now, transfer_time_};
    log(now, EventKind::kTransferStart, -1, req);
    schedule(now + transfer_time_, EventKind::kTransferEnd);
  }

  void on_transfer_end(Nanos now) {
    const auto f = *link_;
    link_.reset();
    const auto& req = f.request;
    bw_.observe(model_.expert_size_bytes, f.duration);
    m_.link_busy += f.duration;
    completed_transfer_time_ += f.duration;
    log(now, EventKind::kTransferEnd, -1, req);
    if (req.direction == Direction::kIn) {
      ++m_.transfers_in;
      if (miss_class_.erase(req.expert)) m_.miss += f.duration;
      if (!cache_.can_admit()) {
        if (required_set_.contains(req.expert)) {
          throw std::runtime_error("layer " + std::to_string(layer_) +
                                   " experts exceed device memory");
        }
        ++m_.prefetches_dropped;
      } else {
        for (const auto& v : cache_.admit(req.expert, Tier::kHigh, layer_)) {
          arrival_.erase(v);
          queue_.enqueue(TransferRequest{v, Direction::kOut, Priority::kEvict, now, 0});
        }
        arrival_[req.expert] = now;
        if (required_set_.contains(req.expert)) cache_.pin(req.expert);
      }
    } else {
      ++m_.transfers_out;
    }
    start_link(now);
    try_start_slice(now);
  }

  const ModelSpec& model_;
  const HardwareSpec& hw_;
  const ActivationTrace& trace_;
  const PolicyConfig& policy_;
  const EngineConfig& cfg_;
  Seed noise_seed_;

  ExpertCache cache_;
  TransferQueue queue_;
  BandwidthEstimator bw_;
  StepState step_;
  PredictionCache pcache_;
  std::unique_ptr<ActivationScorer> scorer_;
  std::uint32_t router_k_ = 1;
  std::uint32_t max_step_ = 1;
  Nanos transfer_time_;

  std::priority_queue<Pending, std::vector<Pending>, std::greater<>> pending_;
  std::uint64_t seq_ = 0;
  std::uint64_t log_seq_ = 0;
  std::optional<InFlight> link_;
  std::unordered_set<ExpertId> miss_class_;
  std::unordered_map<ExpertId, Nanos> arrival_;
  Nanos completed_transfer_time_{0};
  Nanos last_start_demand_{0};

  std::uint32_t layer_ = 0;
  std::vector<ExpertId> required_;
  std::unordered_set<ExpertId> required_set_;
  std::vector<Slice> slices_;
  std::size_t slice_ = 0;
  Nanos slice_ready_{0};
  bool stalled_ = false;
  bool computing_ = false;
  bool done_ = false;
  ActivationHistory history_;
  std::vector<std::optional<FirstPrediction>> first_pred_;
  std::vector<std::vector<ExpertId>> latest_pred_;
  SimMetrics m_;
};

}  // namespace

SimMetrics simulate(const ModelSpec& model, const HardwareSpec& hw, const ActivationTrace& trace,
                    const PolicyConfig& policy, Seed seed, const EngineConfig& config,
                    const PredictorResources& resources) {
  require_valid(model, hw);
  policy.check();
  config.check();
  check_trace(model, trace);
  Simulation sim(model, hw, trace, policy, seed, config, resources);
  return sim.run();
}

std::vector<Sample> export_activation_log(const ActivationTrace& trace, const SimMetrics& metrics) {
  std::vector<Sample> out;
  out.reserve(metrics.layers.size());
  for (const auto& rec : metrics.layers) {
    Sample s;
    s.token_ids = trace.batch.token_ids;
    s.layer_idx = rec.layer;
    s.predicted_experts = rec.predicted;
    s.actual_experts = trace.per_layer_actual.at(rec.layer);
    s.step_size = rec.predicted_horizon > 0 ? rec.predicted_horizon : std::max<std::uint32_t>(1, rec.step);
    out.push_back(std::move(s));
  }
  return out;
}

double reduction_pct(Nanos baseline, Nanos value) {
  if (baseline <= Nanos::zero()) return 0.0;
  return 100.0 * static_cast<double>((baseline - value).count()) /
         static_cast<double>(baseline.count());
}

ComparisonTable run_comparison(const ModelSpec& model, const HardwareSpec& hw,
                               std::span<const ActivationTrace> workloads,
                               std::span<const PolicyConfig> policies, Seed seed,
                               const EngineConfig& config, const PredictorResources& resources,
                               unsigned threads) {
  if (policies.empty()) throw ConfigError("run_comparison needs at least one policy");
  const std::size_t P = policies.size();
  const std::size_t jobs = workloads.size() * P;
  ComparisonTable table;
  table.rows.resize(jobs);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs;) {
      const std::size_t w = j / P;
      const std::size_t p = j % P;
      try {
        auto& row = table.rows[j];
        row.workload = w;
        row.policy = p;
        row.policy_label = policies[p].label();
        row.metrics = simulate(model, hw, workloads[w], policies[p], seed.derive(w), config, resources);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  unsigned n = threads != 0 ? threads : std::max(1u, std::thread::hardware_concurrency());
  n = static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
  {
    std::vector<std::jthread> pool;
    for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);

  table.summary.resize(P);
  for (std::size_t p = 0; p < P; ++p) table.summary[p].policy_label = policies[p].label();
  for (auto& row : table.rows) {
    auto& s = table.summary[row.policy];
    s.waiting += row.metrics.waiting;
    s.miss += row.metrics.miss;
    s.total += row.metrics.total;
    if (row.policy > 0) {
      const auto& base = table.rows[row.workload * P].metrics;
      row.reduction_pct = reduction_pct(base.waiting + base.miss, row.metrics.waiting + row.metrics.miss);
    }
  }
  for (std::size_t p = 1; p < P; ++p) {
    const auto& b = table.summary[0];
    table.summary[p].reduction_pct =
        reduction_pct(b.waiting + b.miss, table.summary[p].waiting + table.summary[p].miss);
  }
  return table;
}

namespace {

void write_metric_columns(std::ostream& out, const ComparisonRow& row) {
  const auto& m = row.metrics;
  out << row.policy_label << ',' << row.workload << ',' << m.waiting.count() << ','
      << m.miss.count() << ',' << m.total.count() << ',' << m.final_step << ','
      << csv::fixed(m.hit_rate(), 6);
}

}  // namespace

void write_metrics_csv(std::ostream& out, std::span<const ComparisonRow> rows) {
  out << "policy,workload,waiting_ns,miss_ns,total_ns,final_S,hit_rate\n";
  for (const auto& row : rows) {
    write_metric_columns(out, row);
    out << '\n';
  }
}

void write_comparison_csv(std::ostream& out, const ComparisonTable& table) {
  out << "policy,workload,waiting_ns,miss_ns,total_ns,final_S,hit_rate,reduction_pct\n";
  for (const auto& row : table.rows) {
    write_metric_columns(out, row);
    out << ',';
    if (row.reduction_pct) out << csv::fixed(*row.reduction_pct, 4);
    out << '\n';
  }
}

void write_layers_csv(std::ostream& out, const SimMetrics& m) {
  out << "layer,step,ready_ns,start_ns,end_ns,stall_ns,required,selected\n";
  for (const auto& r : m.layers) {
    out << r.layer << ',' << r.step << ',' << r.ready.count() << ',' << r.start.count() << ','
        << r.end.count() << ',' << r.stall.count() << ',' << r.required << ',' << r.selected
        << '\n';
  }
}

}  // namespace moesim
