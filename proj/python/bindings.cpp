#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "moesim/cli.hpp"
#include "moesim/decay_fit.hpp"
#include "moesim/engine.hpp"
#include "moesim/scheduler.hpp"
#include "moesim/workload.hpp"

namespace py = pybind11;
using namespace moesim;

namespace {

TokenBatch batch_of(const std::vector<std::uint32_t>& tokens) { return TokenBatch{tokens, 1}; }

py::dict metrics_dict(const SimMetrics& m) {
  py::dict d;
  d["waiting_ns"] = m.waiting.count();
  d["miss_ns"] = m.miss.count();
  d["total_ns"] = m.total.count();
  d["final_step"] = m.final_step;
  d["miss_rate"] = miss_rate(m.miss_stats);
  d["hit_rate"] = m.hit_rate();
  d["transfers_in"] = m.transfers_in;
  d["transfers_out"] = m.transfers_out;
  d["stall_events"] = m.stall_events;
  d["link_busy_ns"] = m.link_busy.count();
  std::vector<std::uint32_t> steps;
  for (const auto& [layer, s] : m.step_history) steps.push_back(s);
  d["step_history"] = steps;
  return d;
}

}  // namespace

PYBIND11_MODULE(_moesim, m) {
  m.doc() = "Discrete-event simulator for MoE expert prefetching";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<ModelSpec>(m, "ModelSpec")
      .def(py::init([](std::uint32_t layers, std::uint32_t experts, std::uint64_t size,
                       std::uint32_t top_k, std::uint32_t vocab, std::uint32_t dim) {
             return ModelSpec{layers, experts, size, top_k, vocab, dim};
           }),
           py::arg("num_layers"), py::arg("experts_per_layer"), py::arg("expert_size_bytes"),
           py::arg("top_k"), py::arg("vocab_size") = 32000, py::arg("embed_dim") = 16)
      .def_readwrite("num_layers", &ModelSpec::num_layers)
      .def_readwrite("experts_per_layer", &ModelSpec::experts_per_layer)
      .def_readwrite("expert_size_bytes", &ModelSpec::expert_size_bytes)
      .def_readwrite("top_k", &ModelSpec::top_k)
      .def_readwrite("vocab_size", &ModelSpec::vocab_size)
      .def_readwrite("embed_dim", &ModelSpec::embed_dim);

  py::class_<HardwareSpec>(m, "HardwareSpec")
      .def(py::init([](std::uint64_t bw, std::int64_t layer_ns, std::uint64_t memory) {
             return HardwareSpec{bw, Nanos(layer_ns), memory};
           }),
           py::arg("link_bandwidth_bytes_per_sec"), py::arg("layer_compute_time_ns"),
           py::arg("device_memory_bytes"))
      .def_readwrite("link_bandwidth_bytes_per_sec", &HardwareSpec::link_bandwidth_bytes_per_sec)
      .def_property(
          "layer_compute_time_ns", [](const HardwareSpec& h) { return h.layer_compute_time.count(); },
          [](HardwareSpec& h, std::int64_t ns) { h.layer_compute_time = Nanos(ns); })
      .def_readwrite("device_memory_bytes", &HardwareSpec::device_memory_bytes);

  m.def("validate", [](const ModelSpec& model, const HardwareSpec& hw) {
    const auto r = validate(model, hw);
    return py::make_tuple(r.violations, r.warnings);
  }, py::arg("model"), py::arg("hardware"), "Returns (violations, warnings).");

  m.def("find_preset", [](const std::string& name) -> std::optional<std::uint64_t> {
    if (auto p = find_preset(name)) return p->link_bandwidth_bytes_per_sec;
    return std::nullopt;
  }, "Link bandwidth of a device preset in bytes/s, or None.");

  m.def("compute_step",
        [](std::uint64_t n, std::uint64_t size, std::uint64_t bw, std::int64_t layer_ns,
           std::uint32_t min_step, std::uint32_t max_step) {
          return compute_step(n, size, bw, Nanos(layer_ns), StepBounds{min_step, max_step});
        },
        py::arg("expected_experts"), py::arg("expert_size_bytes"), py::arg("bandwidth"),
        py::arg("layer_compute_time_ns"), py::arg("min_step") = 1, py::arg("max_step") = 1024);

  m.def("swap_in_latency",
        [](std::uint64_t n, std::uint64_t size, std::uint64_t bw) {
          ModelSpec spec;
          spec.expert_size_bytes = size;
          return swap_in_latency(n, spec, bw).count();
        },
        py::arg("num_experts"), py::arg("expert_size_bytes"), py::arg("bandwidth"),
        "Swap-in time in nanoseconds, rounded up.");

  m.def("miss_rate", [](std::uint64_t selected, std::uint64_t total) {
    return miss_rate(MissStats{selected, total});
  }, py::arg("selected"), py::arg("total"));

  py::class_<EmbeddingTable>(m, "EmbeddingTable")
      .def_property_readonly("vocab_size", &EmbeddingTable::vocab_size)
      .def_property_readonly("dim", &EmbeddingTable::dim)
      .def("row", [](const EmbeddingTable& t, std::uint32_t token) {
        const auto r = t.row(token);
        return std::vector<double>(r.begin(), r.end());
      });

  m.def("build_embedding_table", [](const ModelSpec& model, std::uint64_t seed) {
    return build_embedding_table(model, Seed{seed});
  }, py::arg("model"), py::arg("seed") = 1);

  m.def("token_diversity", [](const std::vector<std::uint32_t>& tokens, const EmbeddingTable& t) {
    return token_diversity(batch_of(tokens), t);
  });
  m.def("mean_pool", [](const std::vector<std::uint32_t>& tokens, const EmbeddingTable& t) {
    return mean_pool(batch_of(tokens), t);
  });

  py::class_<ActivationTrace>(m, "Trace")
      .def_property_readonly("token_ids", [](const ActivationTrace& t) { return t.batch.token_ids; })
      .def_readonly("per_layer_actual", &ActivationTrace::per_layer_actual)
      .def_property_readonly("num_layers", &ActivationTrace::num_layers)
      .def_property_readonly("num_groups", &ActivationTrace::num_groups);

  m.def("generate_trace",
        [](const ModelSpec& model, const std::vector<std::uint32_t>& tokens,
           const EmbeddingTable& table, std::uint64_t seed, double persistence,
           std::uint32_t max_groups) {
          TraceGenConfig gen;
          gen.persistence = persistence;
          gen.max_groups = max_groups;
          return generate_trace(model, batch_of(tokens), table, gen, Seed{seed});
        },
        py::arg("model"), py::arg("tokens"), py::arg("table"), py::arg("seed") = 0,
        py::arg("persistence") = TraceGenConfig{}.persistence,
        py::arg("max_groups") = TraceGenConfig{}.max_groups);

  py::enum_<Strategy>(m, "Strategy")
      .value("STATIC", Strategy::kStatic)
      .value("REACTIVE", Strategy::kReactive)
      .value("FIXED_INTERVAL", Strategy::kFixedInterval)
      .value("ADAPTIVE", Strategy::kAdaptive);

  py::enum_<PredictorKind>(m, "PredictorKind")
      .value("NONE", PredictorKind::kNone)
      .value("PREGATE", PredictorKind::kPregate)
      .value("FOREST", PredictorKind::kForest)
      .value("ORACLE", PredictorKind::kOracle);

  py::enum_<ColdStart>(m, "ColdStart")
      .value("COUNTED", ColdStart::kCounted)
      .value("PREFETCHED", ColdStart::kPrefetched)
      .value("ALL_RESIDENT", ColdStart::kAllResident);

  py::class_<PolicyConfig>(m, "PolicyConfig")
      .def_readwrite("strategy", &PolicyConfig::strategy)
      .def_readwrite("interval", &PolicyConfig::interval)
      .def_readwrite("predictor", &PolicyConfig::predictor)
      .def_readwrite("cache_aware_routing", &PolicyConfig::cache_aware_routing)
      .def_readwrite("tiered_cache", &PolicyConfig::tiered_cache)
      .def_property_readonly("label", &PolicyConfig::label)
      .def_static("static_baseline", &PolicyConfig::static_baseline)
      .def_static("reactive", &PolicyConfig::reactive, py::arg("predictor") = PredictorKind::kPregate)
      .def_static("fixed_interval", &PolicyConfig::fixed_interval, py::arg("step"),
                  py::arg("predictor") = PredictorKind::kPregate)
      .def_static("adaptive", &PolicyConfig::adaptive, py::arg("predictor") = PredictorKind::kPregate,
                  py::arg("routing") = false)
      .def("__repr__", [](const PolicyConfig& p) { return "<PolicyConfig " + p.label() + ">"; });

  py::class_<EngineConfig>(m, "EngineConfig")
      .def(py::init<>())
      .def_readwrite("cum_threshold", &EngineConfig::cum_threshold)
      .def_readwrite("stall_threshold", &EngineConfig::stall_threshold)
      .def_readwrite("overfetch_threshold", &EngineConfig::overfetch_threshold)
      .def_readwrite("min_step", &EngineConfig::min_step)
      .def_readwrite("max_step", &EngineConfig::max_step)
      .def_readwrite("score_threshold", &EngineConfig::score_threshold)
      .def_readwrite("cold_start", &EngineConfig::cold_start)
      .def_readwrite("recent_window", &EngineConfig::recent_window);

  m.def("simulate",
        [](const ModelSpec& model, const HardwareSpec& hw, const ActivationTrace& trace,
           const PolicyConfig& policy, std::uint64_t seed, const EngineConfig& cfg) {
          py::gil_scoped_release release;
          auto r = simulate(model, hw, trace, policy, Seed{seed}, cfg);
          py::gil_scoped_acquire acquire;
          return metrics_dict(r);
        },
        py::arg("model"), py::arg("hardware"), py::arg("trace"), py::arg("policy"),
        py::arg("seed") = 0, py::arg("config") = EngineConfig{});

  m.def("compare",
        [](const ModelSpec& model, const HardwareSpec& hw, const std::vector<ActivationTrace>& traces,
           const std::vector<PolicyConfig>& policies, std::uint64_t seed, const EngineConfig& cfg,
           unsigned threads) {
          ComparisonTable table;
          {
            py::gil_scoped_release release;
            table = run_comparison(model, hw, traces, policies, Seed{seed}, cfg, {}, threads);
          }
          py::list rows;
          for (const auto& r : table.rows) {
            auto d = metrics_dict(r.metrics);
            d["workload"] = r.workload;
            d["policy"] = r.policy_label;
            d["reduction_pct"] = r.reduction_pct;
            rows.append(d);
          }
          std::ostringstream csv;
          write_comparison_csv(csv, table);
          return py::make_tuple(rows, csv.str());
        },
        py::arg("model"), py::arg("hardware"), py::arg("traces"), py::arg("policies"),
        py::arg("seed") = 0, py::arg("config") = EngineConfig{}, py::arg("threads") = 1,
        "Paired runs of every policy on every trace; returns (rows, comparison CSV).");

  m.def("fit_decay",
        [](const std::vector<double>& steps, const std::vector<double>& values) {
          if (steps.size() != values.size()) throw ConfigError("steps and values differ in length");
          std::vector<DecayPoint> pts;
          for (std::size_t i = 0; i < steps.size(); ++i) pts.push_back({steps[i], values[i]});
          const auto f = fit_decay(pts);
          return py::make_tuple(f.a, f.b, f.c, f.residual_norm);
        },
        py::arg("steps"), py::arg("values"), "Least-squares a*exp(-b*t)+c; returns (a, b, c, residual).");

  m.def("cli",
        [](const std::string& command, const std::string& config, const std::string& out_dir,
           std::optional<std::uint64_t> seed, std::optional<std::string> preset,
           const std::string& log, const std::string& model, const std::string& csv,
           bool emit_events) {
          CommandOptions o;
          o.config = config;
          o.out_dir = out_dir;
          o.overrides.seed = seed;
          o.overrides.preset = preset;
          o.log = log;
          o.model_out = model;
          o.csv = csv;
          o.emit_events = emit_events;
          std::ostringstream out, err;
          int code = kExitUsage;
          {
            py::gil_scoped_release release;
            if (command == "simulate") code = cmd_simulate(o, out, err);
            else if (command == "compare") code = cmd_compare(o, out, err);
            else if (command == "train") code = cmd_train(o, out, err);
            else if (command == "fit") code = cmd_fit(o, out, err);
            else err << "unknown command '" << command << "'\n";
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("command"), py::arg("config") = "", py::arg("out_dir") = ".",
        py::arg("seed") = py::none(), py::arg("preset") = py::none(), py::arg("log") = "",
        py::arg("model") = "", py::arg("csv") = "", py::arg("emit_events") = false,
        "Runs a command-line subcommand in-process; returns (exit_code, stdout, stderr).");
}
