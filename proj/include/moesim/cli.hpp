#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moesim/config.hpp"
#include "moesim/decay_fit.hpp"
#include "moesim/engine.hpp"
#include "moesim/forest.hpp"
#include "moesim/workload.hpp"

namespace moesim {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitValidation = 2, kExitRuntime = 3 };

struct WorkloadConfig {
  std::uint32_t num_workloads = 4;
  std::uint32_t requests_per_batch = 1;
  std::uint32_t tokens_per_request = 8;
  TraceGenConfig gen;
  std::optional<std::filesystem::path> log;  // replay a recorded activation log instead
};

struct ForestConfig {
  ForestHyper hyper;
  std::optional<std::filesystem::path> model_path;  // trained model for the forest predictor
  double holdout_fraction = 0.2;
  double threshold = 0.5;
};

struct ExperimentConfig {
  Seed seed{42};
  ModelSpec model;
  HardwareSpec hw;
  WorkloadConfig workload;
  EngineConfig engine;
  std::vector<PolicyConfig> policies;
  ForestConfig forest;
  unsigned threads = 0;

  /// Relative paths inside `j` resolve against `base_dir`. Unknown keys,
  /// unresolvable presets and empty policy lists raise ConfigError.
  static ExperimentConfig from_json(const Json& j, const std::filesystem::path& base_dir = {});
};

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
};

ExperimentConfig load_experiment(const std::filesystem::path& path,
                                 const ConfigOverrides& overrides = {});

/// Token embeddings shared by trace generation and feature construction.
EmbeddingTable experiment_embedding(const ExperimentConfig& cfg);

/// Generated batches, or one trace per request recorded in the replay log.
std::vector<ActivationTrace> build_workloads(const ExperimentConfig& cfg,
                                             const EmbeddingTable& table);

/// Replay traces: one per token sequence, gates uniform over the recorded
/// experts. Every layer of the model must be present.
std::vector<ActivationTrace> traces_from_log(std::span<const Sample> samples,
                                             const ModelSpec& model);

struct AccuracyRow {
  std::string step;  // a step size, or "all"
  std::size_t rows = 0;
  double predictor = 0.0;
  double pregate = 0.0;
};

struct TrainResult {
  ForestModel model;
  std::vector<AccuracyRow> accuracy;
  bool evaluated_on_training = false;  // no holdout group was available
};

/// Trains on the log's request groups and evaluates on a deterministic holdout.
/// Rows whose layer is below their step size are not scored: nothing could
/// have issued them.
TrainResult train_from_samples(std::span<const Sample> samples, const ExperimentConfig& cfg);

/// Columns: step_size,predictor_acc,pregate_acc,rows
void write_accuracy_csv(std::ostream& out, std::span<const AccuracyRow> rows);

struct CurveReport {
  std::string name;
  DecayFit fit;
};

struct FitReport {
  std::vector<CurveReport> curves;
  std::vector<std::pair<std::string, double>> gaps;  // "<a> - <b>" -> asymptote gap
};

/// Input: header row, step in the first column, one curve per further column
/// (a column named "rows" is ignored). Non-numeric steps such as "all" are
/// skipped. Gaps pair the curves as (1, 2), (3, 4), ...
FitReport fit_accuracy_csv(std::istream& in);

struct CommandOptions {
  std::filesystem::path config;
  ConfigOverrides overrides;
  std::filesystem::path out_dir = ".";
  bool emit_events = false;
  std::filesystem::path log;        // train
  std::filesystem::path model_out;  // train
  std::filesystem::path csv;        // fit
};

/// Each command reports to `out`/`err` and returns an ExitCode.
int cmd_simulate(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_compare(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_train(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_fit(const CommandOptions& opts, std::ostream& out, std::ostream& err);

}  // namespace moesim
