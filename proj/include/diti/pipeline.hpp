#pragma once

// Experiment configuration, stage runners and run manifests.
//
// Every stage reads its inputs from and writes its outputs to one run
// directory:
//   dataset/            gen-data
//   dm.ckpt             train-dm
//   diti.ckpt ...       train-diti
//   metrics/*.csv       all stages; compared byte-for-byte across reruns
//   images/*.pgm        generate
//   manifests/<stage>.json
//   timing/<stage>.json wall-clock seconds, kept out of the manifests

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "diti/diti.hpp"
#include "diti/synth.hpp"
#include "json.hpp"

namespace diti {

/// Malformed or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimSettings {
  double lr = 1e-3;
  int iterations = 1000;
  int batch_size = 64;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "run";

  int T = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  std::string dataset_spec_file;  // empty: the reference spec
  int n_samples = 2048;

  std::vector<std::size_t> dm_hidden{256, 256, 256};
  double sigma_data = 0.5;
  OptimSettings dm_optim{1e-3, 20000, 64};

  EncoderDecoderConfig net;
  PartitionKind partition = PartitionKind::Balanced;
  int k = 8;
  int d = 64;
  OptimSettings diti_optim{1e-3, 15000, 64};
  bool detach = false;
  bool ablation_k1 = true;
  int sufficiency_seeds = 3;
  int sufficiency_iterations = 4000;

  int sampling_steps = 51;  // M, including t = 0

  std::int64_t mc_samples = 1000000;
  std::vector<double> taus{0.05, 0.1, 0.2};
  int profile_pairs = 1000;

  int probe_iterations = 2000;
  double probe_lr = 0.5;
  double probe_l2 = 0.0;

  int sparse_budget = 16;
  std::vector<double> lambdas{-2.0, -1.0, 0.0, 1.0, 2.0};
  int generate_rows = 8;

  double budget_seconds = 1800.0;
};

/// Strict parse: unknown keys, wrong types and a missing seed are errors
/// naming the offending field.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
/// Reads a UTF-8 JSON file; syntax errors report line and column.
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& c);
/// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

std::string version_string();

enum class Stage { GenData, TrainDm, TrainDiti, VerifyTheory, Probe, Generate, Report };
const std::vector<Stage>& all_stages();
std::string to_string(Stage s);
Stage stage_from_string(const std::string& name);

/// Per-invocation knobs that do not belong in the experiment config.
struct StageOptions {
  std::string generate_mode = "all";  // all, interpolate or manipulate
  std::vector<int> subsets;           // interpolate: empty = each subset in turn
};

/// Runs one stage in `dir`. Writes the stage manifest whether or not the
/// stage succeeds; exceptions propagate after the manifest marks the failure.
void run_stage(Stage stage, const ExperimentConfig& cfg, const std::filesystem::path& dir,
               const StageOptions& opts = {});

struct CriterionResult {
  int id = 0;
  std::string name;
  bool evaluated = false;  // false when its metric files are missing
  bool pass = false;
  std::string detail;
};

/// Acceptance criteria that can be judged from a run's metric CSVs alone.
std::vector<CriterionResult> evaluate_run(const std::filesystem::path& dir);

/// Metric CSVs of a run directory, relative paths in sorted order.
std::vector<std::filesystem::path> metric_files(const std::filesystem::path& dir);

/// Minimal CSV reader for the files this pipeline writes.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;
  double number(std::size_t row, const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace diti
