#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "tailsam/cncverify.hpp"
#include "tailsam/datagen.hpp"
#include "tailsam/losses.hpp"
#include "tailsam/model.hpp"
#include "tailsam/optim.hpp"
#include "tailsam/spectral.hpp"

namespace tailsam {

inline constexpr const char* kCodeVersion = "0.1.0";
inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr const char* kOutputDirEnv = "TAILSAM_OUTPUT_DIR";

struct AnalysisSettings {
  SpectrumSettings spectrum;
  std::vector<int> spectrum_classes;  // empty: every class
  std::vector<double> cnc_rhos;       // empty: {0, rho in effect}
  std::size_t cnc_batch_size = 0;     // 0: training batch size (capped at class size)
  std::size_t cnc_num_batches = 64;
  std::optional<int> cnc_class;       // default: the smallest class
  bool cnc_normalized = false;
};

struct ExperimentConfig {
  ImbalanceProfile profile;
  ClassGeometry geometry;
  std::size_t test_per_class = 200;
  std::optional<GroupThresholds> group_thresholds;
  MlpSpec model{{2, 16, 2}, Activation::Tanh, true};
  LossSpec loss;  // class_counts are filled in from the profile
  std::size_t drw_threshold = 0;  // T; equal to epochs means no re-weighting
  OptimizerConfig optimizer;
  LrSchedule lr;
  RhoSchedule rho_schedule;  // when non-empty, overrides rho / rho_drw
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::set<std::size_t> spectrum_epochs;
  std::set<std::size_t> cnc_epochs;
  std::set<std::size_t> checkpoint_epochs;
  AnalysisSettings analysis;
  std::string output_dir = "runs/default";
  /// Set from the command line; wins over the environment and output_dir.
  std::optional<std::string> output_dir_override;

  void validate() const;
};

/// Strict: unknown keys are a config error. Missing keys take defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a over the canonical JSON dump, output_dir excluded. Hex string.
std::string config_hash(const ExperimentConfig& cfg);

/// override > $TAILSAM_OUTPUT_DIR > cfg.output_dir.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);

struct GroupAccuracy {
  std::vector<double> per_class_accuracy;
  std::vector<double> per_class_loss;  // unweighted cross-entropy
  double overall = 0.0;                // mean of per-class accuracies
  std::optional<double> head, mid, tail;
};

GroupAccuracy evaluate(const MlpSpec& spec, std::span<const double> w, const LabeledDataset& test,
                       const ClassGroups& groups);

struct MetricsRecord {
  std::size_t epoch = 0;  // completed epochs
  double lr = 0.0;
  double rho = 0.0;
  double train_loss = 0.0;
  double grad_norm = 0.0;
  GroupAccuracy eval;
  Vector class_weights;  // raw per-class weights used during the epoch
  std::uint64_t skipped_perturbations = 0;
};

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  std::string config_hash;
  std::size_t epoch = 0;
  Vector params;
  Vector velocity;
  std::uint64_t step_count = 0;
  std::uint64_t skipped_perturbations = 0;
  RngState shuffle_rng;
  RngState optimizer_rng;
  nlohmann::json config;

  bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Data derived deterministically from a config: training set, balanced
/// test set and class groups.
struct ExperimentData {
  LabeledDataset train;
  LabeledDataset test;
  ClassGroups groups;
};

ExperimentData make_data(const ExperimentConfig& cfg);

/// The class with the fewest training samples (last one on ties).
int smallest_class(const LabeledDataset& ds);

struct RunOptions {
  bool write_outputs = true;
  const Checkpoint* resume_from = nullptr;
};

struct RunResult {
  ParamVector final_params;
  std::vector<MetricsRecord> metrics;
  std::vector<std::filesystem::path> artifacts;
  std::filesystem::path output_dir;
  std::string config_hash;
};

/// Seeded training with the deferred re-weighting phase switch: before
/// epoch T unit weights and rho, from T the 1/n_y weights and rho_drw. One
/// momentum buffer spans both phases. Analyses use their own RNG streams
/// and never touch the training streams.
RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

/// Extreme eigenpairs of one class's loss Hessian at w.
ExtremeEigs class_extremes(const ExperimentConfig& cfg, const ExperimentData& data,
                           std::span<const double> w, int class_id, std::uint64_t stream);

/// Class-wise spectra for `classes` (empty: all), written under out_dir.
std::vector<std::filesystem::path> write_spectrum_snapshot(
    const ExperimentConfig& cfg, const ExperimentData& data, std::span<const double> w,
    std::size_t epoch, const std::vector<int>& classes, const std::filesystem::path& out_dir);

/// CNC report on one class's mini-batch objective, written under out_dir.
CncReport write_cnc_snapshot(const ExperimentConfig& cfg, const ExperimentData& data,
                                  std::span<const double> w, std::size_t epoch,
                                  const std::vector<double>& rhos, std::optional<int> class_id,
                                  const std::filesystem::path& out_dir,
                                  std::vector<std::filesystem::path>* artifacts = nullptr);

struct SweepRow {
  double rho = 0.0;
  double overall_acc = 0.0;
  std::optional<double> tail_acc;
  double tail_lambda_min = 0.0;
  double tail_lambda_max = 0.0;
  std::optional<std::string> error;
};

/// One SAM run per rho (rho_drw = rho) on shared data and seed. Failed runs
/// are recorded and the sweep continues. Writes sweep_rho.csv when out_dir
/// is set.
std::vector<SweepRow> sweep_rho(const ExperimentConfig& base, const std::vector<double>& rhos,
                                const std::optional<std::filesystem::path>& out_dir);

/// Config with every rho-related knob set to `rho` and the optimizer set to SAM.
ExperimentConfig with_sam_rho(ExperimentConfig cfg, double rho);

}  // namespace tailsam
