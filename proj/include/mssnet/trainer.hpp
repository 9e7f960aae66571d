#pragma once

#include "mssnet/data.hpp"
#include "mssnet/losses.hpp"
#include "mssnet/network.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mssnet::train {

enum class Schedule { cosine, constant, step };

struct TrainConfig {
  double lr = 0.24;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 10;
  int batch_size = 1;       // scenes per step
  Schedule schedule = Schedule::cosine;
  double step_gamma = 0.1;  // step schedule: lr *= gamma at each milestone
  std::vector<int> step_milestones;  // epochs
  std::uint64_t seed = 0;
  double voxel_size = 0.05;
  loss::LossWeights loss;
  data::AugmentationConfig augmentation;

  void validate() const;
  static TrainConfig from_config(const KeyValueConfig& kv);
  void to_config(KeyValueConfig& kv) const;
};

Schedule parse_schedule(const std::string& name);

/// Learning rate for 0-based `step` out of `total_steps`. Cosine decays to
/// zero at total_steps.
double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total_steps,
                     std::size_t steps_per_epoch);

/// Momentum buffers, one per parameter, shaped like the parameter.
struct SgdState {
  std::vector<Matrix> velocity;
};

/// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v.
/// Throws StepAbortedError, leaving every parameter and velocity untouched,
/// when any gradient entry is non-finite.
void sgd_momentum_step(std::span<ad::Parameter* const> params, SgdState& state, double lr,
                       double momentum, double weight_decay);

/// A voxelized batch ready for the network.
struct Batch {
  SparseTensor input;
  std::vector<std::uint32_t> voxel_labels;
  std::vector<std::int32_t> point_to_voxel;
  std::vector<std::uint32_t> point_labels;
  Matrix positions;  // concatenated point positions
};

/// Voxelizes `clouds` (already augmented) with dataset-specific features.
Batch make_batch(std::span<const LabeledPointCloud> clouds, data::DatasetKind kind, double voxel_size);

struct StepResult {
  double loss = 0.0;
  double ce = 0.0;
  double lovasz = 0.0;
  double voxel_accuracy = 0.0;  // of the forward pass that produced `loss`
};

/// One forward/backward/update on `batch` in train mode.
StepResult train_step(nn::Network& net, const Batch& batch, SgdState& state, const TrainConfig& config,
                      double lr);

struct EpochSummary {
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

/// Runs one epoch: shuffle (seeded by config.seed and epoch), then per batch
/// augment -> voxelize -> forward -> combined loss -> backward -> step.
/// `global_step` is advanced. When `log` is non-null one CSV row per step is
/// written (columns: step,epoch,lr,loss,ce,lovasz). A failed step rethrows
/// StepAbortedError naming the batch.
EpochSummary train_epoch(nn::Network& net, const data::Dataset& dataset, const TrainConfig& config,
                         SgdState& state, int epoch, std::size_t& global_step, std::ostream* log);

inline constexpr const char* kTrainLogHeader = "step,epoch,lr,loss,ce,lovasz";

struct EvalResult {
  loss::ConfusionMatrix points;  // per-point, after devoxelization
  loss::ConfusionMatrix voxels;  // per-voxel against majority labels
};

/// Eval-mode pass over every scene without augmentation.
EvalResult evaluate(nn::Network& net, const data::Dataset& dataset, double voxel_size);

/// Per-point predicted labels for one cloud.
std::vector<std::uint32_t> predict_points(nn::Network& net, const LabeledPointCloud& cloud,
                                          data::DatasetKind kind, double voxel_size);

/// Everything a training run depends on, read from one key-value file.
struct ExperimentConfig {
  data::DatasetKind dataset = data::DatasetKind::synthetic;
  std::string data_root;
  nn::MssNetConfig net;
  TrainConfig train;
  KeyValueConfig raw;  // the full key set, passed to dataset construction

  /// Dataset-dependent defaults (in_channels, num_classes) are filled in
  /// unless set explicitly.
  static ExperimentConfig from_config(const KeyValueConfig& kv);
  /// Canonical text of every resolved setting (stored in checkpoints).
  std::string canonical_text() const;
};

/// One row of the ablation matrix.
struct AblationRow {
  std::string name;
  bool use_mffm = false;
  bool use_acffm = false;
  bool use_lovasz = false;
};

/// The five rows: Baseline, +MFFM, +ACFFM, +MFFM+ACFFM, +MFFM+ACFFM+lovasz.
const std::vector<AblationRow>& ablation_rows();

/// Applies the row's switches on top of `base`.
ExperimentConfig apply_ablation(const ExperimentConfig& base, const AblationRow& row);

struct RunResult {
  std::vector<EpochSummary> epochs;
  EvalResult eval;
};

/// Builds the network, trains for config.train.epochs on the train split and
/// evaluates on the val split.
RunResult run_experiment(const ExperimentConfig& config, nn::Network& net, std::ostream* log);

}  // namespace mssnet::train
