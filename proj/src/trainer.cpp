#include "mssnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

namespace mssnet::train {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix(mix(mix(a) ^ b) ^ c); }

}  // namespace

Schedule parse_schedule(const std::string& name) {
  if (name == "cosine") return Schedule::cosine;
  if (name == "constant") return Schedule::constant;
  if (name == "step") return Schedule::step;
  throw ConfigError("unknown lr schedule '" + name + "'");
}

namespace {

std::string schedule_name(Schedule s) {
  switch (s) {
    case Schedule::cosine: return "cosine";
    case Schedule::constant: return "constant";
    case Schedule::step: return "step";
  }
  return "?";
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(voxel_size > 0.0)) throw ConfigError("train.voxel_size must be > 0");
  loss.validate();
  augmentation.validate();
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& kv) {
  TrainConfig c;
  c.lr = kv.get_double("train.lr", c.lr);
  c.momentum = kv.get_double("train.momentum", c.momentum);
  c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
  c.epochs = static_cast<int>(kv.get_int("train.epochs", c.epochs));
  c.batch_size = static_cast<int>(kv.get_int("train.batch_size", c.batch_size));
  c.schedule = parse_schedule(kv.get_string("train.schedule", "cosine"));
  c.step_gamma = kv.get_double("train.step_gamma", c.step_gamma);
  c.step_milestones = kv.get_int_list("train.step_milestones", c.step_milestones);
  c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", 0));
  c.voxel_size = kv.get_double("train.voxel_size", c.voxel_size);
  c.loss.ce = kv.get_double("loss.w_ce", c.loss.ce);
  c.loss.lovasz = kv.get_double("loss.w_lovasz", c.loss.lovasz);
  c.augmentation = data::AugmentationConfig::from_config(kv);
  c.validate();
  return c;
}

void TrainConfig::to_config(KeyValueConfig& kv) const {
  kv.set("train.lr", format_double(lr));
  kv.set("train.momentum", format_double(momentum));
  kv.set("train.weight_decay", format_double(weight_decay));
  kv.set("train.epochs", std::to_string(epochs));
  kv.set("train.batch_size", std::to_string(batch_size));
  kv.set("train.schedule", schedule_name(schedule));
  kv.set("train.step_gamma", format_double(step_gamma));
  kv.set("train.step_milestones", join_ints(step_milestones));
  kv.set("train.seed", std::to_string(seed));
  kv.set("train.voxel_size", format_double(voxel_size));
  kv.set("loss.w_ce", format_double(loss.ce));
  kv.set("loss.w_lovasz", format_double(loss.lovasz));
  augmentation.to_config(kv);
}

double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total_steps,
                     std::size_t steps_per_epoch) {
  switch (config.schedule) {
    case Schedule::constant:
      return config.lr;
    case Schedule::cosine: {
      if (total_steps == 0) return config.lr;
      const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
      return 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * t));
    }
    case Schedule::step: {
      const std::size_t epoch = steps_per_epoch ? step / steps_per_epoch : 0;
      double lr = config.lr;
      for (int m : config.step_milestones)
        if (epoch >= static_cast<std::size_t>(m)) lr *= config.step_gamma;
      return lr;
    }
  }
  return config.lr;
}

void sgd_momentum_step(std::span<ad::Parameter* const> params, SgdState& state, double lr,
                       double momentum, double weight_decay) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (auto* p : params) state.velocity.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  if (state.velocity.size() != params.size()) throw ContractError("optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* p = params[i];
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols() ||
        state.velocity[i].rows() != p->value.rows() || state.velocity[i].cols() != p->value.cols())
      throw ContractError("shape mismatch for parameter " + p->name);
    if (!p->grad.allFinite()) {
      const auto bad = (!p->grad.array().isFinite()).count();
      throw StepAbortedError("non-finite gradient in " + p->name + " (" + std::to_string(bad) + " of " +
                             std::to_string(p->grad.size()) + " entries)");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    Matrix& v = state.velocity[i];
    v = momentum * v + p->grad;
    if (weight_decay != 0.0) v += weight_decay * p->value;
    p->value -= lr * v;
  }
}

Batch make_batch(std::span<const LabeledPointCloud> clouds, data::DatasetKind kind, double voxel_size) {
  if (clouds.empty()) throw EmptyInputError("make_batch: no clouds");
  std::vector<Matrix> features;
  features.reserve(clouds.size());
  std::size_t total = 0;
  for (const auto& c : clouds) {
    features.push_back(data::make_features(c, kind));
    total += c.size();
  }
  VoxelizationResult vox = voxelize_batch(clouds, voxel_size, features);
  Batch b;
  b.input = std::move(vox.tensor);
  b.voxel_labels = std::move(vox.voxel_labels);
  b.point_to_voxel = std::move(vox.point_to_voxel);
  b.positions.resize(static_cast<Eigen::Index>(total), 3);
  b.point_labels.reserve(total);
  Eigen::Index row = 0;
  for (const auto& c : clouds) {
    b.positions.middleRows(row, c.positions.rows()) = c.positions;
    row += c.positions.rows();
    b.point_labels.insert(b.point_labels.end(), c.labels.begin(), c.labels.end());
  }
  return b;
}

namespace {

double accuracy(const Matrix& logits, std::span<const std::uint32_t> labels) {
  const auto pred = loss::argmax_rows(logits);
  std::size_t scored = 0, correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    ++scored;
    correct += pred[i] == labels[i];
  }
  return scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
}

}  // namespace

StepResult train_step(nn::Network& net, const Batch& batch, SgdState& state, const TrainConfig& config,
                      double lr) {
  ad::Tape t;
  const nn::SparseVar in = nn::lift(t, batch.input);
  const nn::SparseVar out = net.forward(t, in, nn::Mode::train);
  const loss::CombinedTerms terms = loss::combined_loss(t, out.features, batch.voxel_labels, config.loss);
  net.zero_grad();
  t.backward(terms.total);
  StepResult r;
  r.loss = t.value(terms.total)(0, 0);
  r.ce = terms.ce;
  r.lovasz = terms.lovasz;
  r.voxel_accuracy = accuracy(t.value(out.features), batch.voxel_labels);
  if (!std::isfinite(r.loss)) throw StepAbortedError("non-finite loss");
  const auto params = net.parameters();
  sgd_momentum_step(params, state, lr, config.momentum, config.weight_decay);
  return r;
}

EpochSummary train_epoch(nn::Network& net, const data::Dataset& dataset, const TrainConfig& config,
                         SgdState& state, int epoch, std::size_t& global_step, std::ostream* log) {
  const std::size_t n = dataset.size();
  if (n == 0) throw EmptyInputError("training dataset is empty");
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(config.seed, static_cast<std::uint64_t>(epoch), 0x5u));
  std::shuffle(order.begin(), order.end(), rng);

  EpochSummary summary;
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < steps_per_epoch; ++b) {
    std::vector<LabeledPointCloud> clouds;
    for (std::size_t k = b * bs; k < std::min(n, (b + 1) * bs); ++k) {
      const std::size_t idx = order[k];
      clouds.push_back(data::augment(dataset.load(idx), config.augmentation,
                                     mix(config.seed, static_cast<std::uint64_t>(epoch), idx)));
    }
    const Batch batch = make_batch(clouds, dataset.kind(), config.voxel_size);
    const double lr = learning_rate(config, global_step, total_steps, steps_per_epoch);
    StepResult r;
    try {
      r = train_step(net, batch, state, config, lr);
    } catch (const StepAbortedError& e) {
      throw StepAbortedError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
    }
    if (log)
      *log << global_step << ',' << epoch << ',' << format_double(lr) << ',' << format_double(r.loss) << ','
           << format_double(r.ce) << ',' << format_double(r.lovasz) << '\n';
    loss_sum += r.loss;
    ++summary.steps;
    ++global_step;
  }
  summary.mean_loss = loss_sum / static_cast<double>(summary.steps);
  return summary;
}

std::vector<std::uint32_t> predict_points(nn::Network& net, const LabeledPointCloud& cloud,
                                          data::DatasetKind kind, double voxel_size) {
  const Batch b = make_batch(std::span(&cloud, 1), kind, voxel_size);
  const auto voxel_pred = loss::argmax_rows(net.predict_logits(b.input));
  std::vector<std::uint32_t> out(b.point_to_voxel.size());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = voxel_pred[static_cast<std::size_t>(b.point_to_voxel[p])];
  return out;
}

EvalResult evaluate(nn::Network& net, const data::Dataset& dataset, double voxel_size) {
  const int k = net.config().num_classes;
  EvalResult r{loss::ConfusionMatrix(k), loss::ConfusionMatrix(k)};
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const LabeledPointCloud cloud = dataset.load(i);
    const Batch b = make_batch(std::span(&cloud, 1), dataset.kind(), voxel_size);
    const auto voxel_pred = loss::argmax_rows(net.predict_logits(b.input));
    r.voxels.add(b.voxel_labels, voxel_pred);
    std::vector<std::uint32_t> point_pred(b.point_to_voxel.size());
    for (std::size_t p = 0; p < point_pred.size(); ++p)
      point_pred[p] = voxel_pred[static_cast<std::size_t>(b.point_to_voxel[p])];
    r.points.add(b.point_labels, point_pred);
  }
  return r;
}

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& kv) {
  ExperimentConfig c;
  c.raw = kv;
  c.dataset = data::parse_dataset_kind(kv.get_string("data.kind", "synthetic"));
  c.data_root = kv.get_string("data.root", "");
  KeyValueConfig net_kv = kv;
  if (!net_kv.has("net.in_channels")) net_kv.set("net.in_channels", std::to_string(data::feature_channels(c.dataset)));
  if (!net_kv.has("net.num_classes")) net_kv.set("net.num_classes", std::to_string(data::num_classes(c.dataset)));
  c.net = nn::MssNetConfig::from_config(net_kv);
  if (c.net.in_channels != data::feature_channels(c.dataset))
    throw ConfigError("net.in_channels = " + std::to_string(c.net.in_channels) + " but " +
                      data::to_string(c.dataset) + " features have " +
                      std::to_string(data::feature_channels(c.dataset)) + " channels");
  if (c.net.num_classes != data::num_classes(c.dataset))
    throw ConfigError("net.num_classes does not match the dataset's class count");
  c.train = TrainConfig::from_config(kv);
  return c;
}

std::string ExperimentConfig::canonical_text() const {
  KeyValueConfig kv = raw;
  kv.set("data.kind", data::to_string(dataset));
  kv.set("data.root", data_root);
  net.to_config(kv);
  train.to_config(kv);
  return kv.serialize();
}

const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows{
      {"Baseline", false, false, false},
      {"+MFFM", true, false, false},
      {"+ACFFM", false, true, false},
      {"+MFFM+ACFFM", true, true, false},
      {"+MFFM+ACFFM+lovasz", true, true, true},
  };
  return rows;
}

ExperimentConfig apply_ablation(const ExperimentConfig& base, const AblationRow& row) {
  ExperimentConfig c = base;
  c.net.use_mffm = row.use_mffm;
  c.net.use_acffm = row.use_acffm;
  c.train.loss.ce = 1.0;
  c.train.loss.lovasz = row.use_lovasz ? 1.0 : 0.0;
  c.net.validate();
  c.train.validate();
  return c;
}

RunResult run_experiment(const ExperimentConfig& config, nn::Network& net, std::ostream* log) {
  const auto train_set = data::open_dataset(config.dataset, config.data_root, "train", config.raw);
  const auto val_set = data::open_dataset(config.dataset, config.data_root, "val", config.raw);
  SgdState state;
  std::size_t global_step = 0;
  std::vector<EpochSummary> epochs;
  if (log) *log << kTrainLogHeader << '\n';
  for (int e = 0; e < config.train.epochs; ++e)
    epochs.push_back(train_epoch(net, *train_set, config.train, state, e, global_step, log));
  return {std::move(epochs), evaluate(net, *val_set, config.train.voxel_size)};
}

}  // namespace mssnet::train
