#include "mssnet/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <unistd.h>

using namespace mssnet;
using namespace mssnet::train;

namespace {

nn::MssNetConfig tiny_net() {
  nn::MssNetConfig c;
  c.in_channels = 3;
  c.num_classes = 3;
  c.encoder_channels = {8, 16, 16};
  c.decoder_channels = {16, 8};
  return c;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.lr = 0.1;
  c.epochs = 1;
  c.voxel_size = 0.2;
  c.augmentation = data::AugmentationConfig::disabled();
  return c;
}

Batch one_scene(std::uint64_t seed = 11, std::size_t points = 1500, double voxel = 0.2) {
  data::SyntheticDataset ds(seed, 1, points);
  const auto cloud = ds.load(0);
  return make_batch(std::span<const LabeledPointCloud>(&cloud, 1), data::DatasetKind::synthetic, voxel);
}

std::vector<Matrix> snapshot(nn::Network& net) {
  std::vector<Matrix> out;
  for (auto* p : net.parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST(Sgd, PlainGradientDescentWithoutMomentum) {
  ad::Parameter p("w", Matrix::Constant(1, 2, 1.0));
  p.grad << 0.5, -2.0;
  std::vector<ad::Parameter*> ps{&p};
  SgdState s;
  sgd_momentum_step(ps, s, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p.value(0, 0), 0.95);
  EXPECT_DOUBLE_EQ(p.value(0, 1), 1.2);
}

TEST(Sgd, MomentumAccumulatesAndDecayApplies) {
  ad::Parameter p("w", Matrix::Zero(1, 1));
  std::vector<ad::Parameter*> ps{&p};
  SgdState s;
  p.grad(0, 0) = 1.0;
  sgd_momentum_step(ps, s, 0.1, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(p.value(0, 0), -0.1);
  sgd_momentum_step(ps, s, 0.1, 0.9, 0.0);
  EXPECT_NEAR(p.value(0, 0), -0.1 - 0.1 * 1.9, 1e-15);

  ad::Parameter q("q", Matrix::Constant(1, 1, 2.0));
  std::vector<ad::Parameter*> qs{&q};
  SgdState s2;
  sgd_momentum_step(qs, s2, 0.5, 0.9, 0.1);
  EXPECT_DOUBLE_EQ(q.value(0, 0), 2.0 - 0.5 * 0.2);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  ad::Parameter p("w", Matrix::Constant(2, 2, 3.0));
  std::vector<ad::Parameter*> ps{&p};
  SgdState s;
  for (int i = 0; i < 3; ++i) sgd_momentum_step(ps, s, 0.5, 0.9, 0.0);
  EXPECT_TRUE(p.value == Matrix::Constant(2, 2, 3.0));
}

TEST(Sgd, NonFiniteGradientAbortsWithoutTouchingState) {
  ad::Parameter a("a", Matrix::Constant(1, 2, 1.0));
  ad::Parameter b("b", Matrix::Constant(1, 1, 1.0));
  std::vector<ad::Parameter*> ps{&a, &b};
  SgdState s;
  a.grad.setConstant(1.0);
  b.grad.setConstant(1.0);
  sgd_momentum_step(ps, s, 0.1, 0.9, 0.0);
  const Matrix av = a.value, bv = b.value, v0 = s.velocity[0], v1 = s.velocity[1];
  b.grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    sgd_momentum_step(ps, s, 0.1, 0.9, 0.0);
    FAIL() << "expected StepAbortedError";
  } catch (const StepAbortedError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_TRUE(a.value == av);
  EXPECT_TRUE(b.value == bv);
  EXPECT_TRUE(s.velocity[0] == v0);
  EXPECT_TRUE(s.velocity[1] == v1);
}

TEST(Schedule, CosineConstantAndStep) {
  TrainConfig c;
  c.lr = 0.2;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0, 100, 10), 0.2);
  EXPECT_NEAR(learning_rate(c, 50, 100, 10), 0.1, 1e-15);
  EXPECT_NEAR(learning_rate(c, 100, 100, 10), 0.0, 1e-15);
  c.schedule = Schedule::constant;
  EXPECT_DOUBLE_EQ(learning_rate(c, 77, 100, 10), 0.2);
  c.schedule = Schedule::step;
  c.step_milestones = {3, 6};
  c.step_gamma = 0.5;
  EXPECT_DOUBLE_EQ(learning_rate(c, 29, 100, 10), 0.2);
  EXPECT_DOUBLE_EQ(learning_rate(c, 30, 100, 10), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate(c, 65, 100, 10), 0.05);
  EXPECT_THROW(parse_schedule("linear"), ConfigError);
}

TEST(TrainConfigTest, ValidationAndRoundTrip) {
  TrainConfig c;
  c.lr = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.loss.ce = 0.0;
  c.loss.lovasz = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);

  c = TrainConfig{};
  c.lr = 0.013;
  c.schedule = Schedule::step;
  c.step_milestones = {2, 5};
  c.augmentation.rotate = false;
  KeyValueConfig kv;
  c.to_config(kv);
  const auto back = TrainConfig::from_config(kv);
  KeyValueConfig kv2;
  back.to_config(kv2);
  EXPECT_EQ(kv.serialize(), kv2.serialize());
}

TEST(Batching, VoxelLabelsAndPointMapping) {
  const auto b = one_scene();
  EXPECT_EQ(b.voxel_labels.size(), b.input.size());
  EXPECT_EQ(b.point_to_voxel.size(), b.point_labels.size());
  EXPECT_EQ(b.input.features.cols(), 3);
  for (auto v : b.point_to_voxel) ASSERT_LT(static_cast<std::size_t>(v), b.input.size());
}

TEST(Training, ZeroLearningRateKeepsParametersBitIdentical) {
  nn::Network net(tiny_net());
  const auto before = snapshot(net);
  const auto b = one_scene();
  SgdState s;
  auto cfg = tiny_train();
  for (int i = 0; i < 3; ++i) train_step(net, b, s, cfg, 0.0);
  const auto after = snapshot(net);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(before[i] == after[i]);
}

TEST(Training, LossDecreasesOnOneScene) {
  nn::Network net(tiny_net());
  const auto b = one_scene();
  SgdState s;
  auto cfg = tiny_train();
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(train_step(net, b, s, cfg, 0.05).loss);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 5; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, 0.5 * head);
}

TEST(Training, SameSeedSameTrajectory) {
  data::SyntheticDataset ds(20, 3, 800);
  auto cfg = tiny_train();
  cfg.augmentation = data::AugmentationConfig{};
  cfg.seed = 9;
  auto run = [&] {
    nn::Network net(tiny_net());
    SgdState s;
    std::size_t step = 0;
    std::ostringstream log;
    train_epoch(net, ds, cfg, s, 0, step, &log);
    train_epoch(net, ds, cfg, s, 1, step, &log);
    return std::make_pair(log.str(), snapshot(net));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(std::count(a.first.begin(), a.first.end(), '\n'), 6);
  for (std::size_t i = 0; i < a.second.size(); ++i) EXPECT_TRUE(a.second[i] == b.second[i]);
}

TEST(Training, NonFiniteStepNamesTheBatch) {
  data::SyntheticDataset ds(20, 2, 600);
  nn::Network net(tiny_net());
  net.parameters().front()->value(0, 0) = std::numeric_limits<double>::infinity();
  SgdState s;
  std::size_t step = 0;
  try {
    train_epoch(net, ds, tiny_train(), s, 0, step, nullptr);
    FAIL() << "expected StepAbortedError";
  } catch (const StepAbortedError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
  }
}

TEST(Evaluation, RepeatableAndSurvivesCheckpoint) {
  data::SyntheticDataset ds(30, 2, 800);
  nn::Network net(tiny_net());
  SgdState s;
  std::size_t step = 0;
  train_epoch(net, ds, tiny_train(), s, 0, step, nullptr);
  const auto r1 = evaluate(net, ds, 0.2);
  const auto r2 = evaluate(net, ds, 0.2);
  EXPECT_EQ(r1.points.total(), 1600u);
  for (std::uint32_t i = 0; i < 3; ++i)
    for (std::uint32_t j = 0; j < 3; ++j) EXPECT_EQ(r1.points.at(i, j), r2.points.at(i, j));

  const auto path = std::filesystem::temp_directory_path() /
                    ("mssnet_eval_" + std::to_string(::getpid()) + ".ckpt");
  nn::save_checkpoint(path, net, "");
  nn::Network other(tiny_net());
  nn::load_checkpoint(path, other);
  const auto r3 = evaluate(other, ds, 0.2);
  for (std::uint32_t i = 0; i < 3; ++i)
    for (std::uint32_t j = 0; j < 3; ++j) EXPECT_EQ(r1.voxels.at(i, j), r3.voxels.at(i, j));
  std::filesystem::remove(path);
}

TEST(Experiment, DatasetFillsChannelsAndRejectsConflicts) {
  KeyValueConfig kv;
  kv.set("data.kind", "synthetic");
  auto e = ExperimentConfig::from_config(kv);
  EXPECT_EQ(e.net.in_channels, 3);
  EXPECT_EQ(e.net.num_classes, 3);
  kv.set("net.num_classes", "5");
  EXPECT_THROW(ExperimentConfig::from_config(kv), ConfigError);
  kv.set("net.num_classes", "3");
  kv.set("data.kind", "kitti");
  EXPECT_THROW(ExperimentConfig::from_config(kv), ConfigError);
  KeyValueConfig s3;
  s3.set("data.kind", "s3dis");
  e = ExperimentConfig::from_config(s3);
  EXPECT_EQ(e.net.in_channels, 6);
  EXPECT_EQ(e.net.num_classes, 13);
  EXPECT_EQ(ExperimentConfig::from_config(KeyValueConfig::parse(e.canonical_text())).canonical_text(),
            e.canonical_text());
}

TEST(Experiment, AblationMatrix) {
  const auto& rows = ablation_rows();
  ASSERT_EQ(rows.size(), 5u);
  const bool expect[5][3] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}, {1, 1, 1}};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(rows[i].use_mffm, expect[i][0]) << rows[i].name;
    EXPECT_EQ(rows[i].use_acffm, expect[i][1]) << rows[i].name;
    EXPECT_EQ(rows[i].use_lovasz, expect[i][2]) << rows[i].name;
  }
  KeyValueConfig kv;
  kv.set("data.kind", "synthetic");
  kv.set("loss.w_lovasz", "0.7");
  const auto base = ExperimentConfig::from_config(kv);
  const auto b = apply_ablation(base, rows[0]);
  EXPECT_FALSE(b.net.use_mffm);
  EXPECT_FALSE(b.net.use_acffm);
  EXPECT_EQ(b.train.loss.lovasz, 0.0);
  const auto f = apply_ablation(base, rows[4]);
  EXPECT_TRUE(f.net.use_mffm && f.net.use_acffm);
  EXPECT_EQ(f.train.loss.ce, 1.0);
  EXPECT_EQ(f.train.loss.lovasz, 1.0);
}
