#pragma once

#include "mssnet/sparse_ops.hpp"

#include <array>
#include <random>
#include <string>
#include <vector>

namespace mssnet::nn {

/// relu(x + BN(conv2(relu(BN(conv1(x)))))) with two K=3 submanifold convs.
struct ResidualUnit {
  ConvLayer conv1;
  ConvLayer conv2;
  BatchNormLayer norm1;
  BatchNormLayer norm2;

  static ResidualUnit make(const std::string& name, Eigen::Index channels, std::mt19937_64& rng);
  Eigen::Index channels() const noexcept { return conv1.in_channels; }
  void collect(std::vector<ad::Parameter*>& out);
  void collect_buffers(std::vector<Buffer>& out);
};

SparseVar residual_forward(ad::Tape& t, const SparseVar& x, ResidualUnit& unit, Mode mode);

/// Scale-score head f_i: linear -> BN -> relu -> linear. Produces one score
/// column per voxel (or one per channel in per-channel mode).
struct ScoreMlp {
  LinearLayer hidden;
  BatchNormLayer norm;
  LinearLayer score;

  static ScoreMlp make(const std::string& name, Eigen::Index channels, Eigen::Index outputs,
                       std::mt19937_64& rng);
  void collect(std::vector<ad::Parameter*>& out);
  void collect_buffers(std::vector<Buffer>& out);
};

struct MffmConfig {
  std::array<int, 3> kernel_sizes{3, 5, 7};  // small, medium, large
  int out_kernel_size = 3;                   // kernel of the output transform F
  /// SKNet-style per-channel scores instead of one scalar per voxel and scale.
  bool per_channel_scores = false;
};

/// Multi-scale feature fusion: three submanifold branches of growing kernel
/// size, a K=1 point branch, softmax scale scores and an output transform.
struct MffmBlock {
  std::array<ConvLayer, 3> branch_convs;
  ConvLayer point_conv;
  std::array<ScoreMlp, 3> score_mlps;
  ConvLayer out_conv;
  BatchNormLayer out_norm;
  MffmConfig config;

  static MffmBlock make(const std::string& name, Eigen::Index channels, const MffmConfig& config,
                        std::mt19937_64& rng);
  Eigen::Index channels() const noexcept { return point_conv.in_channels; }
  void collect(std::vector<ad::Parameter*>& out);
  void collect_buffers(std::vector<Buffer>& out);
};

struct MffmOutput {
  SparseVar output;                 // O = F(x0 + sum_i x_i * S[:, i])
  SparseVar point;                  // x0
  std::array<SparseVar, 3> branches;  // x1, x2, x3
  ad::Var scores;                   // S, N x 3 (N x 3C in per-channel mode)
};

MffmOutput mffm_forward(ad::Tape& t, const SparseVar& x, MffmBlock& block, Mode mode);

/// Softmax over the three scale groups of an N x 3C score matrix: for each
/// row and channel c, normalizes columns {c, C + c, 2C + c}. With C = 1 this
/// is the plain row softmax.
ad::Var scale_softmax(ad::Tape& t, ad::Var scores, Eigen::Index group_width);

/// Attentive channel feature filter: residual units on the three inputs,
/// relu fusion, global pooling, two-layer excitation and channel scaling.
struct AcffmBlock {
  std::array<ResidualUnit, 3> residual_units;
  ad::Parameter w1;  // (C / r) x C
  ad::Parameter w2;  // C x (C / r)
  int reduction = 4;

  static AcffmBlock make(const std::string& name, Eigen::Index channels, int reduction,
                         std::mt19937_64& rng);
  Eigen::Index channels() const noexcept { return w1.value.cols(); }
  void collect(std::vector<ad::Parameter*>& out);
  void collect_buffers(std::vector<Buffer>& out);
};

struct AcffmOutput {
  SparseVar output;  // s_c * fused
  SparseVar fused;   // relu(x1' + x2' + x3')
  ad::Var pooled;    // B x C
  ad::Var weights;   // B x C, in (0, 1)
};

/// s = sigmoid(relu(pooled W1^T) W2^T), row per batch element.
ad::Var channel_excitation(ad::Tape& t, ad::Var pooled, AcffmBlock& block);

AcffmOutput acffm_forward(ad::Tape& t, const SparseVar& x1, const SparseVar& x2,
                          const SparseVar& x3, AcffmBlock& block, Mode mode);

}  // namespace mssnet::nn
