#include "mssnet/attention.hpp"

#include <cmath>
#include <string>

namespace mssnet::nn {

using ad::BackwardArgs;
using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Residual unit

ResidualUnit ResidualUnit::make(const std::string& name, Eigen::Index channels,
                                std::mt19937_64& rng) {
  return ResidualUnit{
      ConvLayer::make(name + ".conv1", channels, channels, 3, 1, false, false, rng),
      ConvLayer::make(name + ".conv2", channels, channels, 3, 1, false, false, rng),
      BatchNormLayer::make(name + ".norm1", channels),
      BatchNormLayer::make(name + ".norm2", channels),
  };
}

void ResidualUnit::collect(std::vector<ad::Parameter*>& out) {
  conv1.collect(out);
  norm1.collect(out);
  conv2.collect(out);
  norm2.collect(out);
}

void ResidualUnit::collect_buffers(std::vector<Buffer>& out) {
  norm1.collect_buffers(out);
  norm2.collect_buffers(out);
}

SparseVar residual_forward(Tape& t, const SparseVar& x, ResidualUnit& unit, Mode mode) {
  const Eigen::Index width = t.value(x.features).cols();
  if (width != unit.channels() || unit.conv2.out_channels != width)
    throw ConfigError("residual unit expects " + std::to_string(unit.channels()) +
                      " channels, got " + std::to_string(width));
  SparseVar h = relu(t, batch_norm(t, submanifold_conv(t, x, unit.conv1), unit.norm1, mode));
  h = batch_norm(t, submanifold_conv(t, h, unit.conv2), unit.norm2, mode);
  return relu(t, add(t, x, h));
}

// ---------------------------------------------------------------------------
// MFFM

ScoreMlp ScoreMlp::make(const std::string& name, Eigen::Index channels, Eigen::Index outputs,
                        std::mt19937_64& rng) {
  return ScoreMlp{
      LinearLayer::make(name + ".hidden", channels, channels, false, rng),
      BatchNormLayer::make(name + ".norm", channels),
      LinearLayer::make(name + ".score", channels, outputs, true, rng),
  };
}

void ScoreMlp::collect(std::vector<ad::Parameter*>& out) {
  hidden.collect(out);
  norm.collect(out);
  score.collect(out);
}

void ScoreMlp::collect_buffers(std::vector<Buffer>& out) { norm.collect_buffers(out); }

MffmBlock MffmBlock::make(const std::string& name, Eigen::Index channels, const MffmConfig& config,
                          std::mt19937_64& rng) {
  const Eigen::Index score_width = config.per_channel_scores ? channels : 1;
  MffmBlock b{
      {ConvLayer::make(name + ".branch1", channels, channels, config.kernel_sizes[0], 1, false, false, rng),
       ConvLayer::make(name + ".branch2", channels, channels, config.kernel_sizes[1], 1, false, false, rng),
       ConvLayer::make(name + ".branch3", channels, channels, config.kernel_sizes[2], 1, false, false, rng)},
      ConvLayer::make(name + ".point", channels, channels, 1, 1, false, false, rng),
      {ScoreMlp::make(name + ".score1", channels, score_width, rng),
       ScoreMlp::make(name + ".score2", channels, score_width, rng),
       ScoreMlp::make(name + ".score3", channels, score_width, rng)},
      ConvLayer::make(name + ".out", channels, channels, config.out_kernel_size, 1, false, false, rng),
      BatchNormLayer::make(name + ".out_norm", channels),
      config,
  };
  return b;
}

void MffmBlock::collect(std::vector<ad::Parameter*>& out) {
  for (auto& c : branch_convs) c.collect(out);
  point_conv.collect(out);
  for (auto& s : score_mlps) s.collect(out);
  out_conv.collect(out);
  out_norm.collect(out);
}

void MffmBlock::collect_buffers(std::vector<Buffer>& out) {
  for (auto& s : score_mlps) s.collect_buffers(out);
  out_norm.collect_buffers(out);
}

Var scale_softmax(Tape& t, Var scores, Eigen::Index group_width) {
  const Matrix& u = t.value(scores);
  if (group_width < 1 || u.cols() != 3 * group_width)
    throw ConfigError("scale_softmax: expected 3 score groups");
  if (group_width == 1) return ad::softmax_rows(t, scores);
  const Eigen::Index c = group_width;
  Matrix s(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i)
    for (Eigen::Index j = 0; j < c; ++j) {
      const double m = std::max({u(i, j), u(i, c + j), u(i, 2 * c + j)});
      const double e0 = std::exp(u(i, j) - m);
      const double e1 = std::exp(u(i, c + j) - m);
      const double e2 = std::exp(u(i, 2 * c + j) - m);
      const double z = e0 + e1 + e2;
      s(i, j) = e0 / z;
      s(i, c + j) = e1 / z;
      s(i, 2 * c + j) = e2 / z;
    }
  return t.record("scale_softmax", {scores}, std::move(s), [c](const BackwardArgs& g) {
    if (!g.input_grads[0]) return;
    const Matrix& s = g.output;
    Matrix& d = *g.input_grads[0];
    for (Eigen::Index i = 0; i < s.rows(); ++i)
      for (Eigen::Index j = 0; j < c; ++j) {
        const double dot = g.grad_output(i, j) * s(i, j) + g.grad_output(i, c + j) * s(i, c + j) +
                           g.grad_output(i, 2 * c + j) * s(i, 2 * c + j);
        for (Eigen::Index k = 0; k < 3; ++k)
          d(i, k * c + j) += s(i, k * c + j) * (g.grad_output(i, k * c + j) - dot);
      }
  });
}

MffmOutput mffm_forward(Tape& t, const SparseVar& x, MffmBlock& block, Mode mode) {
  const Eigen::Index width = t.value(x.features).cols();
  if (width != block.channels())
    throw ConfigError("MFFM expects " + std::to_string(block.channels()) + " channels, got " +
                      std::to_string(width));
  MffmOutput out;
  for (std::size_t i = 0; i < 3; ++i) out.branches[i] = submanifold_conv(t, x, block.branch_convs[i]);
  out.point = submanifold_conv(t, x, block.point_conv);

  const SparseVar fused = add(t, add(t, out.branches[0], out.branches[1]), out.branches[2]);
  std::array<Var, 3> u{};
  for (std::size_t i = 0; i < 3; ++i) {
    ScoreMlp& f = block.score_mlps[i];
    SparseVar h = relu(t, batch_norm(t, pointwise_linear(t, fused, f.hidden), f.norm, mode));
    u[i] = pointwise_linear(t, h, f.score).features;
  }
  const Var u_cat = ad::concat_cols(t, ad::concat_cols(t, u[0], u[1]), u[2]);
  const Eigen::Index group = block.config.per_channel_scores ? width : 1;
  out.scores = scale_softmax(t, u_cat, group);

  Var weighted = out.point.features;
  for (std::size_t i = 0; i < 3; ++i) {
    const Var s_i = ad::slice_cols(t, out.scores, static_cast<Eigen::Index>(i) * group, group);
    const Var term = group == 1 ? ad::mul_col_broadcast(t, out.branches[i].features, s_i)
                                : ad::hadamard(t, out.branches[i].features, s_i);
    weighted = ad::add(t, weighted, term);
  }
  const SparseVar pre{x.coords, weighted, x.stride};
  out.output = batch_norm(t, submanifold_conv(t, pre, block.out_conv), block.out_norm, mode);
  return out;
}

// ---------------------------------------------------------------------------
// ACFFM

AcffmBlock AcffmBlock::make(const std::string& name, Eigen::Index channels, int reduction,
                            std::mt19937_64& rng) {
  if (reduction < 1 || channels % reduction != 0)
    throw ConfigError(name + ": channel width " + std::to_string(channels) +
                      " is not divisible by reduction " + std::to_string(reduction));
  const Eigen::Index reduced = channels / reduction;
  std::normal_distribution<double> d1(0.0, std::sqrt(2.0 / static_cast<double>(channels)));
  std::normal_distribution<double> d2(0.0, std::sqrt(1.0 / static_cast<double>(reduced)));
  Matrix w1(reduced, channels);
  for (Eigen::Index i = 0; i < w1.size(); ++i) w1.data()[i] = d1(rng);
  Matrix w2(channels, reduced);
  for (Eigen::Index i = 0; i < w2.size(); ++i) w2.data()[i] = d2(rng);
  AcffmBlock b{
      {ResidualUnit::make(name + ".res1", channels, rng), ResidualUnit::make(name + ".res2", channels, rng),
       ResidualUnit::make(name + ".res3", channels, rng)},
      ad::Parameter(name + ".w1", std::move(w1)),
      ad::Parameter(name + ".w2", std::move(w2)),
      reduction,
  };
  return b;
}

void AcffmBlock::collect(std::vector<ad::Parameter*>& out) {
  for (auto& r : residual_units) r.collect(out);
  out.push_back(&w1);
  out.push_back(&w2);
}

void AcffmBlock::collect_buffers(std::vector<Buffer>& out) {
  for (auto& r : residual_units) r.collect_buffers(out);
}

Var channel_excitation(Tape& t, Var pooled, AcffmBlock& block) {
  if (t.value(pooled).cols() != block.channels())
    throw ConfigError("channel excitation: pooled width does not match block");
  const Var hidden = ad::relu(t, ad::matmul(t, pooled, ad::transpose(t, t.parameter(block.w1))));
  return ad::sigmoid(t, ad::matmul(t, hidden, ad::transpose(t, t.parameter(block.w2))));
}

AcffmOutput acffm_forward(Tape& t, const SparseVar& x1, const SparseVar& x2, const SparseVar& x3,
                          AcffmBlock& block, Mode mode) {
  require_aligned(x1, x2, "ACFFM");
  require_aligned(x1, x3, "ACFFM");
  AcffmOutput out;
  const SparseVar r1 = residual_forward(t, x1, block.residual_units[0], mode);
  const SparseVar r2 = residual_forward(t, x2, block.residual_units[1], mode);
  const SparseVar r3 = residual_forward(t, x3, block.residual_units[2], mode);
  out.fused = relu(t, add(t, add(t, r1, r2), r3));
  out.pooled = global_avg_pool(t, out.fused);
  out.weights = channel_excitation(t, out.pooled, block);
  out.output = scale_channels(t, out.fused, out.weights);
  return out;
}

}  // namespace mssnet::nn
