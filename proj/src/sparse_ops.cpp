#include "mssnet/sparse_ops.hpp"

#include <cmath>
#include <string>

namespace mssnet::nn {

using ad::BackwardArgs;
using ad::Tape;
using ad::Var;

SparseVar lift(Tape& t, const SparseTensor& x, bool requires_grad) {
  if (!x.coords) throw PipelineError("sparse tensor has no coordinate map");
  if (static_cast<std::size_t>(x.features.rows()) != x.coords->size())
    throw InvalidInputError("feature rows do not match coordinate count");
  Var f = requires_grad ? t.input(x.features) : t.constant(x.features);
  return {x.coords, f, x.stride};
}

namespace {

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

ConvLayer ConvLayer::make(const std::string& name, Eigen::Index in_channels,
                          Eigen::Index out_channels, int kernel_size, int stride, bool transposed,
                          bool with_bias, std::mt19937_64& rng) {
  const auto volume = static_cast<Eigen::Index>(kernel_offsets(kernel_size).size());
  if (in_channels < 1 || out_channels < 1) throw ConfigError(name + ": channel widths must be positive");
  if (stride != 1 && stride != 2) throw ConfigError(name + ": stride must be 1 or 2");
  ConvLayer layer;
  layer.kernel_size = kernel_size;
  layer.stride = stride;
  layer.transposed = transposed;
  layer.in_channels = in_channels;
  layer.out_channels = out_channels;
  // He initialization over the full kernel fan-in.
  const double stddev = std::sqrt(2.0 / static_cast<double>(volume * in_channels));
  layer.kernel = ad::Parameter(name + ".kernel",
                               random_normal(volume * in_channels, out_channels, stddev, rng));
  if (with_bias) layer.bias = ad::Parameter(name + ".bias", Matrix::Zero(1, out_channels));
  return layer;
}

void ConvLayer::collect(std::vector<ad::Parameter*>& out) {
  out.push_back(&kernel);
  if (bias) out.push_back(&*bias);
}

BatchNormLayer BatchNormLayer::make(const std::string& name, Eigen::Index channels) {
  BatchNormLayer bn;
  bn.gamma = ad::Parameter(name + ".gamma", Matrix::Ones(1, channels));
  bn.beta = ad::Parameter(name + ".beta", Matrix::Zero(1, channels));
  bn.running_mean = Matrix::Zero(1, channels);
  bn.running_var = Matrix::Ones(1, channels);
  bn.name = name;
  return bn;
}

void BatchNormLayer::collect(std::vector<ad::Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

void BatchNormLayer::collect_buffers(std::vector<Buffer>& out) {
  out.push_back({name + ".running_mean", &running_mean});
  out.push_back({name + ".running_var", &running_var});
}

LinearLayer LinearLayer::make(const std::string& name, Eigen::Index in_channels,
                              Eigen::Index out_channels, bool with_bias, std::mt19937_64& rng) {
  LinearLayer l;
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_channels));
  l.weight = ad::Parameter(name + ".weight", random_normal(in_channels, out_channels, stddev, rng));
  if (with_bias) l.bias = ad::Parameter(name + ".bias", Matrix::Zero(1, out_channels));
  return l;
}

void LinearLayer::collect(std::vector<ad::Parameter*>& out) {
  out.push_back(&weight);
  if (bias) out.push_back(&*bias);
}

// ---------------------------------------------------------------------------
// Convolution

Var gather_scatter_conv(Tape& t, Var x, Var kernel, std::shared_ptr<const KernelMap> kmap_ptr,
                        Eigen::Index in_channels, Eigen::Index out_channels, bool transpose_pairs,
                        Eigen::Index out_rows) {
  if (!kmap_ptr) throw InternalError("conv: missing kernel map");
  const KernelMap& kmap = *kmap_ptr;
  const Matrix& xv = t.value(x);
  const Matrix& wv = t.value(kernel);
  if (xv.cols() != in_channels) throw ConfigError("conv: input has wrong channel width");
  if (wv.rows() != static_cast<Eigen::Index>(kmap.volume()) * in_channels || wv.cols() != out_channels)
    throw ConfigError("conv: kernel map volume does not match kernel size");

  Matrix out = Matrix::Zero(out_rows, out_channels);
  Matrix gathered;
  Matrix product;
  // Offsets are visited in a fixed order and each list sequentially, so the
  // floating-point accumulation order is reproducible.
  for (std::size_t k = 0; k < kmap.volume(); ++k) {
    const auto& pairs = kmap.pairs[k];
    if (pairs.empty()) continue;
    gathered.resize(static_cast<Eigen::Index>(pairs.size()), in_channels);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const std::int32_t src = transpose_pairs ? pairs[p].out_row : pairs[p].in_row;
      gathered.row(static_cast<Eigen::Index>(p)) = xv.row(src);
    }
    product.noalias() = gathered * wv.middleRows(static_cast<Eigen::Index>(k) * in_channels, in_channels);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const std::int32_t dst = transpose_pairs ? pairs[p].in_row : pairs[p].out_row;
      out.row(dst) += product.row(static_cast<Eigen::Index>(p));
    }
  }

  auto rule = [kmap_ptr, in_channels, transpose_pairs](const BackwardArgs& g) {
    const KernelMap& kmap = *kmap_ptr;
    const Matrix& xv = *g.input_values[0];
    const Matrix& wv = *g.input_values[1];
    Matrix* dx = g.input_grads[0];
    Matrix* dw = g.input_grads[1];
    Matrix gathered_x;
    Matrix gathered_g;
    for (std::size_t k = 0; k < kmap.volume(); ++k) {
      const auto& pairs = kmap.pairs[k];
      if (pairs.empty()) continue;
      const auto np = static_cast<Eigen::Index>(pairs.size());
      gathered_g.resize(np, g.grad_output.cols());
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        const std::int32_t dst = transpose_pairs ? pairs[p].in_row : pairs[p].out_row;
        gathered_g.row(static_cast<Eigen::Index>(p)) = g.grad_output.row(dst);
      }
      const auto wk = wv.middleRows(static_cast<Eigen::Index>(k) * in_channels, in_channels);
      if (dx) {
        Matrix back = gathered_g * wk.transpose();
        for (std::size_t p = 0; p < pairs.size(); ++p) {
          const std::int32_t src = transpose_pairs ? pairs[p].out_row : pairs[p].in_row;
          dx->row(src) += back.row(static_cast<Eigen::Index>(p));
        }
      }
      if (dw) {
        gathered_x.resize(np, in_channels);
        for (std::size_t p = 0; p < pairs.size(); ++p) {
          const std::int32_t src = transpose_pairs ? pairs[p].out_row : pairs[p].in_row;
          gathered_x.row(static_cast<Eigen::Index>(p)) = xv.row(src);
        }
        dw->middleRows(static_cast<Eigen::Index>(k) * in_channels, in_channels).noalias() +=
            gathered_x.transpose() * gathered_g;
      }
    }
  };
  return t.record(transpose_pairs ? "transposed_conv" : "conv", {x, kernel}, std::move(out),
                  std::move(rule));
}

namespace {

Var conv_with_map(Tape& t, Var x, ConvLayer& layer, std::shared_ptr<const KernelMap> kmap,
                  bool transpose_pairs, Eigen::Index out_rows) {
  Var w = t.parameter(layer.kernel);
  Var y = gather_scatter_conv(t, x, w, std::move(kmap), layer.in_channels, layer.out_channels,
                              transpose_pairs, out_rows);
  if (layer.bias) y = ad::add_row_broadcast(t, y, t.parameter(*layer.bias));
  return y;
}

void check_conv_input(const SparseVar& x, const ConvLayer& layer, const Tape& t) {
  if (!x.coords) throw PipelineError("conv: input has no coordinates");
  if (t.value(x.features).cols() != layer.in_channels)
    throw ConfigError("conv: input channel width " + std::to_string(t.value(x.features).cols()) +
                      " does not match layer width " + std::to_string(layer.in_channels));
}

}  // namespace

SparseVar submanifold_conv(Tape& t, const SparseVar& x, ConvLayer& layer, const KernelMap& kmap) {
  check_conv_input(x, layer, t);
  if (layer.stride != 1 || layer.transposed)
    throw ConfigError("submanifold_conv requires a stride-1, non-transposed layer");
  if (kmap.kernel_size != layer.kernel_size)
    throw ConfigError("submanifold_conv: kernel map built for K=" + std::to_string(kmap.kernel_size) +
                      " but layer has K=" + std::to_string(layer.kernel_size));
  if (kmap.in_size != x.coords->size() || kmap.out_size != x.coords->size())
    throw ConfigError("submanifold_conv: kernel map does not match input coordinates");
  Var y = conv_with_map(t, x.features, layer, std::make_shared<const KernelMap>(kmap), false,
                        static_cast<Eigen::Index>(x.coords->size()));
  return {x.coords, y, x.stride};
}

SparseVar submanifold_conv(Tape& t, const SparseVar& x, ConvLayer& layer) {
  check_conv_input(x, layer, t);
  if (layer.stride != 1 || layer.transposed)
    throw ConfigError("submanifold_conv requires a stride-1, non-transposed layer");
  auto kmap = x.coords->submanifold_kernel_map(layer.kernel_size, x.stride);
  Var y = conv_with_map(t, x.features, layer, kmap, false, static_cast<Eigen::Index>(x.coords->size()));
  return {x.coords, y, x.stride};
}

SparseVar strided_conv(Tape& t, const SparseVar& x, ConvLayer& layer) {
  check_conv_input(x, layer, t);
  if (layer.stride != 2 || layer.transposed)
    throw ConfigError("strided_conv supports only stride 2, got stride " + std::to_string(layer.stride));
  auto out_coords = x.coords->downsampled(2);
  auto kmap = x.coords->kernel_map_to(out_coords, layer.kernel_size, x.stride, x.stride * 2);
  Var y = conv_with_map(t, x.features, layer, kmap, false, static_cast<Eigen::Index>(out_coords->size()));
  return {out_coords, y, x.stride * 2};
}

SparseVar transposed_conv(Tape& t, const SparseVar& x, ConvLayer& layer,
                          const CoordinateMapPtr& target_coords) {
  check_conv_input(x, layer, t);
  if (!target_coords)
    throw PipelineError("transposed_conv: no recorded coordinates for the target level");
  if (layer.stride != 2 || !layer.transposed)
    throw ConfigError("transposed_conv requires a stride-2 transposed layer");
  if (x.stride < 2 || x.stride % 2 != 0)
    throw PipelineError("transposed_conv: input stride " + std::to_string(x.stride) +
                        " cannot be upsampled by 2");
  const int fine = x.stride / 2;
  auto kmap = target_coords->kernel_map_to(x.coords, layer.kernel_size, fine, x.stride);
  Var y = conv_with_map(t, x.features, layer, kmap, true, static_cast<Eigen::Index>(target_coords->size()));
  return {target_coords, y, fine};
}

// ---------------------------------------------------------------------------
// Normalization and pointwise ops

SparseVar batch_norm(Tape& t, const SparseVar& x, BatchNormLayer& layer, Mode mode) {
  const Matrix& xv = t.value(x.features);
  const Eigen::Index n = xv.rows();
  const Eigen::Index c = xv.cols();
  if (c != layer.channels()) throw ConfigError(layer.name + ": channel width mismatch");
  Var gamma = t.parameter(layer.gamma);
  Var beta = t.parameter(layer.beta);
  const double eps = layer.eps;

  if (mode == Mode::eval) {
    const RowVector inv_std = (layer.running_var.row(0).array() + eps).rsqrt().matrix();
    const RowVector mean = layer.running_mean.row(0);
    Matrix xhat = (xv.rowwise() - mean).array().rowwise() * inv_std.array();
    Matrix out = (xhat.array().rowwise() * t.value(gamma).row(0).array()).rowwise() +
                 t.value(beta).row(0).array();
    auto rule = [xhat = std::move(xhat), inv_std](const BackwardArgs& g) {
      const RowVector gam = g.input_values[1]->row(0);
      if (g.input_grads[0])
        g.input_grads[0]->array() +=
            g.grad_output.array().rowwise() * (gam.array() * inv_std.array());
      if (g.input_grads[1]) *g.input_grads[1] += g.grad_output.cwiseProduct(xhat).colwise().sum();
      if (g.input_grads[2]) *g.input_grads[2] += g.grad_output.colwise().sum();
    };
    Var y = t.record("batch_norm_eval", {x.features, gamma, beta}, std::move(out), std::move(rule));
    return {x.coords, y, x.stride};
  }

  if (n < 2) throw DegenerateError(layer.name + ": batch norm needs at least 2 voxels in train mode");
  const RowVector mean = xv.colwise().mean();
  const Matrix centered = xv.rowwise() - mean;
  const RowVector var = centered.array().square().colwise().mean().matrix();
  const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = centered.array().rowwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * t.value(gamma).row(0).array()).rowwise() +
               t.value(beta).row(0).array();

  const double m = layer.momentum;
  const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
  layer.running_mean = (1.0 - m) * layer.running_mean + m * mean;
  layer.running_var = (1.0 - m) * layer.running_var + m * (var * unbias);

  auto rule = [xhat = std::move(xhat), inv_std](const BackwardArgs& g) {
    const RowVector gam = g.input_values[1]->row(0);
    const RowVector gsum = g.grad_output.colwise().sum();
    const RowVector gxhat = g.grad_output.cwiseProduct(xhat).colwise().sum();
    if (g.input_grads[0]) {
      const double inv_n = 1.0 / static_cast<double>(xhat.rows());
      // dx = gamma / sigma * (g - mean(g) - xhat * mean(g * xhat))
      Matrix d = (g.grad_output.rowwise() - gsum * inv_n) -
                 Matrix(xhat.array().rowwise() * (gxhat * inv_n).array());
      g.input_grads[0]->array() += d.array().rowwise() * (gam.array() * inv_std.array());
    }
    if (g.input_grads[1]) *g.input_grads[1] += gxhat;
    if (g.input_grads[2]) *g.input_grads[2] += gsum;
  };
  Var y = t.record("batch_norm_train", {x.features, gamma, beta}, std::move(out), std::move(rule));
  return {x.coords, y, x.stride};
}

SparseVar relu(Tape& t, const SparseVar& x) { return {x.coords, ad::relu(t, x.features), x.stride}; }

SparseVar pointwise_linear(Tape& t, const SparseVar& x, ad::Parameter& weight, ad::Parameter* bias) {
  const Matrix& xv = t.value(x.features);
  if (xv.cols() != weight.value.rows())
    throw ConfigError("pointwise_linear: input width " + std::to_string(xv.cols()) +
                      " does not match weight rows " + std::to_string(weight.value.rows()));
  if (bias && (bias->value.rows() != 1 || bias->value.cols() != weight.value.cols()))
    throw ConfigError("pointwise_linear: bias shape mismatch");
  Var y = ad::matmul(t, x.features, t.parameter(weight));
  if (bias) y = ad::add_row_broadcast(t, y, t.parameter(*bias));
  return {x.coords, y, x.stride};
}

SparseVar pointwise_linear(Tape& t, const SparseVar& x, LinearLayer& layer) {
  return pointwise_linear(t, x, layer.weight, layer.bias ? &*layer.bias : nullptr);
}

Var global_avg_pool(Tape& t, const SparseVar& x) {
  if (!x.coords || x.coords->empty()) throw EmptyInputError("global_avg_pool: empty tensor");
  const auto ranges = x.coords->batch_ranges();
  for (const auto& r : ranges)
    if (r.second <= r.first) throw EmptyInputError("global_avg_pool: batch element has no voxels");
  return ad::segment_mean_rows(t, x.features, ranges);
}

SparseVar scale_channels(Tape& t, const SparseVar& x, Var weights) {
  const auto ranges = x.coords->batch_ranges();
  Var per_voxel = ad::segment_broadcast_rows(t, weights, ranges);
  return {x.coords, ad::hadamard(t, x.features, per_voxel), x.stride};
}

void require_aligned(const SparseVar& x, const SparseVar& y, const char* op) {
  if (!x.coords || !y.coords || !x.coords->same_coords(*y.coords) || x.stride != y.stride)
    throw AlignmentError(std::string(op) + ": operands live on different coordinate maps");
}

SparseVar add(Tape& t, const SparseVar& x, const SparseVar& y) {
  require_aligned(x, y, "add");
  return {x.coords, ad::add(t, x.features, y.features), x.stride};
}

SparseVar concat_channels(Tape& t, const SparseVar& x, const SparseVar& y) {
  require_aligned(x, y, "concat_channels");
  return {x.coords, ad::concat_cols(t, x.features, y.features), x.stride};
}

}  // namespace mssnet::nn
