#pragma once

#include "mssnet/autodiff.hpp"
#include "mssnet/coords.hpp"

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace mssnet::nn {

enum class Mode { train, eval };

/// A SparseTensor whose features live on a tape.
struct SparseVar {
  CoordinateMapPtr coords;
  ad::Var features;
  int stride = 1;
};

/// Records a plain SparseTensor on `t` as a constant (or as a gradient
/// leaf when `requires_grad`).
SparseVar lift(ad::Tape& t, const SparseTensor& x, bool requires_grad = false);

/// Named non-trainable state (batch-norm running statistics).
struct Buffer {
  std::string name;
  Matrix* value;
};

/// Sparse convolution weights. The kernel is stored as a (K^3 * C_in) x C_out
/// matrix; rows [k*C_in, (k+1)*C_in) hold the weight of offset k in
/// kernel_offsets() order.
struct ConvLayer {
  ad::Parameter kernel;
  std::optional<ad::Parameter> bias;
  int kernel_size = 3;
  int stride = 1;
  bool transposed = false;
  Eigen::Index in_channels = 0;
  Eigen::Index out_channels = 0;

  static ConvLayer make(const std::string& name, Eigen::Index in_channels, Eigen::Index out_channels,
                        int kernel_size, int stride, bool transposed, bool with_bias,
                        std::mt19937_64& rng);

  /// Weight block of kernel offset k.
  auto weight(std::size_t k) const {
    return kernel.value.middleRows(static_cast<Eigen::Index>(k) * in_channels, in_channels);
  }
  void collect(std::vector<ad::Parameter*>& out);
};

struct BatchNormLayer {
  static constexpr double kDefaultMomentum = 0.1;
  static constexpr double kDefaultEps = 1e-5;

  ad::Parameter gamma;  // 1 x C
  ad::Parameter beta;   // 1 x C
  Matrix running_mean;  // 1 x C
  Matrix running_var;   // 1 x C
  double momentum = kDefaultMomentum;
  double eps = kDefaultEps;

  static BatchNormLayer make(const std::string& name, Eigen::Index channels);
  Eigen::Index channels() const noexcept { return gamma.value.cols(); }
  void collect(std::vector<ad::Parameter*>& out);
  void collect_buffers(std::vector<Buffer>& out);

  std::string name;
};

/// Per-voxel affine map x W + b with its own parameters.
struct LinearLayer {
  ad::Parameter weight;  // C_in x C_out
  std::optional<ad::Parameter> bias;

  static LinearLayer make(const std::string& name, Eigen::Index in_channels,
                          Eigen::Index out_channels, bool with_bias, std::mt19937_64& rng);
  void collect(std::vector<ad::Parameter*>& out);
};

/// Gather-scatter core shared by every convolution flavor. For each offset k
/// and pair (i, j) in kmap.pairs[k]: out[j] += x[i] * W_k, or with
/// `transpose_pairs` out[i] += x[j] * W_k. `out_rows` is the output row count.
ad::Var gather_scatter_conv(ad::Tape& t, ad::Var x, ad::Var kernel,
                            std::shared_ptr<const KernelMap> kmap,
                            Eigen::Index in_channels, Eigen::Index out_channels,
                            bool transpose_pairs, Eigen::Index out_rows);

SparseVar submanifold_conv(ad::Tape& t, const SparseVar& x, ConvLayer& layer, const KernelMap& kmap);
/// Uses the kernel map memoized on x.coords.
SparseVar submanifold_conv(ad::Tape& t, const SparseVar& x, ConvLayer& layer);
/// Stride-2 convolution onto downsample_coords(x.coords, 2).
SparseVar strided_conv(ad::Tape& t, const SparseVar& x, ConvLayer& layer);
/// Upsampling onto `target_coords` (the map recorded at the matching finer
/// level); the adjoint gather pattern of strided_conv.
SparseVar transposed_conv(ad::Tape& t, const SparseVar& x, ConvLayer& layer,
                          const CoordinateMapPtr& target_coords);

SparseVar batch_norm(ad::Tape& t, const SparseVar& x, BatchNormLayer& layer, Mode mode);
SparseVar relu(ad::Tape& t, const SparseVar& x);
SparseVar pointwise_linear(ad::Tape& t, const SparseVar& x, ad::Parameter& weight,
                           ad::Parameter* bias);
SparseVar pointwise_linear(ad::Tape& t, const SparseVar& x, LinearLayer& layer);

/// Per-batch-element channel means: B x C.
ad::Var global_avg_pool(ad::Tape& t, const SparseVar& x);
/// Scales every voxel of batch element b by row b of `weights` (B x C).
SparseVar scale_channels(ad::Tape& t, const SparseVar& x, ad::Var weights);

SparseVar add(ad::Tape& t, const SparseVar& x, const SparseVar& y);
SparseVar concat_channels(ad::Tape& t, const SparseVar& x, const SparseVar& y);

/// Throws AlignmentError unless both tensors share coordinates and stride.
void require_aligned(const SparseVar& x, const SparseVar& y, const char* op);

}  // namespace mssnet::nn
