#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library code it is checking.

#include "mssnet/common.hpp"
#include "mssnet/coords.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <tuple>
#include <vector>

namespace oracle {

using mssnet::Coordinate;
using mssnet::Matrix;

/// Dense B^3 block in x-major order: row (x * B + y) * B + z.
inline std::size_t dense_index(int b, int x, int y, int z) {
  return static_cast<std::size_t>((x * b + y) * b + z);
}

/// All coordinates of a fully occupied B^3 block (batch 0) in dense order.
std::vector<Coordinate> dense_block(int b);

/// Weight of offset (dx, dy, dz) in a (K^3 * C_in) x C_out kernel.
Matrix kernel_block(const Matrix& kernel, int k, Eigen::Index c_in, int dx, int dy, int dz);

/// Zero-padded same-size convolution on a dense B^3 grid.
Matrix dense_conv_same(int b, int k, const Matrix& x, const Matrix& kernel);

/// Stride-2 convolution, output grid ceil(B/2)^3:
/// out[o] = sum_d x[2o + d] W_d, missing inputs are zero.
Matrix dense_conv_stride2(int b, int k, const Matrix& x, const Matrix& kernel);

/// Adjoint of dense_conv_stride2 scattered back onto the fine B^3 grid:
/// y[2o + d] += x[o] V_d.
Matrix dense_conv_transpose2(int b, int k, const Matrix& x, const Matrix& kernel);

/// Triples (offset_index, in_row, out_row) found by testing every input
/// against every output: in == out * ratio + d with the same batch.
std::set<std::tuple<int, int, int>> brute_force_kernel_map(std::span<const Coordinate> in,
                                                           std::span<const Coordinate> out, int k,
                                                           int ratio);

/// Jaccard loss of a mistake set, |M| / |G u M|, 0 when both are empty.
double jaccard_set_loss(const std::vector<bool>& gt, const std::vector<bool>& mistakes);

/// Lovasz extension of jaccard_set_loss at `errors` as the max over all
/// permutations of the greedy chain sum (valid since the set function is
/// submodular). Exponential; for n <= 8.
double lovasz_by_permutations(const std::vector<double>& errors, const std::vector<bool>& gt);

/// Same extension as the threshold integral: integral over t in [0, 1] of
/// jaccard_set_loss({i : errors_i >= t}).
double lovasz_by_thresholds(const std::vector<double>& errors, const std::vector<bool>& gt);

/// Lovasz-softmax built on lovasz_by_permutations, averaged over present
/// classes.
double lovasz_softmax_brute(const Matrix& probs, std::span<const std::uint32_t> labels, std::uint32_t ignore);

/// Random distinct coordinates in [lo, hi)^3 over `batches` batch ids.
std::vector<Coordinate> random_coords(std::mt19937_64& rng, std::size_t n, int lo, int hi, int batches);

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0);

}  // namespace oracle
