#pragma once

#include "mssnet/common.hpp"

#include <cstdint>
#include <ostream>
#include <vector>

namespace mssnet::bench {

/// Static 3-D KD-tree over the rows of an N x 3 matrix. Baseline for the
/// neighborhood-search comparison.
class KdTree {
 public:
  explicit KdTree(const Matrix& points, std::size_t leaf_size = 8);

  std::size_t size() const noexcept { return index_.size(); }
  /// Indices of the k nearest rows to `q`, nearest first (ties by index).
  void knn(const double* q, std::size_t k, std::vector<std::int32_t>& out) const;

 private:
  struct Node {
    std::int32_t begin = 0;
    std::int32_t end = 0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    int axis = 0;
    double split = 0.0;
  };
  std::int32_t build(std::int32_t begin, std::int32_t end, int depth);

  const Matrix* points_;
  std::size_t leaf_size_;
  std::vector<std::int32_t> index_;
  std::vector<Node> nodes_;
};

/// Uniform random cloud at one point per voxel on average, so occupancy
/// stays constant as n grows.
Matrix random_cloud(std::size_t n, double voxel_size, std::uint64_t seed);

struct BenchOptions {
  double voxel_size = 0.05;
  int channels = 8;
  std::size_t knn_k = 27;
  bool run_knn = true;
  bool run_conv = true;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t points = 0;
  std::size_t voxels = 0;
  double voxelize_ms = 0.0;
  double kernel_map_ms = 0.0;       // submanifold K = 3 over all voxels
  double hash_query_ns = 0.0;       // per voxel neighborhood (27 lookups)
  double conv_ms = 0.0;             // one K = 3 forward, channels -> channels
  double kdtree_build_ms = 0.0;
  double knn_total_ms = 0.0;        // build + k-NN for every point
  double knn_query_ns = 0.0;        // per point query
};

BenchRow run_bench(std::size_t points, const BenchOptions& options);

inline constexpr const char* kBenchHeader =
    "points,voxels,voxelize_ms,kernel_map_ms,hash_query_ns,conv_ms,kdtree_build_ms,knn_total_ms,knn_query_ns";
void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);

/// Growth between the smallest and largest row.
struct ScalingSummary {
  double point_ratio = 0.0;
  double hash_query_ratio = 0.0;
  double knn_total_ratio = 0.0;
  bool hash_flat = false;        // per-query growth <= 2x
  bool knn_superlinear = false;  // total time grows faster than n
};
ScalingSummary summarize_scaling(const std::vector<BenchRow>& rows);

}  // namespace mssnet::bench
