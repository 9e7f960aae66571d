#pragma once

#include "mssnet/common.hpp"
#include "mssnet/point_cloud.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <tuple>
#include <vector>

namespace mssnet {

/// Quantized voxel index. Units are voxel edges of the grid the coordinate
/// lives on: a tensor at stride s stores coordinates of its own (coarser)
/// grid, not base-grid multiples of s.
struct Coordinate {
  std::int32_t batch = 0;
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  friend auto operator<=>(const Coordinate&, const Coordinate&) = default;
};

/// FNV-1a over the four packed 32-bit words followed by a fold of the high
/// half into the low bits (the table masks low bits).
std::uint64_t hash_coordinate(const Coordinate& c) noexcept;

/// Open-addressing (linear probing) hash table Coordinate -> row.
class CoordinateHashTable {
 public:
  static constexpr std::int32_t kMissing = -1;

  CoordinateHashTable() = default;
  explicit CoordinateHashTable(std::size_t expected_size);

  /// Inserts `c -> row` unless `c` is present. Returns the row now stored for `c`.
  std::int32_t insert(const Coordinate& c, std::int32_t row);
  std::int32_t find(const Coordinate& c) const noexcept;
  /// Batched lookup. Hashes a group of queries and prefetches their home
  /// slots before probing, so independent lookups overlap in memory.
  void find_many(std::span<const Coordinate> queries, std::span<std::int32_t> rows) const;

  std::size_t size() const noexcept { return size_; }
  std::size_t capacity() const noexcept { return slots_.size(); }

 private:
  struct Slot {
    Coordinate key;
    std::int32_t row = kMissing;
  };

  void grow();
  std::int32_t probe(const Coordinate& c, std::uint64_t h) const noexcept;

  std::vector<Slot> slots_;
  std::uint64_t mask_ = 0;
  std::size_t size_ = 0;
};

struct RowPair {
  std::int32_t in_row = 0;
  std::int32_t out_row = 0;

  friend auto operator<=>(const RowPair&, const RowPair&) = default;
};

/// Per-offset (input row, output row) lists driving gather-scatter
/// convolution. Offsets enumerate {-K/2..K/2}^3 with dx slowest, dz fastest;
/// every list is sorted by out_row.
struct KernelMap {
  int kernel_size = 1;
  int in_stride = 1;
  int out_stride = 1;
  std::size_t in_size = 0;
  std::size_t out_size = 0;
  std::vector<std::array<int, 3>> offsets;
  std::vector<std::vector<RowPair>> pairs;

  std::size_t volume() const noexcept { return offsets.size(); }
  std::size_t center_offset() const noexcept { return offsets.size() / 2; }
  std::size_t pair_count() const noexcept;
};

/// Offsets of an odd cubic kernel in canonical order.
std::vector<std::array<int, 3>> kernel_offsets(int kernel_size);

/// Immutable set of active coordinates with canonical (lexicographic) row
/// order. Derived structures (downsampled maps, kernel maps) are memoized on
/// the map behind a mutex; the observable state never changes after
/// construction, so shared maps are safe to read from several threads.
class CoordinateMap {
 public:
  /// Deduplicates and sorts `coords`.
  static std::shared_ptr<const CoordinateMap> from_coords(std::vector<Coordinate> coords);

  CoordinateMap(const CoordinateMap&) = delete;
  CoordinateMap& operator=(const CoordinateMap&) = delete;

  std::size_t size() const noexcept { return coords_.size(); }
  bool empty() const noexcept { return coords_.empty(); }
  const std::vector<Coordinate>& coords() const noexcept { return coords_; }
  const Coordinate& operator[](std::size_t row) const { return coords_[row]; }
  const CoordinateHashTable& table() const noexcept { return table_; }

  /// Row of `c`, or CoordinateHashTable::kMissing.
  std::int32_t find(const Coordinate& c) const noexcept { return table_.find(c); }
  bool contains(const Coordinate& c) const noexcept { return find(c) != CoordinateHashTable::kMissing; }

  /// Number of batch elements, i.e. max batch index + 1.
  int batch_count() const noexcept;
  /// Row ranges per batch element (rows are sorted by batch first).
  std::vector<std::pair<std::size_t, std::size_t>> batch_ranges() const;

  std::shared_ptr<const CoordinateMap> downsampled(int factor) const;
  /// Kernel map from this map (input) to `out`, memoized per (out, K, ratio).
  std::shared_ptr<const KernelMap> kernel_map_to(const std::shared_ptr<const CoordinateMap>& out,
                                                 int kernel_size, int in_stride,
                                                 int out_stride) const;
  /// Submanifold kernel map (input == output == this).
  std::shared_ptr<const KernelMap> submanifold_kernel_map(int kernel_size, int stride) const;

  bool same_coords(const CoordinateMap& other) const noexcept {
    return this == &other || coords_ == other.coords_;
  }

 private:
  CoordinateMap() = default;

  std::vector<Coordinate> coords_;
  CoordinateHashTable table_;

  struct KernelKey {
    const CoordinateMap* out;
    int kernel_size;
    int in_stride;
    int out_stride;
    friend auto operator<=>(const KernelKey&, const KernelKey&) = default;
  };
  struct KernelEntry {
    std::shared_ptr<const CoordinateMap> keep_alive;  // null when out == this
    std::shared_ptr<const KernelMap> map;
  };
  mutable std::mutex cache_mutex_;
  mutable std::map<int, std::shared_ptr<const CoordinateMap>> downsampled_;
  mutable std::map<KernelKey, KernelEntry> kernel_maps_;
};

using CoordinateMapPtr = std::shared_ptr<const CoordinateMap>;

/// A sparse tensor value: coordinates, N x C features and the voxel stride
/// of its grid relative to the base grid.
struct SparseTensor {
  CoordinateMapPtr coords;
  Matrix features;
  int stride = 1;

  std::size_t size() const noexcept { return coords ? coords->size() : 0; }
  Eigen::Index channels() const noexcept { return features.cols(); }
};

struct VoxelizationResult {
  SparseTensor tensor;
  std::vector<std::int32_t> point_to_voxel;
  std::vector<std::uint32_t> voxel_labels;
  std::vector<std::uint32_t> voxel_counts;
};

/// floor(point / voxel_size) componentwise. Rejects non-finite points and
/// results outside the 32-bit range with InvalidInputError.
std::vector<Coordinate> quantize(const Matrix& points, double voxel_size, std::int32_t batch = 0);

/// Hash-based voxelization. Voxel features are the mean of member rows of
/// `point_features` (P x C); voxel labels are the majority member label,
/// ties broken by the smallest id. Rows follow canonical coordinate order.
VoxelizationResult voxelize(const LabeledPointCloud& cloud, double voxel_size,
                            const Matrix& point_features, std::int32_t batch = 0);
/// Same, using `cloud.attributes` as point features.
VoxelizationResult voxelize(const LabeledPointCloud& cloud, double voxel_size);

/// Voxelizes several clouds into one batched tensor; cloud i gets batch
/// index i and point_to_voxel covers the concatenation of all clouds.
VoxelizationResult voxelize_batch(std::span<const LabeledPointCloud> clouds, double voxel_size,
                                  std::span<const Matrix> point_features);

/// Pure gather: row p of the result is row point_to_voxel[p] of voxel_values.
Matrix devoxelize(const Matrix& voxel_values, std::span<const std::int32_t> point_to_voxel);

/// Unique floor-division of (x, y, z) by `factor`, batch preserved.
CoordinateMapPtr downsample_coords(const CoordinateMap& map, int factor);

/// Integer floor division (rounds toward negative infinity).
constexpr std::int32_t floor_div(std::int32_t a, std::int32_t b) noexcept {
  const std::int32_t q = a / b;
  return (a % b != 0 && ((a < 0) != (b < 0))) ? q - 1 : q;
}

/// Hash-table neighborhood building. For every output row j with coordinate
/// c and offset k, pairs (row_in(c * ratio + k), j) whenever the input map
/// holds that coordinate; ratio = out_stride / in_stride.
KernelMap build_kernel_map(const CoordinateMap& in, const CoordinateMap& out, int kernel_size,
                           int in_stride, int out_stride);

}  // namespace mssnet
