#include "mssnet/coords.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace mssnet {

void LabeledPointCloud::validate() const {
  if (positions.cols() != 3) throw InvalidInputError("positions must have 3 columns");
  const auto n = positions.rows();
  if (attributes.rows() != n)
    throw InvalidInputError("attribute rows (" + std::to_string(attributes.rows()) +
                            ") do not match point count (" + std::to_string(n) + ")");
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw InvalidInputError("label count does not match point count");
  if (!positions.allFinite()) throw InvalidInputError("non-finite point position");
}

std::uint64_t hash_coordinate(const Coordinate& c) noexcept {
  constexpr std::uint64_t kOffset = 14695981039346656037ULL;
  constexpr std::uint64_t kPrime = 1099511628211ULL;
  std::uint64_t h = kOffset;
  for (std::int32_t v : {c.batch, c.x, c.y, c.z}) {
    h ^= static_cast<std::uint32_t>(v);
    h *= kPrime;
  }
  h ^= h >> 32;
  h *= 0x9E3779B97F4A7C15ULL;
  h ^= h >> 29;
  return h;
}

// ---------------------------------------------------------------------------
// CoordinateHashTable

CoordinateHashTable::CoordinateHashTable(std::size_t expected_size) {
  const std::size_t cap = std::bit_ceil(std::max<std::size_t>(16, expected_size * 2));
  slots_.assign(cap, Slot{});
  mask_ = cap - 1;
}

std::int32_t CoordinateHashTable::probe(const Coordinate& c, std::uint64_t h) const noexcept {
  std::uint64_t i = h & mask_;
  while (true) {
    const Slot& s = slots_[i];
    if (s.row == kMissing) return kMissing;
    if (s.key == c) return s.row;
    i = (i + 1) & mask_;
  }
}

std::int32_t CoordinateHashTable::find(const Coordinate& c) const noexcept {
  if (slots_.empty()) return kMissing;
  return probe(c, hash_coordinate(c));
}

void CoordinateHashTable::find_many(std::span<const Coordinate> queries,
                                    std::span<std::int32_t> rows) const {
  if (rows.size() != queries.size()) throw InternalError("find_many: output size mismatch");
  if (slots_.empty()) {
    std::fill(rows.begin(), rows.end(), kMissing);
    return;
  }
  constexpr std::size_t kGroup = 16;
  std::array<std::uint64_t, kGroup> hashes{};
  for (std::size_t base = 0; base < queries.size(); base += kGroup) {
    const std::size_t n = std::min(kGroup, queries.size() - base);
    for (std::size_t g = 0; g < n; ++g) {
      hashes[g] = hash_coordinate(queries[base + g]);
      __builtin_prefetch(&slots_[hashes[g] & mask_]);
    }
    for (std::size_t g = 0; g < n; ++g) rows[base + g] = probe(queries[base + g], hashes[g]);
  }
}

void CoordinateHashTable::grow() {
  std::vector<Slot> old = std::move(slots_);
  const std::size_t cap = std::max<std::size_t>(16, old.size() * 2);
  slots_.assign(cap, Slot{});
  mask_ = cap - 1;
  size_ = 0;
  for (const Slot& s : old)
    if (s.row != kMissing) insert(s.key, s.row);
}

std::int32_t CoordinateHashTable::insert(const Coordinate& c, std::int32_t row) {
  if (row < 0) throw InternalError("hash table rows must be non-negative");
  // Keep the load factor at or below one half.
  if (slots_.empty() || (size_ + 1) * 2 > slots_.size()) grow();
  std::uint64_t i = hash_coordinate(c) & mask_;
  while (true) {
    Slot& s = slots_[i];
    if (s.row == kMissing) {
      s.key = c;
      s.row = row;
      ++size_;
      return row;
    }
    if (s.key == c) return s.row;
    i = (i + 1) & mask_;
  }
}

// ---------------------------------------------------------------------------
// KernelMap

std::size_t KernelMap::pair_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.size();
  return n;
}

std::vector<std::array<int, 3>> kernel_offsets(int kernel_size) {
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw ConfigError("kernel size must be odd and positive, got " + std::to_string(kernel_size));
  const int r = kernel_size / 2;
  std::vector<std::array<int, 3>> out;
  out.reserve(static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size);
  for (int dx = -r; dx <= r; ++dx)
    for (int dy = -r; dy <= r; ++dy)
      for (int dz = -r; dz <= r; ++dz) out.push_back({dx, dy, dz});
  return out;
}

// ---------------------------------------------------------------------------
// CoordinateMap

CoordinateMapPtr CoordinateMap::from_coords(std::vector<Coordinate> coords) {
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  if (coords.size() > static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max()))
    throw InvalidInputError("too many coordinates for 32-bit row indices");
  std::shared_ptr<CoordinateMap> map(new CoordinateMap());
  map->table_ = CoordinateHashTable(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i)
    map->table_.insert(coords[i], static_cast<std::int32_t>(i));
  map->coords_ = std::move(coords);
  return map;
}

int CoordinateMap::batch_count() const noexcept {
  return coords_.empty() ? 0 : coords_.back().batch + 1;
}

std::vector<std::pair<std::size_t, std::size_t>> CoordinateMap::batch_ranges() const {
  std::vector<std::pair<std::size_t, std::size_t>> ranges(static_cast<std::size_t>(batch_count()),
                                                          {0, 0});
  std::size_t i = 0;
  while (i < coords_.size()) {
    const auto b = static_cast<std::size_t>(coords_[i].batch);
    std::size_t j = i;
    while (j < coords_.size() && coords_[j].batch == coords_[i].batch) ++j;
    ranges[b] = {i, j};
    i = j;
  }
  return ranges;
}

CoordinateMapPtr CoordinateMap::downsampled(int factor) const {
  std::lock_guard lock(cache_mutex_);
  auto it = downsampled_.find(factor);
  if (it != downsampled_.end()) return it->second;
  auto map = downsample_coords(*this, factor);
  downsampled_.emplace(factor, map);
  return map;
}

std::shared_ptr<const KernelMap> CoordinateMap::kernel_map_to(const CoordinateMapPtr& out,
                                                              int kernel_size, int in_stride,
                                                              int out_stride) const {
  const KernelKey key{out.get(), kernel_size, in_stride, out_stride};
  {
    std::lock_guard lock(cache_mutex_);
    auto it = kernel_maps_.find(key);
    if (it != kernel_maps_.end()) return it->second.map;
  }
  auto kmap = std::make_shared<const KernelMap>(
      build_kernel_map(*this, *out, kernel_size, in_stride, out_stride));
  std::lock_guard lock(cache_mutex_);
  KernelEntry entry{out.get() == this ? nullptr : out, kmap};
  return kernel_maps_.emplace(key, std::move(entry)).first->second.map;
}

std::shared_ptr<const KernelMap> CoordinateMap::submanifold_kernel_map(int kernel_size,
                                                                       int stride) const {
  const KernelKey key{this, kernel_size, stride, stride};
  {
    std::lock_guard lock(cache_mutex_);
    auto it = kernel_maps_.find(key);
    if (it != kernel_maps_.end()) return it->second.map;
  }
  auto kmap =
      std::make_shared<const KernelMap>(build_kernel_map(*this, *this, kernel_size, stride, stride));
  std::lock_guard lock(cache_mutex_);
  return kernel_maps_.emplace(key, KernelEntry{nullptr, kmap}).first->second.map;
}

// ---------------------------------------------------------------------------
// Voxelization

std::vector<Coordinate> quantize(const Matrix& points, double voxel_size, std::int32_t batch) {
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size))
    throw InvalidInputError("voxel size must be positive and finite");
  if (points.cols() != 3) throw InvalidInputError("points must have 3 columns");
  if (batch < 0) throw InvalidInputError("batch index must be non-negative");
  constexpr double kLo = std::numeric_limits<std::int32_t>::min();
  constexpr double kHi = std::numeric_limits<std::int32_t>::max();
  std::vector<Coordinate> out(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    std::array<std::int32_t, 3> q{};
    for (int d = 0; d < 3; ++d) {
      const double v = points(i, d);
      if (!std::isfinite(v))
        throw InvalidInputError("non-finite point at row " + std::to_string(i));
      const double f = std::floor(v / voxel_size);
      if (f < kLo || f > kHi)
        throw InvalidInputError("point at row " + std::to_string(i) + " is outside the voxel grid");
      q[static_cast<std::size_t>(d)] = static_cast<std::int32_t>(f);
    }
    out[static_cast<std::size_t>(i)] = {batch, q[0], q[1], q[2]};
  }
  return out;
}

namespace {

// Lexicographic comparison of two feature rows; used to fix the summation
// order inside a voxel so that the mean does not depend on point order.
bool row_less(const Matrix& m, Eigen::Index a, Eigen::Index b) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    if (m(a, c) < m(b, c)) return true;
    if (m(b, c) < m(a, c)) return false;
  }
  return false;
}

struct PartialVoxelization {
  std::vector<Coordinate> coords;          // canonical order
  std::vector<std::int32_t> point_to_voxel;
};

PartialVoxelization group_points(const std::vector<Coordinate>& quantized) {
  CoordinateHashTable table(quantized.size());
  std::vector<Coordinate> provisional;
  std::vector<std::int32_t> provisional_row(quantized.size());
  for (std::size_t p = 0; p < quantized.size(); ++p) {
    const auto next = static_cast<std::int32_t>(provisional.size());
    const std::int32_t row = table.insert(quantized[p], next);
    if (row == next) provisional.push_back(quantized[p]);
    provisional_row[p] = row;
  }
  std::vector<std::int32_t> order(provisional.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::int32_t a, std::int32_t b) { return provisional[a] < provisional[b]; });
  std::vector<std::int32_t> canonical(provisional.size());
  PartialVoxelization out;
  out.coords.resize(provisional.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    canonical[static_cast<std::size_t>(order[i])] = static_cast<std::int32_t>(i);
    out.coords[i] = provisional[static_cast<std::size_t>(order[i])];
  }
  out.point_to_voxel.resize(quantized.size());
  for (std::size_t p = 0; p < quantized.size(); ++p)
    out.point_to_voxel[p] = canonical[static_cast<std::size_t>(provisional_row[p])];
  return out;
}

}  // namespace

VoxelizationResult voxelize_batch(std::span<const LabeledPointCloud> clouds, double voxel_size,
                                  std::span<const Matrix> point_features) {
  if (clouds.empty()) throw EmptyInputError("voxelize: no clouds given");
  if (point_features.size() != clouds.size())
    throw InvalidInputError("voxelize: one feature matrix per cloud required");
  std::vector<Coordinate> quantized;
  std::size_t total = 0;
  Eigen::Index channels = point_features[0].cols();
  for (std::size_t b = 0; b < clouds.size(); ++b) {
    const auto& cloud = clouds[b];
    if (cloud.size() == 0) throw EmptyInputError("voxelize: empty point cloud");
    cloud.validate();
    if (point_features[b].rows() != cloud.positions.rows() || point_features[b].cols() != channels)
      throw InvalidInputError("voxelize: point feature shape mismatch");
    auto q = quantize(cloud.positions, voxel_size, static_cast<std::int32_t>(b));
    quantized.insert(quantized.end(), q.begin(), q.end());
    total += cloud.size();
  }

  PartialVoxelization grouped = group_points(quantized);
  const std::size_t n_voxels = grouped.coords.size();

  // Flattened per-point views of features and labels.
  Matrix features(static_cast<Eigen::Index>(total), channels);
  std::vector<std::uint32_t> labels(total);
  {
    Eigen::Index row = 0;
    for (std::size_t b = 0; b < clouds.size(); ++b) {
      features.middleRows(row, point_features[b].rows()) = point_features[b];
      std::copy(clouds[b].labels.begin(), clouds[b].labels.end(),
                labels.begin() + static_cast<std::ptrdiff_t>(row));
      row += point_features[b].rows();
    }
  }

  // Bucket points by voxel (counting sort keeps it linear).
  std::vector<std::uint32_t> counts(n_voxels, 0);
  for (auto v : grouped.point_to_voxel) ++counts[static_cast<std::size_t>(v)];
  std::vector<std::size_t> start(n_voxels + 1, 0);
  for (std::size_t v = 0; v < n_voxels; ++v) start[v + 1] = start[v] + counts[v];
  std::vector<std::int32_t> members(total);
  {
    std::vector<std::size_t> cursor(start.begin(), start.end() - 1);
    for (std::size_t p = 0; p < total; ++p)
      members[cursor[static_cast<std::size_t>(grouped.point_to_voxel[p])]++] =
          static_cast<std::int32_t>(p);
  }

  VoxelizationResult result;
  Matrix voxel_features = Matrix::Zero(static_cast<Eigen::Index>(n_voxels), channels);
  result.voxel_labels.resize(n_voxels);
  std::vector<std::uint32_t> member_labels;
  for (std::size_t v = 0; v < n_voxels; ++v) {
    auto first = members.begin() + static_cast<std::ptrdiff_t>(start[v]);
    auto last = members.begin() + static_cast<std::ptrdiff_t>(start[v + 1]);
    std::sort(first, last, [&](std::int32_t a, std::int32_t b) { return row_less(features, a, b); });
    for (auto it = first; it != last; ++it) voxel_features.row(static_cast<Eigen::Index>(v)) += features.row(*it);
    voxel_features.row(static_cast<Eigen::Index>(v)) /= static_cast<double>(counts[v]);

    member_labels.clear();
    for (auto it = first; it != last; ++it) member_labels.push_back(labels[static_cast<std::size_t>(*it)]);
    std::sort(member_labels.begin(), member_labels.end());
    std::uint32_t best = member_labels.front();
    std::size_t best_count = 0;
    for (std::size_t i = 0; i < member_labels.size();) {
      std::size_t j = i;
      while (j < member_labels.size() && member_labels[j] == member_labels[i]) ++j;
      // Strictly greater keeps the smallest id on ties (labels ascend).
      if (j - i > best_count) {
        best_count = j - i;
        best = member_labels[i];
      }
      i = j;
    }
    result.voxel_labels[v] = best;
  }

  result.tensor.coords = CoordinateMap::from_coords(std::move(grouped.coords));
  result.tensor.features = std::move(voxel_features);
  result.tensor.stride = 1;
  result.point_to_voxel = std::move(grouped.point_to_voxel);
  result.voxel_counts = std::move(counts);
  return result;
}

VoxelizationResult voxelize(const LabeledPointCloud& cloud, double voxel_size,
                            const Matrix& point_features, std::int32_t batch) {
  if (cloud.size() == 0) throw EmptyInputError("voxelize: empty point cloud");
  if (batch < 0) throw InvalidInputError("batch index must be non-negative");
  VoxelizationResult r = voxelize_batch(std::span<const LabeledPointCloud>(&cloud, 1), voxel_size,
                                        std::span<const Matrix>(&point_features, 1));
  if (batch != 0) {
    std::vector<Coordinate> coords = r.tensor.coords->coords();
    for (auto& c : coords) c.batch = batch;
    r.tensor.coords = CoordinateMap::from_coords(std::move(coords));
  }
  return r;
}

VoxelizationResult voxelize(const LabeledPointCloud& cloud, double voxel_size) {
  return voxelize(cloud, voxel_size, cloud.attributes);
}

Matrix devoxelize(const Matrix& voxel_values, std::span<const std::int32_t> point_to_voxel) {
  Matrix out(static_cast<Eigen::Index>(point_to_voxel.size()), voxel_values.cols());
  for (std::size_t p = 0; p < point_to_voxel.size(); ++p) {
    const std::int32_t v = point_to_voxel[p];
    if (v < 0 || v >= voxel_values.rows())
      throw InternalError("devoxelize: point " + std::to_string(p) + " maps to voxel " +
                          std::to_string(v) + " outside [0, " +
                          std::to_string(voxel_values.rows()) + ")");
    out.row(static_cast<Eigen::Index>(p)) = voxel_values.row(v);
  }
  return out;
}

CoordinateMapPtr downsample_coords(const CoordinateMap& map, int factor) {
  if (factor < 2) throw ConfigError("downsample factor must be >= 2");
  std::vector<Coordinate> out;
  out.reserve(map.size());
  for (const auto& c : map.coords())
    out.push_back({c.batch, floor_div(c.x, factor), floor_div(c.y, factor), floor_div(c.z, factor)});
  return CoordinateMap::from_coords(std::move(out));
}

KernelMap build_kernel_map(const CoordinateMap& in, const CoordinateMap& out, int kernel_size,
                           int in_stride, int out_stride) {
  if (in_stride < 1 || out_stride < in_stride || out_stride % in_stride != 0)
    throw ConfigError("kernel map strides must satisfy out_stride = in_stride * ratio, got " +
                      std::to_string(in_stride) + " -> " + std::to_string(out_stride));
  KernelMap kmap;
  kmap.kernel_size = kernel_size;
  kmap.in_stride = in_stride;
  kmap.out_stride = out_stride;
  kmap.in_size = in.size();
  kmap.out_size = out.size();
  kmap.offsets = kernel_offsets(kernel_size);
  kmap.pairs.resize(kmap.offsets.size());
  const std::int32_t ratio = out_stride / in_stride;

  const auto& out_coords = out.coords();
  std::vector<Coordinate> queries(out_coords.size());
  std::vector<std::int32_t> rows(out_coords.size());
  for (std::size_t k = 0; k < kmap.offsets.size(); ++k) {
    const auto& off = kmap.offsets[k];
    for (std::size_t j = 0; j < out_coords.size(); ++j) {
      const Coordinate& c = out_coords[j];
      queries[j] = {c.batch, c.x * ratio + off[0], c.y * ratio + off[1], c.z * ratio + off[2]};
    }
    in.table().find_many(queries, rows);
    auto& list = kmap.pairs[k];
    for (std::size_t j = 0; j < rows.size(); ++j)
      if (rows[j] != CoordinateHashTable::kMissing)
        list.push_back({rows[j], static_cast<std::int32_t>(j)});
  }
  return kmap;
}

}  // namespace mssnet
