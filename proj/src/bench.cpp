#include "mssnet/bench.hpp"

#include "mssnet/coords.hpp"
#include "mssnet/sparse_ops.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <queue>
#include <random>

namespace mssnet::bench {

KdTree::KdTree(const Matrix& points, std::size_t leaf_size) : points_(&points), leaf_size_(leaf_size) {
  if (points.cols() != 3) throw InvalidInputError("kd-tree expects N x 3 points");
  if (leaf_size_ == 0) throw ConfigError("kd-tree leaf size must be positive");
  index_.resize(static_cast<std::size_t>(points.rows()));
  std::iota(index_.begin(), index_.end(), 0);
  nodes_.reserve(2 * index_.size() / leaf_size_ + 1);
  if (!index_.empty()) build(0, static_cast<std::int32_t>(index_.size()), 0);
}

std::int32_t KdTree::build(std::int32_t begin, std::int32_t end, int depth) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({begin, end, -1, -1, depth % 3, 0.0});
  if (static_cast<std::size_t>(end - begin) <= leaf_size_) return id;
  const int axis = depth % 3;
  const std::int32_t mid = begin + (end - begin) / 2;
  const Matrix& p = *points_;
  std::nth_element(index_.begin() + begin, index_.begin() + mid, index_.begin() + end,
                   [&](std::int32_t a, std::int32_t b) { return p(a, axis) < p(b, axis); });
  nodes_[static_cast<std::size_t>(id)].split = p(index_[static_cast<std::size_t>(mid)], axis);
  const std::int32_t left = build(begin, mid, depth + 1);
  const std::int32_t right = build(mid, end, depth + 1);
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

void KdTree::knn(const double* q, std::size_t k, std::vector<std::int32_t>& out) const {
  out.clear();
  if (k == 0 || nodes_.empty()) return;
  // Max-heap of (distance, index) holding the best k so far.
  using Entry = std::pair<double, std::int32_t>;
  std::priority_queue<Entry> best;
  const Matrix& p = *points_;
  auto visit = [&](auto&& self, std::int32_t id) -> void {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.left < 0) {
      for (std::int32_t i = n.begin; i < n.end; ++i) {
        const std::int32_t r = index_[static_cast<std::size_t>(i)];
        const double dx = p(r, 0) - q[0], dy = p(r, 1) - q[1], dz = p(r, 2) - q[2];
        const Entry e{dx * dx + dy * dy + dz * dz, r};
        if (best.size() < k) {
          best.push(e);
        } else if (e < best.top()) {
          best.pop();
          best.push(e);
        }
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::int32_t near = diff < 0 ? n.left : n.right;
    const std::int32_t far = diff < 0 ? n.right : n.left;
    self(self, near);
    if (best.size() < k || diff * diff <= best.top().first) self(self, far);
  };
  visit(visit, 0);
  out.resize(best.size());
  for (std::size_t i = best.size(); i-- > 0;) {
    out[i] = best.top().second;
    best.pop();
  }
}

Matrix random_cloud(std::size_t n, double voxel_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double side = voxel_size * std::cbrt(static_cast<double>(n));
  std::uniform_real_distribution<double> u(0.0, side);
  Matrix m(static_cast<Eigen::Index>(n), 3);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// Best of several repetitions; stops once `budget_ms` has elapsed.
template <class F>
double best_ms(F&& f, double budget_ms = 200.0, int max_reps = 20) {
  double best = 0.0, total = 0.0;
  for (int rep = 0; rep < max_reps; ++rep) {
    const auto start = Clock::now();
    f();
    const double t = ms_since(start);
    best = rep == 0 ? t : std::min(best, t);
    total += t;
    if (total >= budget_ms) break;
  }
  return best;
}

}  // namespace

BenchRow run_bench(std::size_t points, const BenchOptions& options) {
  if (points == 0) throw InvalidInputError("bench needs at least one point");
  BenchRow row;
  row.points = points;
  LabeledPointCloud cloud;
  cloud.positions = random_cloud(points, options.voxel_size, options.seed);
  cloud.attributes = Matrix::Ones(cloud.positions.rows(), options.channels);
  cloud.labels.assign(points, 0);

  VoxelizationResult vox;
  row.voxelize_ms = best_ms([&] { vox = voxelize(cloud, options.voxel_size); });
  row.voxels = vox.tensor.size();
  const CoordinateMap& map = *vox.tensor.coords;

  KernelMap kmap;
  row.kernel_map_ms = best_ms([&] { kmap = build_kernel_map(map, map, 3, 1, 1); });
  row.hash_query_ns = row.kernel_map_ms * 1e6 / static_cast<double>(row.voxels);

  if (options.run_conv) {
    std::mt19937_64 rng(options.seed + 1);
    auto layer = nn::ConvLayer::make("bench", options.channels, options.channels, 3, 1, false, false, rng);
    auto shared = std::make_shared<const KernelMap>(std::move(kmap));
    row.conv_ms = best_ms([&] {
      ad::Tape t;
      nn::submanifold_conv(t, nn::lift(t, vox.tensor), layer, *shared);
    });
  }

  if (options.run_knn) {
    std::vector<std::int32_t> nn;
    double build_ms = 0.0;
    row.knn_total_ms = best_ms(
        [&] {
          const auto start = Clock::now();
          KdTree tree(cloud.positions);
          build_ms = ms_since(start);
          for (Eigen::Index i = 0; i < cloud.positions.rows(); ++i)
            tree.knn(cloud.positions.row(i).data(), options.knn_k, nn);
        },
        200.0, 3);
    row.kdtree_build_ms = build_ms;
    row.knn_query_ns = (row.knn_total_ms - build_ms) * 1e6 / static_cast<double>(points);
  }
  return row;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << kBenchHeader << '\n';
  for (const auto& r : rows)
    out << r.points << ',' << r.voxels << ',' << r.voxelize_ms << ',' << r.kernel_map_ms << ','
        << r.hash_query_ns << ',' << r.conv_ms << ',' << r.kdtree_build_ms << ',' << r.knn_total_ms << ','
        << r.knn_query_ns << '\n';
}

ScalingSummary summarize_scaling(const std::vector<BenchRow>& rows) {
  if (rows.size() < 2) throw InvalidInputError("scaling summary needs at least two sizes");
  auto [lo, hi] = std::minmax_element(rows.begin(), rows.end(),
                                      [](const BenchRow& a, const BenchRow& b) { return a.points < b.points; });
  ScalingSummary s;
  s.point_ratio = static_cast<double>(hi->points) / static_cast<double>(lo->points);
  s.hash_query_ratio = hi->hash_query_ns / lo->hash_query_ns;
  s.knn_total_ratio = hi->knn_total_ms / lo->knn_total_ms;
  s.hash_flat = s.hash_query_ratio <= 2.0;
  s.knn_superlinear = s.knn_total_ratio > s.point_ratio;
  return s;
}

}  // namespace mssnet::bench
