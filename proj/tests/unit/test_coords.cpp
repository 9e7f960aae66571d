#include "mssnet/coords.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>

using namespace mssnet;

namespace {

LabeledPointCloud cloud_from(const Matrix& positions, std::vector<std::uint32_t> labels) {
  LabeledPointCloud c;
  c.positions = positions;
  c.attributes = Matrix::Zero(positions.rows(), 1);
  c.labels = std::move(labels);
  return c;
}

}  // namespace

TEST(Quantize, FloorsEachAxis) {
  Matrix p(3, 3);
  p << 0.12, -0.01, 0.05,   //
      0.049, 0.0, -0.051,   //
      1.0, 2.0, 3.0;
  const auto q = quantize(p, 0.05);
  EXPECT_EQ(q[0], (Coordinate{0, 2, -1, 1}));
  EXPECT_EQ(q[1], (Coordinate{0, 0, 0, -2}));
  EXPECT_EQ(q[2], (Coordinate{0, 20, 40, 60}));
}

TEST(Quantize, RejectsNonFiniteAndOverflow) {
  Matrix p(1, 3);
  p << 0.0, std::nan(""), 0.0;
  EXPECT_THROW(quantize(p, 0.05), InvalidInputError);
  p << 1e12, 0.0, 0.0;
  EXPECT_THROW(quantize(p, 0.05), InvalidInputError);
}

TEST(FloorDiv, RoundsTowardNegativeInfinity) {
  EXPECT_EQ(floor_div(5, 2), 2);
  EXPECT_EQ(floor_div(-1, 2), -1);
  EXPECT_EQ(floor_div(-4, 2), -2);
  EXPECT_EQ(floor_div(-5, 2), -3);
  EXPECT_EQ(floor_div(0, 4), 0);
}

TEST(HashTable, InsertFindGrow) {
  CoordinateHashTable t(4);
  std::mt19937_64 rng(3);
  const auto coords = oracle::random_coords(rng, 5000, -100, 100, 3);
  for (std::size_t i = 0; i < coords.size(); ++i) EXPECT_EQ(t.insert(coords[i], static_cast<int>(i)), static_cast<int>(i));
  EXPECT_EQ(t.size(), coords.size());
  EXPECT_LE(t.size() * 2, t.capacity());
  EXPECT_EQ(t.insert(coords[7], 99), 7);
  for (std::size_t i = 0; i < coords.size(); ++i) EXPECT_EQ(t.find(coords[i]), static_cast<int>(i));
  EXPECT_EQ(t.find({0, 1000, 1000, 1000}), CoordinateHashTable::kMissing);

  std::vector<Coordinate> queries(coords.begin(), coords.begin() + 100);
  queries.push_back({5, 0, 0, 0});
  std::vector<std::int32_t> rows(queries.size());
  t.find_many(queries, rows);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(rows[i], static_cast<int>(i));
  EXPECT_EQ(rows.back(), CoordinateHashTable::kMissing);
}

TEST(CoordinateMap, SortsAndDedupes) {
  auto m = CoordinateMap::from_coords({{1, 0, 0, 0}, {0, 2, 0, 0}, {0, 1, 5, 0}, {0, 2, 0, 0}});
  ASSERT_EQ(m->size(), 3u);
  EXPECT_EQ((*m)[0], (Coordinate{0, 1, 5, 0}));
  EXPECT_EQ((*m)[2], (Coordinate{1, 0, 0, 0}));
  EXPECT_EQ(m->batch_count(), 2);
  const auto ranges = m->batch_ranges();
  ASSERT_EQ(ranges.size(), 2u);
  EXPECT_EQ(ranges[1], (std::pair<std::size_t, std::size_t>{2, 3}));
  EXPECT_TRUE(m->contains({0, 2, 0, 0}));
}

TEST(KernelOffsets, CanonicalOrderAndOddOnly) {
  const auto o = kernel_offsets(3);
  ASSERT_EQ(o.size(), 27u);
  EXPECT_EQ(o.front(), (std::array<int, 3>{-1, -1, -1}));
  EXPECT_EQ(o[1], (std::array<int, 3>{-1, -1, 0}));
  EXPECT_EQ(o[13], (std::array<int, 3>{0, 0, 0}));
  EXPECT_THROW(kernel_offsets(4), ConfigError);
}

TEST(KernelMap, SubmanifoldMatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    for (int k : {1, 3, 5}) {
      auto m = CoordinateMap::from_coords(oracle::random_coords(rng, 200, 0, 10, 2));
      const auto km = m->submanifold_kernel_map(k, 1);
      std::set<std::tuple<int, int, int>> got;
      for (std::size_t o = 0; o < km->volume(); ++o)
        for (const auto& p : km->pairs[o]) got.emplace(static_cast<int>(o), p.in_row, p.out_row);
      EXPECT_EQ(got, oracle::brute_force_kernel_map(m->coords(), m->coords(), k, 1));
      EXPECT_EQ(km->pairs[km->center_offset()].size(), m->size());
    }
  }
}

TEST(KernelMap, StridedMatchesBruteForceAndIsMemoized) {
  std::mt19937_64 rng(12);
  auto in = CoordinateMap::from_coords(oracle::random_coords(rng, 300, -8, 8, 1));
  auto out = in->downsampled(2);
  EXPECT_EQ(out.get(), in->downsampled(2).get());
  const auto km = in->kernel_map_to(out, 3, 1, 2);
  EXPECT_EQ(km.get(), in->kernel_map_to(out, 3, 1, 2).get());
  std::set<std::tuple<int, int, int>> got;
  for (std::size_t o = 0; o < km->volume(); ++o)
    for (const auto& p : km->pairs[o]) got.emplace(static_cast<int>(o), p.in_row, p.out_row);
  EXPECT_EQ(got, oracle::brute_force_kernel_map(in->coords(), out->coords(), 3, 2));
}

TEST(Downsample, FloorDividesCoordinates) {
  auto m = CoordinateMap::from_coords({{0, -1, 0, 0}, {0, -2, 1, 1}, {0, 1, 1, 1}, {0, 3, 0, 0}});
  auto d = downsample_coords(*m, 2);
  std::vector<Coordinate> expect{{0, -1, 0, 0}, {0, 0, 0, 0}, {0, 1, 0, 0}};
  EXPECT_EQ(d->coords(), expect);
  EXPECT_THROW(downsample_coords(*m, 1), ConfigError);
}

TEST(Voxelize, MatchesSortBasedOracle) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> lab(0, 3);
  const Eigen::Index n = 2000;
  Matrix p(n, 3), f(n, 2);
  std::vector<std::uint32_t> labels(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) p(i, k) = u(rng);
    f(i, 0) = u(rng);
    f(i, 1) = u(rng);
    labels[static_cast<std::size_t>(i)] = lab(rng);
  }
  const auto cloud = cloud_from(p, labels);
  const auto v = voxelize(cloud, 0.25, f);

  // Oracle: bucket by std::map over floor coordinates.
  std::map<Coordinate, std::vector<Eigen::Index>> buckets;
  for (Eigen::Index i = 0; i < n; ++i)
    buckets[{0, static_cast<int>(std::floor(p(i, 0) / 0.25)), static_cast<int>(std::floor(p(i, 1) / 0.25)),
             static_cast<int>(std::floor(p(i, 2) / 0.25))}]
        .push_back(i);
  ASSERT_EQ(v.tensor.size(), buckets.size());
  std::size_t row = 0;
  for (const auto& [c, members] : buckets) {
    EXPECT_EQ((*v.tensor.coords)[row], c);
    RowVector mean = RowVector::Zero(2);
    std::map<std::uint32_t, int> votes;
    for (auto i : members) {
      mean += f.row(i);
      ++votes[labels[static_cast<std::size_t>(i)]];
      EXPECT_EQ(v.point_to_voxel[static_cast<std::size_t>(i)], static_cast<int>(row));
    }
    mean /= static_cast<double>(members.size());
    EXPECT_LT((v.tensor.features.row(static_cast<Eigen::Index>(row)) - mean).cwiseAbs().maxCoeff(), 1e-12);
    const auto best = std::max_element(votes.begin(), votes.end(),
                                       [](auto& a, auto& b) { return a.second < b.second; });
    EXPECT_EQ(v.voxel_labels[row], best->first);
    EXPECT_EQ(v.voxel_counts[row], members.size());
    ++row;
  }
}

TEST(Voxelize, PermutationInvariant) {
  std::mt19937_64 rng(9);
  const Matrix p = oracle::random_matrix(rng, 500, 3);
  const Matrix f = oracle::random_matrix(rng, 500, 3);
  std::vector<std::uint32_t> labels(500);
  for (std::size_t i = 0; i < 500; ++i) labels[i] = static_cast<std::uint32_t>(i % 4);
  std::vector<Eigen::Index> perm(500);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix p2(500, 3), f2(500, 3);
  std::vector<std::uint32_t> l2(500);
  for (Eigen::Index i = 0; i < 500; ++i) {
    p2.row(i) = p.row(perm[static_cast<std::size_t>(i)]);
    f2.row(i) = f.row(perm[static_cast<std::size_t>(i)]);
    l2[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const auto a = voxelize(cloud_from(p, labels), 0.3, f);
  const auto b = voxelize(cloud_from(p2, l2), 0.3, f2);
  EXPECT_EQ(a.tensor.coords->coords(), b.tensor.coords->coords());
  EXPECT_EQ(a.voxel_labels, b.voxel_labels);
  // Bitwise: members are summed in a canonical order.
  EXPECT_TRUE(a.tensor.features == b.tensor.features);
}

TEST(Voxelize, MajorityTieBreaksToSmallestLabel) {
  Matrix p(4, 3);
  p << 0.01, 0.01, 0.01, 0.02, 0.02, 0.02, 0.03, 0.03, 0.03, 0.04, 0.04, 0.04;
  const auto v = voxelize(cloud_from(p, {7, 3, 7, 3}), 0.05);
  ASSERT_EQ(v.tensor.size(), 1u);
  EXPECT_EQ(v.voxel_labels[0], 3u);
}

TEST(Voxelize, DevoxelizeGathersRows) {
  Matrix values(2, 1);
  values << 10, 20;
  std::vector<std::int32_t> idx{1, 0, 1};
  const Matrix d = devoxelize(values, idx);
  EXPECT_EQ(d(0, 0), 20);
  EXPECT_EQ(d(1, 0), 10);
  idx.push_back(2);
  EXPECT_THROW(devoxelize(values, idx), InternalError);
}

TEST(Voxelize, BatchAssignsBatchIndices) {
  Matrix p(2, 3);
  p << 0, 0, 0, 1, 1, 1;
  const std::vector<LabeledPointCloud> clouds{cloud_from(p, {0, 1}), cloud_from(p, {1, 1})};
  const std::vector<Matrix> feats{Matrix::Ones(2, 1), Matrix::Ones(2, 1) * 2};
  const auto v = voxelize_batch(clouds, 0.5, feats);
  EXPECT_EQ(v.tensor.size(), 4u);
  EXPECT_EQ(v.tensor.coords->batch_count(), 2);
  EXPECT_EQ(v.point_to_voxel.size(), 4u);
  EXPECT_EQ(v.tensor.features(v.point_to_voxel[2], 0), 2.0);
}
