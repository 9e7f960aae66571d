#include "mssnet/bench.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

using namespace mssnet;
using namespace mssnet::bench;

TEST(KdTree, MatchesBruteForceNeighbors) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix pts(300, 3);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = u(rng);
  KdTree tree(pts, 4);
  std::vector<std::int32_t> got;
  for (int q = 0; q < 40; ++q) {
    const double query[3] = {u(rng), u(rng), u(rng)};
    std::vector<std::pair<double, std::int32_t>> all;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      const double dx = pts(i, 0) - query[0], dy = pts(i, 1) - query[1], dz = pts(i, 2) - query[2];
      all.push_back({dx * dx + dy * dy + dz * dz, static_cast<std::int32_t>(i)});
    }
    std::sort(all.begin(), all.end());
    tree.knn(query, 10, got);
    ASSERT_EQ(got.size(), 10u);
    for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(got[k], all[k].second);
  }
  tree.knn(pts.row(0).data(), 500, got);
  EXPECT_EQ(got.size(), 300u);
}

TEST(KdTree, RejectsBadInput) {
  EXPECT_THROW(KdTree(Matrix::Zero(3, 2)), InvalidInputError);
  KdTree empty(Matrix::Zero(0, 3));
  std::vector<std::int32_t> out{1};
  const double q[3] = {0, 0, 0};
  empty.knn(q, 3, out);
  EXPECT_TRUE(out.empty());
}

TEST(Bench, SmallRunProducesConsistentRow) {
  BenchOptions opt;
  const auto row = run_bench(2000, opt);
  EXPECT_EQ(row.points, 2000u);
  EXPECT_GT(row.voxels, 1000u);
  EXPECT_LE(row.voxels, 2000u);
  EXPECT_GT(row.hash_query_ns, 0.0);
  EXPECT_GE(row.knn_total_ms, row.kdtree_build_ms);
  std::ostringstream out;
  write_bench_csv(out, {row, row});
  const std::string text = out.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

TEST(Bench, ScalingSummaryArithmetic) {
  BenchRow a, b;
  a.points = 10;
  a.hash_query_ns = 100;
  a.knn_total_ms = 1;
  b.points = 1000;
  b.hash_query_ns = 150;
  b.knn_total_ms = 300;
  const auto s = summarize_scaling({b, a});
  EXPECT_DOUBLE_EQ(s.point_ratio, 100.0);
  EXPECT_DOUBLE_EQ(s.hash_query_ratio, 1.5);
  EXPECT_TRUE(s.hash_flat);
  EXPECT_TRUE(s.knn_superlinear);
  EXPECT_THROW(summarize_scaling({a}), InvalidInputError);
}
