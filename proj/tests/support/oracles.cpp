#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oracle {

std::vector<Coordinate> dense_block(int b) {
  std::vector<Coordinate> out;
  for (int x = 0; x < b; ++x)
    for (int y = 0; y < b; ++y)
      for (int z = 0; z < b; ++z) out.push_back({0, x, y, z});
  return out;
}

Matrix kernel_block(const Matrix& kernel, int k, Eigen::Index c_in, int dx, int dy,
                                        int dz) {
  const int h = k / 2;
  const int index = ((dx + h) * k + (dy + h)) * k + (dz + h);
  return kernel.middleRows(index * c_in, c_in);
}

Matrix dense_conv_same(int b, int k, const Matrix& x, const Matrix& kernel) {
  const Eigen::Index c_in = x.cols();
  Matrix out = Matrix::Zero(x.rows(), kernel.cols());
  const int h = k / 2;
  for (int px = 0; px < b; ++px)
    for (int py = 0; py < b; ++py)
      for (int pz = 0; pz < b; ++pz)
        for (int dx = -h; dx <= h; ++dx)
          for (int dy = -h; dy <= h; ++dy)
            for (int dz = -h; dz <= h; ++dz) {
              const int qx = px + dx, qy = py + dy, qz = pz + dz;
              if (qx < 0 || qy < 0 || qz < 0 || qx >= b || qy >= b || qz >= b) continue;
              out.row(static_cast<Eigen::Index>(dense_index(b, px, py, pz))) +=
                  x.row(static_cast<Eigen::Index>(dense_index(b, qx, qy, qz))) *
                  kernel_block(kernel, k, c_in, dx, dy, dz);
            }
  return out;
}

Matrix dense_conv_stride2(int b, int k, const Matrix& x, const Matrix& kernel) {
  const int ob = (b + 1) / 2;
  const Eigen::Index c_in = x.cols();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(ob) * ob * ob, kernel.cols());
  const int h = k / 2;
  for (int ox = 0; ox < ob; ++ox)
    for (int oy = 0; oy < ob; ++oy)
      for (int oz = 0; oz < ob; ++oz)
        for (int dx = -h; dx <= h; ++dx)
          for (int dy = -h; dy <= h; ++dy)
            for (int dz = -h; dz <= h; ++dz) {
              const int qx = 2 * ox + dx, qy = 2 * oy + dy, qz = 2 * oz + dz;
              if (qx < 0 || qy < 0 || qz < 0 || qx >= b || qy >= b || qz >= b) continue;
              out.row(static_cast<Eigen::Index>(dense_index(ob, ox, oy, oz))) +=
                  x.row(static_cast<Eigen::Index>(dense_index(b, qx, qy, qz))) *
                  kernel_block(kernel, k, c_in, dx, dy, dz);
            }
  return out;
}

Matrix dense_conv_transpose2(int b, int k, const Matrix& x, const Matrix& kernel) {
  const int ob = (b + 1) / 2;
  const Eigen::Index c_in = x.cols();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(b) * b * b, kernel.cols());
  const int h = k / 2;
  for (int ox = 0; ox < ob; ++ox)
    for (int oy = 0; oy < ob; ++oy)
      for (int oz = 0; oz < ob; ++oz)
        for (int dx = -h; dx <= h; ++dx)
          for (int dy = -h; dy <= h; ++dy)
            for (int dz = -h; dz <= h; ++dz) {
              const int qx = 2 * ox + dx, qy = 2 * oy + dy, qz = 2 * oz + dz;
              if (qx < 0 || qy < 0 || qz < 0 || qx >= b || qy >= b || qz >= b) continue;
              out.row(static_cast<Eigen::Index>(dense_index(b, qx, qy, qz))) +=
                  x.row(static_cast<Eigen::Index>(dense_index(ob, ox, oy, oz))) *
                  kernel_block(kernel, k, c_in, dx, dy, dz);
            }
  return out;
}

std::set<std::tuple<int, int, int>> brute_force_kernel_map(std::span<const Coordinate> in,
                                                           std::span<const Coordinate> out, int k,
                                                           int ratio) {
  std::set<std::tuple<int, int, int>> pairs;
  const int h = k / 2;
  for (std::size_t o = 0; o < out.size(); ++o)
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i].batch != out[o].batch) continue;
      const int dx = in[i].x - out[o].x * ratio;
      const int dy = in[i].y - out[o].y * ratio;
      const int dz = in[i].z - out[o].z * ratio;
      if (std::abs(dx) > h || std::abs(dy) > h || std::abs(dz) > h) continue;
      const int index = ((dx + h) * k + (dy + h)) * k + (dz + h);
      pairs.emplace(index, static_cast<int>(i), static_cast<int>(o));
    }
  return pairs;
}

double jaccard_set_loss(const std::vector<bool>& gt, const std::vector<bool>& mistakes) {
  std::size_t m = 0, uni = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    m += mistakes[i];
    uni += gt[i] || mistakes[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(m) / static_cast<double>(uni);
}

double lovasz_by_permutations(const std::vector<double>& errors, const std::vector<bool>& gt) {
  const std::size_t n = errors.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1.0;
  do {
    std::vector<bool> set(n, false);
    double prev = 0.0, total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      set[perm[r]] = true;
      const double cur = jaccard_set_loss(gt, set);
      total += errors[perm[r]] * (cur - prev);
      prev = cur;
    }
    best = std::max(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double lovasz_by_thresholds(const std::vector<double>& errors, const std::vector<bool>& gt) {
  std::vector<double> levels(errors);
  levels.push_back(0.0);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  double total = 0.0;
  // On (levels[j-1], levels[j]] the superlevel set {e >= t} is constant.
  for (std::size_t j = 1; j < levels.size(); ++j) {
    std::vector<bool> set(errors.size());
    for (std::size_t i = 0; i < errors.size(); ++i) set[i] = errors[i] >= levels[j];
    total += (levels[j] - levels[j - 1]) * jaccard_set_loss(gt, set);
  }
  return total;
}

double lovasz_softmax_brute(const Matrix& probs, std::span<const std::uint32_t> labels, std::uint32_t ignore) {
  double total = 0.0;
  int present = 0;
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    std::vector<double> errors;
    std::vector<bool> gt;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      const auto y = labels[static_cast<std::size_t>(i)];
      if (y == ignore) continue;
      const bool fg = y == static_cast<std::uint32_t>(c);
      gt.push_back(fg);
      errors.push_back(fg ? 1.0 - probs(i, c) : probs(i, c));
    }
    if (std::find(gt.begin(), gt.end(), true) == gt.end()) continue;
    total += lovasz_by_permutations(errors, gt);
    ++present;
  }
  return present ? total / present : 0.0;
}

std::vector<Coordinate> random_coords(std::mt19937_64& rng, std::size_t n, int lo, int hi, int batches) {
  std::uniform_int_distribution<int> u(lo, hi - 1);
  std::uniform_int_distribution<int> b(0, batches - 1);
  std::set<Coordinate> seen;
  std::vector<Coordinate> out;
  while (out.size() < n) {
    Coordinate c{b(rng), u(rng), u(rng), u(rng)};
    if (seen.insert(c).second) out.push_back(c);
  }
  return out;
}

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace oracle
