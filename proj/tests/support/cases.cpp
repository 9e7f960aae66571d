#include "cases.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

namespace oracle {

namespace {

std::size_t offset_index(int k, int dx, int dy, int dz) {
  const int h = k / 2;
  return static_cast<std::size_t>(((dx + h) * k + (dy + h)) * k + (dz + h));
}

double bn_eval(double v, double gamma, double beta) { return gamma * v / std::sqrt(1.0 + 1e-5) + beta; }

Matrix mat(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

}  // namespace

void set_offset(mssnet::nn::ConvLayer& c, int dx, int dy, int dz, const Matrix& w) {
  c.kernel.value.middleRows(static_cast<Eigen::Index>(offset_index(c.kernel_size, dx, dy, dz)) * c.in_channels,
                            c.in_channels) = w;
}

MffmHandCase mffm_hand_case() {
  using namespace mssnet;
  std::mt19937_64 rng(4);
  MffmHandCase hc{nn::MffmBlock::make("m", 2, {}, rng), {}, Matrix(2, 3), Matrix(2, 2)};
  auto& block = hc.block;
  Matrix xin(2, 2);
  xin << 1.0, -2.0,  //
      0.5, 3.0;
  hc.input = {CoordinateMap::from_coords({{0, 0, 0, 0}, {0, 1, 0, 0}}), xin, 1};

  // Branch i: center C_i, +x neighbor P_i, -x neighbor M_i.
  const std::array<Matrix, 3> C{mat(0.5, 0.1, -0.2, 0.3), mat(-0.4, 0.2, 0.6, 0.1), mat(0.3, -0.5, 0.2, 0.2)};
  const std::array<Matrix, 3> P{mat(0.1, 0.0, 0.2, -0.1), mat(0.3, 0.3, -0.2, 0.1), mat(-0.1, 0.4, 0.0, 0.5)};
  const std::array<Matrix, 3> M{mat(-0.3, 0.2, 0.1, 0.0), mat(0.2, -0.1, 0.1, 0.4), mat(0.05, 0.1, -0.3, 0.2)};
  for (std::size_t i = 0; i < 3; ++i) {
    auto& c = block.branch_convs[i];
    c.kernel.value.setZero();
    set_offset(c, 0, 0, 0, C[i]);
    set_offset(c, 1, 0, 0, P[i]);
    set_offset(c, -1, 0, 0, M[i]);
  }
  const Matrix W0 = mat(0.7, -0.2, 0.1, 0.9);
  block.point_conv.kernel.value = W0;
  // Score heads: hidden 2x2, BN, relu, 2x1 + bias.
  const std::array<Matrix, 3> H{mat(0.2, -0.3, 0.5, 0.1), mat(-0.1, 0.4, 0.3, 0.2), mat(0.6, 0.1, -0.2, 0.3)};
  const std::array<std::array<double, 2>, 3> g{{{1.2, 0.8}, {0.9, 1.1}, {1.0, 0.7}}};
  const std::array<std::array<double, 2>, 3> be{{{0.1, -0.1}, {0.0, 0.2}, {-0.2, 0.1}}};
  const std::array<std::array<double, 3>, 3> sc{{{0.5, -0.4, 0.1}, {-0.3, 0.6, 0.2}, {0.2, 0.2, -0.3}}};  // w0, w1, bias
  for (std::size_t i = 0; i < 3; ++i) {
    auto& f = block.score_mlps[i];
    f.hidden.weight.value = H[i];
    f.norm.gamma.value << g[i][0], g[i][1];
    f.norm.beta.value << be[i][0], be[i][1];
    f.norm.running_mean.setZero();
    f.norm.running_var.setOnes();
    f.score.weight.value << sc[i][0], sc[i][1];
    f.score.bias->value << sc[i][2];
  }
  const Matrix Fc = mat(0.4, 0.3, -0.1, 0.6), Fp = mat(0.2, 0.0, 0.1, -0.2), Fm = mat(-0.1, 0.2, 0.3, 0.1);
  block.out_conv.kernel.value.setZero();
  set_offset(block.out_conv, 0, 0, 0, Fc);
  set_offset(block.out_conv, 1, 0, 0, Fp);
  set_offset(block.out_conv, -1, 0, 0, Fm);
  const double gamma_o[2] = {1.5, 0.5}, beta_o[2] = {0.05, -0.05};
  block.out_norm.gamma.value << gamma_o[0], gamma_o[1];
  block.out_norm.beta.value << beta_o[0], beta_o[1];
  block.out_norm.running_mean.setZero();
  block.out_norm.running_var.setOnes();

  // Scalar loops. Row a = 0, row b = 1; b is a's +x neighbor.
  auto conv2 = [](const double in[2][2], const Matrix& c, const Matrix& p, const Matrix& m, double out[2][2]) {
    for (int v = 0; v < 2; ++v)
      for (int o = 0; o < 2; ++o) {
        double s = 0.0;
        for (int i = 0; i < 2; ++i) {
          s += in[v][i] * c(i, o);
          if (v == 0) s += in[1][i] * p(i, o);
          if (v == 1) s += in[0][i] * m(i, o);
        }
        out[v][o] = s;
      }
  };
  const double x[2][2] = {{1.0, -2.0}, {0.5, 3.0}};
  double xb[3][2][2];
  for (int i = 0; i < 3; ++i) conv2(x, C[static_cast<std::size_t>(i)], P[static_cast<std::size_t>(i)],
                                    M[static_cast<std::size_t>(i)], xb[i]);
  double x0[2][2];
  for (int v = 0; v < 2; ++v)
    for (int o = 0; o < 2; ++o) x0[v][o] = x[v][0] * W0(0, o) + x[v][1] * W0(1, o);
  double S[2][3];
  for (int v = 0; v < 2; ++v) {
    double u[3];
    for (std::size_t i = 0; i < 3; ++i) {
      double X[2], h[2];
      for (int c = 0; c < 2; ++c) X[c] = xb[0][v][c] + xb[1][v][c] + xb[2][v][c];
      for (int c = 0; c < 2; ++c) {
        const double lin = X[0] * H[i](0, c) + X[1] * H[i](1, c);
        h[c] = std::max(0.0, bn_eval(lin, g[i][static_cast<std::size_t>(c)], be[i][static_cast<std::size_t>(c)]));
      }
      u[i] = h[0] * sc[i][0] + h[1] * sc[i][1] + sc[i][2];
    }
    const double mx = std::max({u[0], u[1], u[2]});
    const double z = std::exp(u[0] - mx) + std::exp(u[1] - mx) + std::exp(u[2] - mx);
    for (int i = 0; i < 3; ++i) S[v][i] = std::exp(u[i] - mx) / z;
  }
  double pre[2][2];
  for (int v = 0; v < 2; ++v)
    for (int c = 0; c < 2; ++c)
      pre[v][c] = x0[v][c] + xb[0][v][c] * S[v][0] + xb[1][v][c] * S[v][1] + xb[2][v][c] * S[v][2];
  double conv_out[2][2];
  conv2(pre, Fc, Fp, Fm, conv_out);
  for (int v = 0; v < 2; ++v) {
    for (int i = 0; i < 3; ++i) hc.scores(v, i) = S[v][i];
    for (int c = 0; c < 2; ++c) hc.output(v, c) = bn_eval(conv_out[v][c], gamma_o[c], beta_o[c]);
  }
  return hc;
}

}  // namespace oracle
