#include "mssnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <array>
#include <cstring>
#include <string>

namespace mssnet::ad {

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw InternalError("tape: unknown value id " + std::to_string(v.id));
  return nodes_[static_cast<std::size_t>(v.id)];
}

void Tape::note_branch(std::uint64_t bits) noexcept {
  std::uint64_t x = bits + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  signature_ ^= x ^ (x >> 31);
}

Matrix Tape::branch_mask(const Matrix& x) {
  Matrix mask;
  if (replay_) {
    if (replay_pos_ >= replay_->size() || (*replay_)[replay_pos_].rows() != x.rows() ||
        (*replay_)[replay_pos_].cols() != x.cols())
      throw ContractError("Tape: replayed branch does not match the recorded forward");
    mask = (*replay_)[replay_pos_++];
  } else {
    mask = (x.array() > 0.0).cast<double>().matrix();
  }
  if (recording_) recording_->push_back(mask);
  return mask;
}

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.op_kind = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Matrix value) {
  Node n;
  n.op_kind = "input";
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
  Node n;
  n.op_kind = "parameter";
  n.value = p.value;
  n.param = &p;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::record(const char* op_kind, std::span<const Var> inputs, Matrix output,
                 BackwardRule rule) {
  Node n;
  n.op_kind = op_kind;
  const auto next = static_cast<std::int32_t>(nodes_.size());
  for (Var v : inputs) {
    // An input id at or past the new node would make the graph cyclic.
    if (v.id < 0 || v.id >= next)
      throw InternalError(std::string("tape: ") + op_kind + " references value " +
                          std::to_string(v.id) + " that is not recorded before it");
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
  }
  n.value = std::move(output);
  n.rule = std::move(rule);
  return push(std::move(n));
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

const char* Tape::op_kind(Var v) const { return node(v).op_kind; }

Matrix Tape::grad(Var v) const {
  const Node& n = node(v);
  const auto i = static_cast<std::size_t>(v.id);
  if (i < grads_.size() && grads_[i].size() == n.value.size()) return grads_[i];
  return Matrix::Zero(n.value.rows(), n.value.cols());
}

void Tape::backward(Var loss) {
  const Node& root = node(loss);
  if (root.value.rows() != 1 || root.value.cols() != 1)
    throw ContractError("backward: loss must be a scalar, got " + std::to_string(root.value.rows()) +
                        "x" + std::to_string(root.value.cols()));
  grads_.assign(nodes_.size(), Matrix());
  grads_[static_cast<std::size_t>(loss.id)] = Matrix::Ones(1, 1);

  std::vector<const Matrix*> in_values;
  std::vector<Matrix*> in_grads;
  for (std::int32_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    Matrix& g = grads_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || g.size() == 0) continue;
    if (n.param != nullptr) n.param->grad += g;
    if (!n.rule) continue;
    in_values.clear();
    in_grads.clear();
    for (std::int32_t j : n.inputs) {
      Node& in = nodes_[static_cast<std::size_t>(j)];
      in_values.push_back(&in.value);
      if (!in.requires_grad) {
        in_grads.push_back(nullptr);
        continue;
      }
      Matrix& gj = grads_[static_cast<std::size_t>(j)];
      if (gj.size() == 0) gj = Matrix::Zero(in.value.rows(), in.value.cols());
      in_grads.push_back(&gj);
    }
    n.rule(BackwardArgs{n.value, g, in_values, in_grads});
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.rows()) throw ConfigError("matmul: inner dimensions differ");
  Matrix out = av * bv;
  return t.record("matmul", {a, b}, std::move(out), [](const BackwardArgs& g) {
    if (g.input_grads[0]) g.input_grads[0]->noalias() += g.grad_output * g.input_values[1]->transpose();
    if (g.input_grads[1]) g.input_grads[1]->noalias() += g.input_values[0]->transpose() * g.grad_output;
  });
}

Var add(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "add");
  Matrix out = t.value(a) + t.value(b);
  return t.record("add", {a, b}, std::move(out), [](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += g.grad_output;
    if (g.input_grads[1]) *g.input_grads[1] += g.grad_output;
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "sub");
  Matrix out = t.value(a) - t.value(b);
  return t.record("sub", {a, b}, std::move(out), [](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += g.grad_output;
    if (g.input_grads[1]) *g.input_grads[1] -= g.grad_output;
  });
}

Var scale(Tape& t, Var a, double s) {
  Matrix out = t.value(a) * s;
  return t.record("scale", {a}, std::move(out), [s](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += g.grad_output * s;
  });
}

Var add_row_broadcast(Tape& t, Var m, Var row) {
  const Matrix& mv = t.value(m);
  const Matrix& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != mv.cols()) throw ConfigError("add_row_broadcast: shape mismatch");
  Matrix out = mv.rowwise() + rv.row(0);
  return t.record("add_row_broadcast", {m, row}, std::move(out), [](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += g.grad_output;
    if (g.input_grads[1]) *g.input_grads[1] += g.grad_output.colwise().sum();
  });
}

Var mul_row_broadcast(Tape& t, Var m, Var row) {
  const Matrix& mv = t.value(m);
  const Matrix& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != mv.cols()) throw ConfigError("mul_row_broadcast: shape mismatch");
  Matrix out = mv.array().rowwise() * rv.row(0).array();
  return t.record("mul_row_broadcast", {m, row}, std::move(out), [](const BackwardArgs& g) {
    const Matrix& mv = *g.input_values[0];
    const Matrix& rv = *g.input_values[1];
    if (g.input_grads[0])
      g.input_grads[0]->array() += g.grad_output.array().rowwise() * rv.row(0).array();
    if (g.input_grads[1])
      *g.input_grads[1] += (g.grad_output.array() * mv.array()).matrix().colwise().sum();
  });
}

Var mul_col_broadcast(Tape& t, Var m, Var col) {
  const Matrix& mv = t.value(m);
  const Matrix& cv = t.value(col);
  if (cv.cols() != 1 || cv.rows() != mv.rows()) throw ConfigError("mul_col_broadcast: shape mismatch");
  Matrix out = mv.array().colwise() * cv.col(0).array();
  return t.record("mul_col_broadcast", {m, col}, std::move(out), [](const BackwardArgs& g) {
    const Matrix& mv = *g.input_values[0];
    const Matrix& cv = *g.input_values[1];
    if (g.input_grads[0])
      g.input_grads[0]->array() += g.grad_output.array().colwise() * cv.col(0).array();
    if (g.input_grads[1])
      *g.input_grads[1] += (g.grad_output.array() * mv.array()).matrix().rowwise().sum();
  });
}

Var hadamard(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "hadamard");
  Matrix out = t.value(a).cwiseProduct(t.value(b));
  return t.record("hadamard", {a, b}, std::move(out), [](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += g.grad_output.cwiseProduct(*g.input_values[1]);
    if (g.input_grads[1]) *g.input_grads[1] += g.grad_output.cwiseProduct(*g.input_values[0]);
  });
}

Var relu(Tape& t, Var a) {
  const Matrix& in = t.value(a);
  Matrix mask = t.branch_mask(in);
  std::uint64_t bits = 0;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    bits = (bits << 1) | (mask.data()[i] != 0.0 ? 1U : 0U);
    if ((i & 63) == 63) {
      t.note_branch(bits);
      bits = 0;
    }
  }
  t.note_branch(bits);
  Matrix out = in.cwiseProduct(mask);
  return t.record("relu", {a}, std::move(out), [mask = std::move(mask)](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += g.grad_output.cwiseProduct(mask);
  });
}

Var sigmoid(Tape& t, Var a) {
  Matrix out = t.value(a).unaryExpr([](double v) {
    // Split by sign so exp never overflows.
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return t.record("sigmoid", {a}, std::move(out), [](const BackwardArgs& g) {
    if (g.input_grads[0])
      g.input_grads[0]->array() +=
          g.grad_output.array() * g.output.array() * (1.0 - g.output.array());
  });
}

namespace {

Matrix softmax_rows_value(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

Var softmax_rows(Tape& t, Var a) {
  Matrix out = softmax_rows_value(t.value(a));
  return t.record("softmax_rows", {a}, std::move(out), [](const BackwardArgs& g) {
    if (!g.input_grads[0]) return;
    const Matrix& s = g.output;
    // d/dz = s * (g - <g, s>) per row.
    Vector dots = (g.grad_output.cwiseProduct(s)).rowwise().sum();
    g.input_grads[0]->array() += s.array() * (g.grad_output.colwise() - dots).array();
  });
}

Var log_softmax_rows(Tape& t, Var a) {
  const Matrix& av = t.value(a);
  Matrix out(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    const double m = av.row(i).maxCoeff();
    const double lse = m + std::log((av.row(i).array() - m).exp().sum());
    out.row(i) = av.row(i).array() - lse;
  }
  return t.record("log_softmax_rows", {a}, std::move(out), [](const BackwardArgs& g) {
    if (!g.input_grads[0]) return;
    Matrix s = g.output.array().exp().matrix();
    Vector gsum = g.grad_output.rowwise().sum();
    g.input_grads[0]->array() += g.grad_output.array() - (s.array().colwise() * gsum.array());
  });
}

Var concat_cols(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.rows() != bv.rows()) throw AlignmentError("concat_cols: row counts differ");
  Matrix out(av.rows(), av.cols() + bv.cols());
  out.leftCols(av.cols()) = av;
  out.rightCols(bv.cols()) = bv;
  const Eigen::Index ca = av.cols();
  const Eigen::Index cb = bv.cols();
  return t.record("concat_cols", {a, b}, std::move(out), [ca, cb](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += g.grad_output.leftCols(ca);
    if (g.input_grads[1]) *g.input_grads[1] += g.grad_output.rightCols(cb);
  });
}

Var slice_cols(Tape& t, Var a, Eigen::Index begin, Eigen::Index count) {
  const Matrix& av = t.value(a);
  if (begin < 0 || count < 0 || begin + count > av.cols()) throw ConfigError("slice_cols: out of range");
  Matrix out = av.middleCols(begin, count);
  return t.record("slice_cols", {a}, std::move(out), [begin, count](const BackwardArgs& g) {
    if (g.input_grads[0]) g.input_grads[0]->middleCols(begin, count) += g.grad_output;
  });
}

Var transpose(Tape& t, Var a) {
  Matrix out = t.value(a).transpose();
  return t.record("transpose", {a}, std::move(out), [](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += g.grad_output.transpose();
  });
}

Var sum(Tape& t, Var a) {
  Matrix out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.record("sum", {a}, std::move(out), [](const BackwardArgs& g) {
    if (g.input_grads[0]) g.input_grads[0]->array() += g.grad_output(0, 0);
  });
}

Var mean_rows(Tape& t, Var a, Eigen::Index begin, Eigen::Index count) {
  const std::array<std::pair<std::size_t, std::size_t>, 1> r{
      {{static_cast<std::size_t>(begin), static_cast<std::size_t>(begin + count)}}};
  return segment_mean_rows(t, a, r);
}

Var segment_mean_rows(Tape& t, Var a, std::span<const std::pair<std::size_t, std::size_t>> ranges) {
  const Matrix& av = t.value(a);
  Matrix out(static_cast<Eigen::Index>(ranges.size()), av.cols());
  std::vector<std::pair<std::size_t, std::size_t>> kept(ranges.begin(), ranges.end());
  for (std::size_t s = 0; s < kept.size(); ++s) {
    const auto [b, e] = kept[s];
    if (e <= b || e > static_cast<std::size_t>(av.rows()))
      throw EmptyInputError("segment mean over an empty or out-of-range row range");
    out.row(static_cast<Eigen::Index>(s)) =
        av.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)).colwise().sum() /
        static_cast<double>(e - b);
  }
  return t.record("segment_mean_rows", {a}, std::move(out), [kept](const BackwardArgs& g) {
    if (!g.input_grads[0]) return;
    for (std::size_t s = 0; s < kept.size(); ++s) {
      const auto [b, e] = kept[s];
      const RowVector share = g.grad_output.row(static_cast<Eigen::Index>(s)) / static_cast<double>(e - b);
      g.input_grads[0]->middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)).rowwise() += share;
    }
  });
}

Var segment_broadcast_rows(Tape& t, Var a,
                           std::span<const std::pair<std::size_t, std::size_t>> ranges) {
  const Matrix& av = t.value(a);
  if (static_cast<std::size_t>(av.rows()) != ranges.size())
    throw ConfigError("segment_broadcast_rows: one row per segment required");
  std::vector<std::pair<std::size_t, std::size_t>> kept(ranges.begin(), ranges.end());
  std::size_t total = 0;
  for (const auto& r : kept) total = std::max(total, r.second);
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(total), av.cols());
  for (std::size_t s = 0; s < kept.size(); ++s)
    out.middleRows(static_cast<Eigen::Index>(kept[s].first),
                   static_cast<Eigen::Index>(kept[s].second - kept[s].first))
        .rowwise() = av.row(static_cast<Eigen::Index>(s));
  return t.record("segment_broadcast_rows", {a}, std::move(out), [kept](const BackwardArgs& g) {
    if (!g.input_grads[0]) return;
    for (std::size_t s = 0; s < kept.size(); ++s)
      g.input_grads[0]->row(static_cast<Eigen::Index>(s)) +=
          g.grad_output
              .middleRows(static_cast<Eigen::Index>(kept[s].first),
                          static_cast<Eigen::Index>(kept[s].second - kept[s].first))
              .colwise()
              .sum();
  });
}

Var gather_rows(Tape& t, Var a, std::span<const std::int32_t> index) {
  const Matrix& av = t.value(a);
  std::vector<std::int32_t> idx(index.begin(), index.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), av.cols());
  for (std::size_t p = 0; p < idx.size(); ++p) {
    if (idx[p] < 0 || idx[p] >= av.rows()) throw InternalError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(p)) = av.row(idx[p]);
  }
  return t.record("gather_rows", {a}, std::move(out), [idx](const BackwardArgs& g) {
    if (!g.input_grads[0]) return;
    for (std::size_t p = 0; p < idx.size(); ++p)
      g.input_grads[0]->row(idx[p]) += g.grad_output.row(static_cast<Eigen::Index>(p));
  });
}

Var weighted_sum(Tape& t, Var a, const Matrix& w) {
  require_same_shape(t.value(a), w, "weighted_sum");
  Matrix out(1, 1);
  out(0, 0) = t.value(a).cwiseProduct(w).sum();
  return t.record("weighted_sum", {a}, std::move(out), [w](const BackwardArgs& g) {
    if (g.input_grads[0]) *g.input_grads[0] += w * g.grad_output(0, 0);
  });
}

// ---------------------------------------------------------------------------
// Finite differences

namespace {

struct Evaluation {
  double value;
  std::uint64_t signature;
};

Evaluation evaluate(const LossBuilder& f, std::vector<Matrix>* record = nullptr,
                    const std::vector<Matrix>* replay = nullptr) {
  Tape t;
  t.set_branch_log(record, replay);
  const Var loss = f(t);
  const Matrix& v = t.value(loss);
  if (v.size() != 1) throw ContractError("finite_difference_check: loss must be a scalar");
  return {v(0, 0), t.branch_signature()};
}

}  // namespace

FiniteDifferenceReport finite_difference_report(const LossBuilder& f,
                                                std::span<Parameter* const> params,
                                                const FiniteDifferenceOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    t.backward(f(t));
  }
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  std::vector<Matrix> masks;
  const Evaluation first = evaluate(f, &masks);
  const Evaluation second = evaluate(f);
  const std::vector<Matrix>* replay = options.freeze_branches ? &masks : nullptr;
  if (std::memcmp(&first.value, &second.value, sizeof(double)) != 0 ||
      first.signature != second.signature)
    throw OracleInvalidError("finite_difference_check: forward pass is not deterministic");

  std::mt19937_64 rng(options.seed);
  FiniteDifferenceReport report;
  const double h = options.step;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const auto n = static_cast<std::size_t>(p.value.size());
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), 0);
    std::size_t want = n;
    if (options.samples_per_parameter > 0 && options.samples_per_parameter < n) {
      std::shuffle(entries.begin(), entries.end(), rng);
      want = options.samples_per_parameter;
    }
    std::size_t done = 0;
    for (std::size_t e : entries) {
      if (done == want) break;
      double& slot = p.value.data()[e];
      const double original = slot;
      slot = original + h;
      const Evaluation up = evaluate(f, nullptr, replay);
      slot = original - h;
      const Evaluation down = evaluate(f, nullptr, replay);
      slot = original;
      if (up.signature != first.signature || down.signature != first.signature) {
        ++report.skipped_at_kinks;
        continue;
      }
      const double numeric = (up.value - down.value) / (2.0 * h);
      const double a = analytic[pi].data()[e];
      report.max_rel_error =
          std::max(report.max_rel_error, std::abs(a - numeric) / (std::abs(numeric) + 1e-8));
      ++report.checked;
      ++done;
    }
  }
  // Leave the analytic gradient in place for callers that inspect it.
  for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = analytic[pi];
  return report;
}

double finite_difference_check(const LossBuilder& f, std::span<Parameter* const> params,
                               const FiniteDifferenceOptions& options) {
  return finite_difference_report(f, params, options).max_rel_error;
}

}  // namespace mssnet::ad
