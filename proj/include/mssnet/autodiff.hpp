#pragma once

#include "mssnet/common.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mssnet::ad {

/// Trainable tensor. `grad` accumulates across backward calls until
/// zero_grad().
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// What a backward rule sees. `input_grads[i]` is null when input i does not
/// need a gradient; otherwise it is pre-sized to the input's shape and the
/// rule must add (never assign) its contribution.
struct BackwardArgs {
  const Matrix& output;
  const Matrix& grad_output;
  std::span<const Matrix* const> input_values;
  std::span<Matrix* const> input_grads;
};

using BackwardRule = std::function<void(const BackwardArgs&)>;

/// Append-only record of a forward computation. Node ids are topologically
/// ordered by construction, so backward is a single reverse sweep.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix value);
  /// Leaf whose gradient can be read back with grad() after backward.
  Var input(Matrix value);
  /// Leaf bound to `p`; backward adds d(loss)/d(p) into p.grad. The
  /// parameter must outlive the tape.
  Var parameter(Parameter& p);

  /// Appends an operation node. Every input must already be on this tape.
  Var record(const char* op_kind, std::span<const Var> inputs, Matrix output, BackwardRule rule);
  Var record(const char* op_kind, std::initializer_list<Var> inputs, Matrix output,
             BackwardRule rule) {
    return record(op_kind, std::span<const Var>(inputs.begin(), inputs.size()), std::move(output),
                  std::move(rule));
  }

  /// Stays valid for the tape's lifetime.
  const Matrix& value(Var v) const;
  /// Gradient of the last backward() with respect to `v` (zeros when `v`
  /// did not contribute).
  Matrix grad(Var v) const;
  bool requires_grad(Var v) const;
  const char* op_kind(Var v) const;

  /// Reverse sweep from a 1x1 `loss`. Parameter gradients accumulate.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Piecewise ops (relu masks, sort orders) fold their branch choice in
  /// here. Two forwards with equal signatures ran in the same smooth piece.
  void note_branch(std::uint64_t bits) noexcept;
  std::uint64_t branch_signature() const noexcept { return signature_; }

  /// 0/1 relu mask for `x`. Normally x > 0; when replaying, the next
  /// recorded mask instead, which pins the forward to a chosen piece.
  Matrix branch_mask(const Matrix& x);
  /// Either pointer may be null. Both must outlive the tape.
  void set_branch_log(std::vector<Matrix>* record, const std::vector<Matrix>* replay) noexcept {
    recording_ = record;
    replay_ = replay;
    replay_pos_ = 0;
  }

 private:
  struct Node {
    const char* op_kind = "";
    std::vector<std::int32_t> inputs;
    Matrix value;
    BackwardRule rule;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  Var push(Node n);

  // deque: values handed out by value() stay valid while nodes are appended.
  std::deque<Node> nodes_;
  std::vector<Matrix> grads_;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
  std::vector<Matrix>* recording_ = nullptr;
  const std::vector<Matrix>* replay_ = nullptr;
  std::size_t replay_pos_ = 0;
};

// Dense differentiable primitives.

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
/// Adds a 1 x C row to every row of an N x C matrix.
Var add_row_broadcast(Tape& t, Var m, Var row);
/// Multiplies every row of an N x C matrix elementwise by a 1 x C row.
Var mul_row_broadcast(Tape& t, Var m, Var row);
/// Multiplies row i of an N x C matrix by column entry w(i, 0) of an N x 1 matrix.
Var mul_col_broadcast(Tape& t, Var m, Var col);
Var hadamard(Tape& t, Var a, Var b);
Var relu(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var softmax_rows(Tape& t, Var a);
Var log_softmax_rows(Tape& t, Var a);
Var concat_cols(Tape& t, Var a, Var b);
Var slice_cols(Tape& t, Var a, Eigen::Index begin, Eigen::Index count);
Var transpose(Tape& t, Var a);
/// Sum of all entries (1x1).
Var sum(Tape& t, Var a);
/// Column means over the given row range (1 x C).
Var mean_rows(Tape& t, Var a, Eigen::Index begin, Eigen::Index count);
/// Stacks row-ranges' means: for each [begin, end) range produces one row.
Var segment_mean_rows(Tape& t, Var a, std::span<const std::pair<std::size_t, std::size_t>> ranges);
/// Row i of the result is row index[segment_of(i)] of `a`: repeats segment
/// rows over the given row ranges (inverse shape of segment_mean_rows).
Var segment_broadcast_rows(Tape& t, Var a,
                           std::span<const std::pair<std::size_t, std::size_t>> ranges);
/// Row p of the result is row index[p] of `a`.
Var gather_rows(Tape& t, Var a, std::span<const std::int32_t> index);
/// sum(a .* w) for a constant weight matrix w (1x1).
Var weighted_sum(Tape& t, Var a, const Matrix& w);

// Gradient checking.

struct FiniteDifferenceOptions {
  double step = 1e-4;
  /// Entries sampled per parameter; 0 checks every entry.
  std::size_t samples_per_parameter = 0;
  std::uint64_t seed = 7;
  /// Replay the base point's relu masks in the +-h forwards, so the quotient
  /// differentiates the same smooth piece backward() does. Sort-order kinks
  /// are still skipped.
  bool freeze_branches = false;
};

/// Loss closure for gradient checking: builds the forward graph on the given
/// tape and returns the scalar loss.
using LossBuilder = std::function<Var(Tape&)>;

struct FiniteDifferenceReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Entries whose +-h forwards left the smooth piece of the base point.
  /// The difference quotient is meaningless there, so they are not scored.
  std::size_t skipped_at_kinks = 0;
};

/// Compares backward() against central finite differences over
/// |analytic - numeric| / (|numeric| + 1e-8). With sampling, a skipped entry
/// is replaced by the next one in the shuffled order.
/// Throws OracleInvalidError when two forward passes disagree.
FiniteDifferenceReport finite_difference_report(const LossBuilder& f,
                                                std::span<Parameter* const> params,
                                                const FiniteDifferenceOptions& options = {});

/// max_rel_error of finite_difference_report.
double finite_difference_check(const LossBuilder& f, std::span<Parameter* const> params,
                               const FiniteDifferenceOptions& options = {});

}  // namespace mssnet::ad
