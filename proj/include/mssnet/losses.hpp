#pragma once

#include "mssnet/autodiff.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mssnet::loss {

/// Scalar loss together with its gradient with respect to the input matrix.
struct LossValue {
  double value = 0.0;
  Matrix grad;
  /// Hash of the per-class sort orders (Lovasz only); see Tape::note_branch.
  std::uint64_t branch = 0;
};

/// Mean negative log-softmax of the true class over non-ignored rows.
/// Throws DegenerateError when every row is ignored.
LossValue cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels,
                        std::uint32_t ignore_label = kIgnoreLabel);

/// Lovasz-softmax over the classes present in `labels` (ignored rows
/// excluded). `probs` rows must sum to 1 within 1e-6. The gradient is the
/// piecewise-linear one of the Lovasz extension for the current sort order.
LossValue lovasz_softmax(const Matrix& probs, std::span<const std::uint32_t> labels,
                         std::uint32_t ignore_label = kIgnoreLabel);

/// Gradient of the Jaccard loss's Lovasz extension given ground truth
/// sorted by decreasing error.
std::vector<double> lovasz_grad(std::span<const std::uint8_t> gt_sorted);

struct LossWeights {
  double ce = 1.0;
  double lovasz = 1.0;

  void validate() const;
};

struct CombinedValue {
  double total = 0.0;
  double ce = 0.0;
  double lovasz = 0.0;
  Matrix grad;  // with respect to logits
};

/// w_ce * CE(logits) + w_lovasz * Lovasz(softmax(logits)). A zero weight
/// skips that term entirely.
CombinedValue combined_loss(const Matrix& logits, std::span<const std::uint32_t> labels,
                            const LossWeights& weights, std::uint32_t ignore_label = kIgnoreLabel);

// Tape-recorded versions (gradients flow into the network).
ad::Var cross_entropy(ad::Tape& t, ad::Var logits, std::span<const std::uint32_t> labels,
                      std::uint32_t ignore_label = kIgnoreLabel);
ad::Var lovasz_softmax(ad::Tape& t, ad::Var probs, std::span<const std::uint32_t> labels,
                       std::uint32_t ignore_label = kIgnoreLabel);

struct CombinedTerms {
  ad::Var total;
  double ce = 0.0;
  double lovasz = 0.0;
};
CombinedTerms combined_loss(ad::Tape& t, ad::Var logits, std::span<const std::uint32_t> labels,
                            const LossWeights& weights, std::uint32_t ignore_label = kIgnoreLabel);

// ---------------------------------------------------------------------------
// Metrics

/// Ground truth in rows, prediction in columns. Points whose ground truth is
/// the ignore label are not counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes, std::uint32_t ignore_label = kIgnoreLabel);

  void add(std::uint32_t truth, std::uint32_t prediction);
  void add(std::span<const std::uint32_t> truth, std::span<const std::uint32_t> prediction);
  void merge(const ConfusionMatrix& other);

  int num_classes() const noexcept { return num_classes_; }
  std::uint32_t ignore_label() const noexcept { return ignore_label_; }
  std::uint64_t at(int truth, int prediction) const;
  std::uint64_t total() const noexcept { return total_; }

 private:
  int num_classes_;
  std::uint32_t ignore_label_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

struct IouReport {
  /// IoU per class; nullopt for classes absent from both truth and
  /// prediction (excluded from the mean).
  std::vector<std::optional<double>> iou;
  double miou = 0.0;
};

/// Throws DegenerateError on an empty matrix.
IouReport miou(const ConfusionMatrix& cm);
double overall_accuracy(const ConfusionMatrix& cm);
/// Mean over classes present in the ground truth of TP / (TP + FN).
double mean_class_accuracy(const ConfusionMatrix& cm);

struct DistanceBin {
  double lo = 0.0;
  double hi = 0.0;
  ConfusionMatrix cm;
  std::optional<IouReport> report;  // nullopt when no point fell in the bin
};

/// Bins points by horizontal range sqrt(x^2 + y^2); bins are [lo, hi) with
/// the last bin closed. Points outside all bins are dropped.
std::vector<DistanceBin> miou_by_distance(const Matrix& positions,
                                          std::span<const std::uint32_t> predictions,
                                          std::span<const std::uint32_t> labels,
                                          std::span<const double> bin_edges, int num_classes,
                                          std::uint32_t ignore_label = kIgnoreLabel);

/// CSV with header `kind,name,value`: one `class` row per class (IoU, or
/// "absent"), then `summary` rows for mIoU, OA and mAcc.
void write_metric_report(std::ostream& out, const ConfusionMatrix& cm,
                         std::span<const std::string> class_names);

/// Row-wise argmax.
std::vector<std::uint32_t> argmax_rows(const Matrix& scores);

}  // namespace mssnet::loss
