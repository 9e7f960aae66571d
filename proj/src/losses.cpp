#include "mssnet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

namespace mssnet::loss {

namespace {

void check_labels(const Matrix& m, std::span<const std::uint32_t> labels, std::uint32_t ignore) {
  if (static_cast<std::size_t>(m.rows()) != labels.size())
    throw InvalidInputError("label count does not match row count");
  for (auto l : labels)
    if (l != ignore && l >= static_cast<std::uint32_t>(m.cols()))
      throw InvalidInputError("label " + std::to_string(l) + " outside [0, " +
                              std::to_string(m.cols()) + ")");
}

}  // namespace

LossValue cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels,
                        std::uint32_t ignore_label) {
  check_labels(logits, labels, ignore_label);
  std::size_t scored = 0;
  for (auto l : labels) scored += (l != ignore_label);
  if (scored == 0) throw DegenerateError("cross_entropy: every row is ignored");
  LossValue out;
  out.grad = Matrix::Zero(logits.rows(), logits.cols());
  const double inv = 1.0 / static_cast<double>(scored);
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    if (y == ignore_label) continue;
    const double m = logits.row(i).maxCoeff();
    const RowVector e = (logits.row(i).array() - m).exp().matrix();
    const double z = e.sum();
    total += std::log(z) - (logits(i, y) - m);
    out.grad.row(i) = e / z * inv;
    out.grad(i, y) -= inv;
  }
  out.value = total * inv;
  return out;
}

std::vector<double> lovasz_grad(std::span<const std::uint8_t> gt_sorted) {
  const std::size_t n = gt_sorted.size();
  std::vector<double> jaccard(n);
  double gts = 0.0;
  for (auto g : gt_sorted) gts += g;
  double cum_fg = 0.0;
  double cum_bg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_fg += gt_sorted[i];
    cum_bg += 1 - gt_sorted[i];
    const double intersection = gts - cum_fg;
    const double uni = gts + cum_bg;
    jaccard[i] = 1.0 - intersection / uni;
  }
  for (std::size_t i = n; i-- > 1;) jaccard[i] -= jaccard[i - 1];
  return jaccard;
}

LossValue lovasz_softmax(const Matrix& probs, std::span<const std::uint32_t> labels,
                         std::uint32_t ignore_label) {
  check_labels(probs, labels, ignore_label);
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    if (std::abs(probs.row(i).sum() - 1.0) > 1e-6)
      throw ContractError("lovasz_softmax: probability row " + std::to_string(i) +
                          " does not sum to 1");
  LossValue out;
  out.grad = Matrix::Zero(probs.rows(), probs.cols());

  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    if (labels[static_cast<std::size_t>(i)] != ignore_label) rows.push_back(i);
  if (rows.empty()) return out;

  std::vector<int> present;
  for (Eigen::Index c = 0; c < probs.cols(); ++c)
    if (std::any_of(rows.begin(), rows.end(), [&](Eigen::Index i) {
          return labels[static_cast<std::size_t>(i)] == static_cast<std::uint32_t>(c);
        }))
      present.push_back(static_cast<int>(c));

  const std::size_t n = rows.size();
  std::vector<double> errors(n);
  std::vector<std::uint8_t> fg(n);
  std::vector<std::size_t> order(n);
  std::vector<std::uint8_t> gt_sorted(n);
  const double inv_classes = 1.0 / static_cast<double>(present.size());
  double total = 0.0;
  for (int c : present) {
    for (std::size_t k = 0; k < n; ++k) {
      const Eigen::Index i = rows[k];
      fg[k] = labels[static_cast<std::size_t>(i)] == static_cast<std::uint32_t>(c);
      errors[k] = std::abs(static_cast<double>(fg[k]) - probs(i, c));
    }
    std::iota(order.begin(), order.end(), 0);
    // Stable so ties keep row order; the loss value is tie-independent.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
    for (std::size_t r = 0; r < n; ++r) {
      gt_sorted[r] = fg[order[r]];
      out.branch = out.branch * 0x100000001b3ULL + order[r] + 1;
    }
    const std::vector<double> g = lovasz_grad(gt_sorted);
    double loss_c = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t k = order[r];
      loss_c += errors[k] * g[r];
      // d error / d p is -1 for foreground rows, +1 otherwise.
      out.grad(rows[k], c) += (fg[k] ? -g[r] : g[r]) * inv_classes;
    }
    total += loss_c;
  }
  out.value = total * inv_classes;
  return out;
}

void LossWeights::validate() const {
  if (ce < 0.0 || lovasz < 0.0) throw ConfigError("loss weights must be non-negative");
  if (ce == 0.0 && lovasz == 0.0) throw ConfigError("loss weights must not both be zero");
}

namespace {

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

CombinedValue combined_loss(const Matrix& logits, std::span<const std::uint32_t> labels,
                            const LossWeights& weights, std::uint32_t ignore_label) {
  weights.validate();
  CombinedValue out;
  out.grad = Matrix::Zero(logits.rows(), logits.cols());
  if (weights.ce != 0.0) {
    LossValue ce = cross_entropy(logits, labels, ignore_label);
    out.ce = ce.value;
    out.total += weights.ce * ce.value;
    out.grad += weights.ce * ce.grad;
  }
  if (weights.lovasz != 0.0) {
    const Matrix p = softmax_rows(logits);
    LossValue lv = lovasz_softmax(p, labels, ignore_label);
    out.lovasz = lv.value;
    out.total += weights.lovasz * lv.value;
    // Chain through the softmax Jacobian row by row.
    const Vector dots = lv.grad.cwiseProduct(p).rowwise().sum();
    out.grad += weights.lovasz * Matrix(p.array() * (lv.grad.colwise() - dots).array());
  }
  return out;
}

namespace {

ad::Var record_loss(ad::Tape& t, const char* kind, ad::Var input, LossValue lv) {
  Matrix value(1, 1);
  value(0, 0) = lv.value;
  if (lv.branch != 0) t.note_branch(lv.branch);
  return t.record(kind, {input}, std::move(value), [g = std::move(lv.grad)](const ad::BackwardArgs& a) {
    if (a.input_grads[0]) *a.input_grads[0] += g * a.grad_output(0, 0);
  });
}

}  // namespace

ad::Var cross_entropy(ad::Tape& t, ad::Var logits, std::span<const std::uint32_t> labels,
                      std::uint32_t ignore_label) {
  return record_loss(t, "cross_entropy", logits, cross_entropy(t.value(logits), labels, ignore_label));
}

ad::Var lovasz_softmax(ad::Tape& t, ad::Var probs, std::span<const std::uint32_t> labels,
                       std::uint32_t ignore_label) {
  return record_loss(t, "lovasz_softmax", probs, lovasz_softmax(t.value(probs), labels, ignore_label));
}

CombinedTerms combined_loss(ad::Tape& t, ad::Var logits, std::span<const std::uint32_t> labels,
                            const LossWeights& weights, std::uint32_t ignore_label) {
  weights.validate();
  CombinedTerms out;
  ad::Var total;
  if (weights.ce != 0.0) {
    ad::Var ce = cross_entropy(t, logits, labels, ignore_label);
    out.ce = t.value(ce)(0, 0);
    total = ad::scale(t, ce, weights.ce);
  }
  if (weights.lovasz != 0.0) {
    ad::Var lv = lovasz_softmax(t, ad::softmax_rows(t, logits), labels, ignore_label);
    out.lovasz = t.value(lv)(0, 0);
    ad::Var term = ad::scale(t, lv, weights.lovasz);
    total = total.valid() ? ad::add(t, total, term) : term;
  }
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

ConfusionMatrix::ConfusionMatrix(int num_classes, std::uint32_t ignore_label)
    : num_classes_(num_classes), ignore_label_(ignore_label) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0);
}

void ConfusionMatrix::add(std::uint32_t truth, std::uint32_t prediction) {
  if (truth == ignore_label_) return;
  const auto k = static_cast<std::uint32_t>(num_classes_);
  if (truth >= k || prediction >= k)
    throw InvalidInputError("confusion matrix: class id out of range");
  ++counts_[truth * k + prediction];
  ++total_;
}

void ConfusionMatrix::add(std::span<const std::uint32_t> truth,
                          std::span<const std::uint32_t> prediction) {
  if (truth.size() != prediction.size())
    throw InvalidInputError("confusion matrix: truth and prediction lengths differ");
  for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], prediction[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) throw InvalidInputError("confusion matrix: class count differs");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

std::uint64_t ConfusionMatrix::at(int truth, int prediction) const {
  return counts_[static_cast<std::size_t>(truth) * static_cast<std::size_t>(num_classes_) +
                 static_cast<std::size_t>(prediction)];
}

IouReport miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DegenerateError("miou: empty confusion matrix");
  const int k = cm.num_classes();
  IouReport r;
  r.iou.resize(static_cast<std::size_t>(k));
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < k; ++c) {
    std::uint64_t tp = cm.at(c, c);
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    r.iou[static_cast<std::size_t>(c)] = iou;
    sum += iou;
    ++counted;
  }
  r.miou = sum / counted;
  return r;
}

double overall_accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DegenerateError("overall_accuracy: empty confusion matrix");
  std::uint64_t trace = 0;
  for (int c = 0; c < cm.num_classes(); ++c) trace += cm.at(c, c);
  return static_cast<double>(trace) / static_cast<double>(cm.total());
}

double mean_class_accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DegenerateError("mean_class_accuracy: empty confusion matrix");
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    std::uint64_t row = 0;
    for (int o = 0; o < cm.num_classes(); ++o) row += cm.at(c, o);
    if (row == 0) continue;
    sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(row);
    ++counted;
  }
  return sum / counted;
}

std::vector<DistanceBin> miou_by_distance(const Matrix& positions,
                                          std::span<const std::uint32_t> predictions,
                                          std::span<const std::uint32_t> labels,
                                          std::span<const double> bin_edges, int num_classes,
                                          std::uint32_t ignore_label) {
  if (bin_edges.size() < 2) throw ConfigError("distance bins need at least two edges");
  for (std::size_t i = 1; i < bin_edges.size(); ++i)
    if (!(bin_edges[i] > bin_edges[i - 1])) throw ConfigError("distance bin edges must be strictly increasing");
  if (static_cast<std::size_t>(positions.rows()) != predictions.size() || predictions.size() != labels.size())
    throw InvalidInputError("miou_by_distance: positions, predictions and labels differ in length");

  std::vector<DistanceBin> bins;
  for (std::size_t i = 0; i + 1 < bin_edges.size(); ++i)
    bins.push_back({bin_edges[i], bin_edges[i + 1], ConfusionMatrix(num_classes, ignore_label), std::nullopt});
  for (Eigen::Index p = 0; p < positions.rows(); ++p) {
    const double r = std::hypot(positions(p, 0), positions(p, 1));
    if (r < bin_edges.front() || r > bin_edges.back()) continue;
    auto it = std::upper_bound(bin_edges.begin(), bin_edges.end(), r);
    std::size_t b = static_cast<std::size_t>(it - bin_edges.begin()) - 1;
    if (b >= bins.size()) b = bins.size() - 1;  // r == last edge
    bins[b].cm.add(labels[static_cast<std::size_t>(p)], predictions[static_cast<std::size_t>(p)]);
  }
  for (auto& bin : bins)
    if (bin.cm.total() > 0) bin.report = miou(bin.cm);
  return bins;
}

void write_metric_report(std::ostream& out, const ConfusionMatrix& cm,
                         std::span<const std::string> class_names) {
  const IouReport r = miou(cm);
  out << "kind,name,value\n" << std::setprecision(10);
  for (int c = 0; c < cm.num_classes(); ++c) {
    const std::string name = static_cast<std::size_t>(c) < class_names.size()
                                 ? class_names[static_cast<std::size_t>(c)]
                                 : "class" + std::to_string(c);
    out << "class," << name << ",";
    if (r.iou[static_cast<std::size_t>(c)])
      out << *r.iou[static_cast<std::size_t>(c)];
    else
      out << "absent";
    out << "\n";
  }
  out << "summary,mIoU," << r.miou << "\n";
  out << "summary,OA," << overall_accuracy(cm) << "\n";
  out << "summary,mAcc," << mean_class_accuracy(cm) << "\n";
}

std::vector<std::uint32_t> argmax_rows(const Matrix& scores) {
  std::vector<std::uint32_t> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(best);
  }
  return out;
}

}  // namespace mssnet::loss
