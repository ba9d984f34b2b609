#include "fetalsleep/metrics.hpp"

#include "fetalsleep/error.hpp"

namespace fsn::eval {

long long ConfusionMatrix::total() const {
  long long s = 0;
  for (auto v : counts) s += v;
  return s;
}

long long ConfusionMatrix::row_sum(std::size_t truth) const {
  long long s = 0;
  for (std::size_t p = 0; p < num_classes; ++p) s += at(truth, p);
  return s;
}

long long ConfusionMatrix::col_sum(std::size_t pred) const {
  long long s = 0;
  for (std::size_t t = 0; t < num_classes; ++t) s += at(t, pred);
  return s;
}

long long ConfusionMatrix::trace() const {
  long long s = 0;
  for (std::size_t c = 0; c < num_classes; ++c) s += at(c, c);
  return s;
}

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels,
                          std::size_t num_classes) {
  if (predictions.size() != labels.size())
    throw DataError("predictions (" + std::to_string(predictions.size()) + ") and labels (" +
                    std::to_string(labels.size()) + ") differ in length");
  if (labels.empty()) throw DataError("no epochs to score");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= num_classes ||
        static_cast<std::size_t>(p) >= num_classes)
      throw LabelError("class index out of range at epoch " + std::to_string(i));
    ++cm.at(t, p);
  }
  return cm;
}

ClassScores class_scores(const ConfusionMatrix& cm, std::size_t cls) {
  const double tp = static_cast<double>(cm.at(cls, cls));
  const double predicted = static_cast<double>(cm.col_sum(cls));
  const double actual = static_cast<double>(cm.row_sum(cls));
  ClassScores s;
  s.precision = predicted > 0 ? tp / predicted : 0.0;
  s.recall = actual > 0 ? tp / actual : 0.0;
  s.f1 = (s.precision + s.recall) > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

FoldResult fold_result(const ConfusionMatrix& cm, std::string fold_id) {
  FoldResult r;
  r.fold_id = std::move(fold_id);
  r.confusion = cm;
  const auto total = cm.total();
  if (total == 0) throw DataError("empty confusion matrix");
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  double sum = 0.0;
  std::size_t used_columns = 0;
  for (std::size_t c = 0; c < cm.num_classes; ++c) {
    r.f1.push_back(class_scores(cm, c).f1);
    sum += r.f1.back();
    if (cm.col_sum(c) > 0) ++used_columns;
  }
  r.macro_f1 = sum / static_cast<double>(cm.num_classes);
  r.collapsed = used_columns <= 1;
  return r;
}

FoldResult metrics(std::span<const int> predictions, std::span<const int> labels, std::size_t num_classes,
                   std::string fold_id) {
  return fold_result(confusion(predictions, labels, num_classes), std::move(fold_id));
}

}  // namespace fsn::eval
