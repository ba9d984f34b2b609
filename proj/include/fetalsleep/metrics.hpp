#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fsn::eval {

/// counts[t * n + p]: epochs with true class t predicted as p.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<long long> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t n) : num_classes(n), counts(n * n, 0) {}

  long long& at(std::size_t truth, std::size_t pred) { return counts[truth * num_classes + pred]; }
  long long at(std::size_t truth, std::size_t pred) const { return counts[truth * num_classes + pred]; }
  long long total() const;
  long long row_sum(std::size_t truth) const;
  long long col_sum(std::size_t pred) const;
  long long trace() const;
};

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels,
                          std::size_t num_classes);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Zero-division rule: any undefined ratio is 0.
ClassScores class_scores(const ConfusionMatrix& cm, std::size_t cls);

struct FoldResult {
  std::string fold_id;
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  std::vector<double> f1;  // per class index
  double macro_f1 = 0.0;
  /// Every prediction fell into a single class.
  bool collapsed = false;
};

FoldResult fold_result(const ConfusionMatrix& cm, std::string fold_id = {});
FoldResult metrics(std::span<const int> predictions, std::span<const int> labels,
                   std::size_t num_classes = 3, std::string fold_id = {});

}  // namespace fsn::eval
