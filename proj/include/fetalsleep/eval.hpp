#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fetalsleep/layers.hpp"
#include "fetalsleep/metrics.hpp"
#include "fetalsleep/model.hpp"

namespace fsn::eval {

struct LosoSplit {
  std::string test;
  std::vector<std::string> val;
  std::vector<std::string> train;
};

/// Subjects sorted by id; fold k tests subject k and validates on the next
/// `val_count` subjects cyclically. Duplicates raise DataError.
LosoSplit loso_split(std::span<const std::string> subject_ids, std::size_t fold, std::size_t val_count = 2);

struct PairedTestResult {
  std::string metric;
  /// min(W+, W-); half-integers are possible when ties are mid-ranked.
  double w = 0.0;
  double p = 1.0;
  std::size_t n = 0;  // pairs after dropping zero differences
  bool ties = false;
  bool significant = false;
};

/// Exact two-sided signed-rank test on differences (zeros discarded, ties
/// mid-ranked). The null distribution is enumerated by dynamic programming.
PairedTestResult wilcoxon_exact(std::span<const double> differences, std::string metric = {}, double alpha = 0.05);
PairedTestResult wilcoxon_exact(std::span<const double> a, std::span<const double> b, std::string metric = {},
                                double alpha = 0.05);

/// Holm step-down: reject sorted p_(i) while p_(i) <= alpha / (m - i).
std::vector<bool> holm_bonferroni(std::span<const double> p_values, double alpha = 0.05);
std::vector<bool> bonferroni(std::span<const double> p_values, double alpha = 0.05);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

MeanStd mean_std(std::span<const double> values);

struct FoldSummary {
  MeanStd accuracy;
  MeanStd macro_f1;
  std::vector<MeanStd> f1;
};

FoldSummary summarise(std::span<const FoldResult> folds);

struct ResultBlock {
  std::string model;
  std::string pretrain;
  std::string input;
  std::string strategy;
  std::vector<FoldResult> folds;
};

/// One row per fold plus a "mean ± std" row per block. Per-class columns
/// are named after the label space classes.
std::string results_csv(std::span<const ResultBlock> blocks, LabelSpace space = LabelSpace::kFetal);
std::string stats_csv(std::span<const PairedTestResult> tests, const std::vector<bool>& holm,
                      const std::vector<bool>& bonf);

/// Anything that maps feature rows to class indices.
class FeatureClassifier {
 public:
  virtual ~FeatureClassifier() = default;
  virtual std::vector<int> predict(const layers::Mat& features) const = 0;
  virtual std::size_t num_classes() const = 0;
};

struct SoftmaxFitOptions {
  std::size_t iterations = 400;
  double lr = 0.1;
  double l2 = 1e-4;
};

/// Multinomial logistic regression on standardised features, full-batch
/// Adam with balanced class weights.
class SoftmaxRegression : public FeatureClassifier {
 public:
  SoftmaxRegression() = default;
  SoftmaxRegression(layers::Mat weights, layers::Mat bias, std::vector<double> mean, std::vector<double> scale);

  static SoftmaxRegression fit(const layers::Mat& features, std::span<const int> labels, std::size_t num_classes,
                               const SoftmaxFitOptions& options = {});

  std::vector<int> predict(const layers::Mat& features) const override;
  std::size_t num_classes() const override { return static_cast<std::size_t>(weights_.cols()); }
  const layers::Mat& weights() const { return weights_; }

 private:
  layers::Mat weights_;  // F x C on standardised inputs
  layers::Mat bias_;     // 1 x C
  std::vector<double> mean_, scale_;
};

struct FeatureImportance {
  std::size_t index = 0;
  std::string name;
  double mean_drop = 0.0;
  double std_drop = 0.0;
  bool constant = false;
};

/// Mean macro-F1 drop when one column is shuffled, `repeats` seeded
/// shuffles each; sorted by descending drop (ties by column index).
std::vector<FeatureImportance> permutation_importance(const FeatureClassifier& model, const layers::Mat& features,
                                                      std::span<const int> labels, std::span<const std::string> names,
                                                      std::size_t repeats = 5, std::uint64_t seed = 0);

/// Importances averaged across folds by feature index, then re-ranked.
std::vector<FeatureImportance> average_importance(std::span<const std::vector<FeatureImportance>> folds);

struct ClassTrackPoint {
  std::size_t epoch = 0;
  std::optional<ClassScores> scores;  // empty: no confusion matrix logged
};

enum class TrackSource { kValidation, kTest };

/// Per-evaluation precision/recall/F1 of `cls`, every `stride` training epochs.
std::vector<ClassTrackPoint> track_class_over_training(std::span<const model::HistoryRow> history, std::size_t cls,
                                                       TrackSource source = TrackSource::kTest, std::size_t stride = 1);
/// `epoch,precision,recall,f1`; gaps are written as NA.
std::string track_csv(std::span<const ClassTrackPoint> series);

}  // namespace fsn::eval
