#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "fetalsleep/error.hpp"
#include "fetalsleep/eval.hpp"

using namespace fsn;
using eval::ConfusionMatrix;

namespace {

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("S" + std::to_string(100 + i));
  return out;
}

// Mid-ranks of |d| by direct counting.
std::vector<double> naive_ranks(const std::vector<double>& d) {
  std::vector<double> r(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    double below = 0, equal = 0;
    for (double x : d) {
      if (std::abs(x) < std::abs(d[i])) ++below;
      if (std::abs(x) == std::abs(d[i])) ++equal;
    }
    r[i] = below + (equal + 1) / 2.0;
  }
  return r;
}

// Two-sided p by enumerating all 2^n sign patterns of the observed ranks:
// P(min(W+, W-) <= observed min).
double brute_force_p(std::vector<double> d) {
  d.erase(std::remove(d.begin(), d.end(), 0.0), d.end());
  const auto r = naive_ranks(d);
  const std::size_t n = d.size();
  double total = 0, wplus = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += r[i];
    if (d[i] > 0) wplus += r[i];
  }
  const double w = std::min(wplus, total - wplus);
  std::size_t hits = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) s += r[i];
    if (std::min(s, total - s) <= w + 1e-9) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(std::size_t{1} << n);
}

}  // namespace

TEST(Loso, CoversEverySubjectOnceAndIsDisjoint) {
  const auto s = ids(24);
  std::multiset<std::string> tested;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto split = eval::loso_split(s, k);
    tested.insert(split.test);
    EXPECT_EQ(split.val.size(), 2u);
    EXPECT_EQ(split.train.size(), 21u);
    std::set<std::string> all(split.train.begin(), split.train.end());
    all.insert(split.val.begin(), split.val.end());
    all.insert(split.test);
    EXPECT_EQ(all.size(), 24u);
  }
  for (const auto& id : s) EXPECT_EQ(tested.count(id), 1u);
}

TEST(Loso, ValidationIsNextTwoCyclically) {
  const std::vector<std::string> s{"c", "a", "d", "b"};
  const auto last = eval::loso_split(s, 3);
  EXPECT_EQ(last.test, "d");
  EXPECT_EQ(last.val, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(last.train, (std::vector<std::string>{"c"}));
  const auto again = eval::loso_split(s, 3);
  EXPECT_EQ(again.val, last.val);
}

TEST(Loso, Errors) {
  const std::vector<std::string> dup{"a", "b", "a", "c"};
  EXPECT_THROW(eval::loso_split(dup, 0), DataError);
  EXPECT_THROW(eval::loso_split(ids(6), 6), ArgumentError);
  EXPECT_THROW(eval::loso_split(ids(3), 0), DataError);
}

TEST(Metrics, AlwaysRemOnHalfRem) {
  // labels: 50% REM, 30% NREM, 20% Intermediate
  std::vector<int> y;
  for (int i = 0; i < 50; ++i) y.push_back(0);
  for (int i = 0; i < 30; ++i) y.push_back(1);
  for (int i = 0; i < 20; ++i) y.push_back(2);
  const std::vector<int> pred(y.size(), 0);
  const auto r = eval::metrics(pred, y);
  EXPECT_NEAR(r.f1[0], 2.0 / 3.0, 1e-12);
  EXPECT_EQ(r.f1[1], 0.0);
  EXPECT_EQ(r.f1[2], 0.0);
  EXPECT_NEAR(r.macro_f1, 2.0 / 9.0, 1e-12);
  EXPECT_TRUE(r.collapsed);
  // confusion-matrix oracle for the REM column
  EXPECT_EQ(r.confusion.at(0, 0), 50);
  EXPECT_EQ(r.confusion.col_sum(0), 100);
}

TEST(Metrics, RandomFoldInvariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> y(200), p(200);
    for (auto& v : y) v = static_cast<int>(rng() % 3);
    for (auto& v : p) v = static_cast<int>(rng() % 3);
    const auto r = eval::metrics(p, y);
    EXPECT_NEAR(r.accuracy, static_cast<double>(r.confusion.trace()) / r.confusion.total(), 1e-15);
    EXPECT_NEAR(r.macro_f1, (r.f1[0] + r.f1[1] + r.f1[2]) / 3.0, 1e-12);
    for (int c = 0; c < 3; ++c)
      EXPECT_EQ(r.confusion.row_sum(c), std::count(y.begin(), y.end(), c));
  }
}

TEST(Metrics, PerfectAndErrors) {
  const std::vector<int> y{0, 1, 2, 2, 1, 0};
  const auto r = eval::metrics(y, y);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  EXPECT_FALSE(r.collapsed);
  EXPECT_THROW(eval::metrics(std::vector<int>{}, std::vector<int>{}), DataError);
  EXPECT_THROW(eval::metrics(std::vector<int>{0}, std::vector<int>{0, 1}), DataError);
  EXPECT_THROW(eval::metrics(std::vector<int>{3}, std::vector<int>{0}), LabelError);
}

TEST(Wilcoxon, MatchesBruteForceUpToTwelve) {
  std::mt19937_64 rng(17);
  for (std::size_t n = 1; n <= 12; ++n) {
    for (int trial = 0; trial < 6; ++trial) {
      std::vector<double> d(n);
      // integer draws produce ties and zeros now and then
      for (auto& v : d) v = static_cast<double>(static_cast<int>(rng() % 13) - 6);
      if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) d[0] = 1.0;
      const auto r = eval::wilcoxon_exact(d);
      EXPECT_NEAR(r.p, brute_force_p(d), 1e-12) << "n=" << n << " trial=" << trial;
    }
  }
}

TEST(Wilcoxon, ClosedForms) {
  std::vector<double> d24(24);
  for (std::size_t i = 0; i < 24; ++i) d24[i] = 0.01 * (i + 1);
  const auto all = eval::wilcoxon_exact(d24);
  EXPECT_EQ(all.w, 0.0);
  EXPECT_EQ(all.n, 24u);
  EXPECT_NEAR(all.p, 2.0 * std::pow(2.0, -24), 1e-20);
  EXPECT_NEAR(all.p, 1.19e-7, 0.01e-7);
  EXPECT_TRUE(all.significant);

  // one opposing difference of rank 1: W+ in {0, 1} -> 2 patterns per tail
  auto one = d24;
  one[0] = -one[0];
  const auto r1 = eval::wilcoxon_exact(one);
  EXPECT_EQ(r1.w, 1.0);
  EXPECT_NEAR(r1.p, 4.0 * std::pow(2.0, -24), 1e-20);
  EXPECT_LT(r1.p, 0.05);

  const std::vector<double> d5{1, 2, 3, 4, 5};
  const auto r5 = eval::wilcoxon_exact(d5);
  EXPECT_EQ(r5.w, 0.0);
  EXPECT_DOUBLE_EQ(r5.p, 0.0625);
  EXPECT_FALSE(r5.significant);
}

TEST(Wilcoxon, AntisymmetricAndPairedForm) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.2, 1.0);
  std::vector<double> a(15), b(15), d(15), neg(15);
  for (std::size_t i = 0; i < 15; ++i) {
    a[i] = nd(rng);
    b[i] = nd(rng);
    d[i] = a[i] - b[i];
    neg[i] = -d[i];
  }
  const auto r = eval::wilcoxon_exact(d);
  const auto rn = eval::wilcoxon_exact(neg);
  EXPECT_EQ(r.w, rn.w);
  EXPECT_DOUBLE_EQ(r.p, rn.p);
  EXPECT_DOUBLE_EQ(eval::wilcoxon_exact(a, b).p, r.p);
}

TEST(Wilcoxon, ZerosDroppedTiesFlagged) {
  const std::vector<double> d{0.0, 1.0, 1.0, 2.0, 0.0, 3.0};
  const auto r = eval::wilcoxon_exact(d);
  EXPECT_EQ(r.n, 4u);
  EXPECT_TRUE(r.ties);
  EXPECT_THROW(eval::wilcoxon_exact(std::vector<double>{0.0, 0.0}), UndefinedError);
}

TEST(Holm, HandExecutedStepDown) {
  const std::vector<double> p{0.01, 0.2, 0.03};
  EXPECT_EQ(eval::holm_bonferroni(p), (std::vector<bool>{true, false, false}));
  EXPECT_EQ(eval::holm_bonferroni(std::vector<double>(5, 0.0)), std::vector<bool>(5, true));
  EXPECT_EQ(eval::holm_bonferroni(std::vector<double>(5, 1.0)), std::vector<bool>(5, false));
  // 0.012 <= 0.05/4, 0.013 <= 0.05/3, 0.02 <= 0.05/2, 0.04 <= 0.05
  const std::vector<double> q{0.04, 0.012, 0.02, 0.013};
  EXPECT_EQ(eval::holm_bonferroni(q), std::vector<bool>(4, true));
  EXPECT_EQ(eval::bonferroni(q), (std::vector<bool>{false, true, false, false}));
}

TEST(Holm, BonferroniRejectionsAreSubset) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(1 + rng() % 8);
    for (auto& v : p) v = std::pow(uniform01(rng), 3.0);
    const auto h = eval::holm_bonferroni(p);
    const auto b = eval::bonferroni(p);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (b[i]) EXPECT_TRUE(h[i]);
  }
}

TEST(Summary, PopulationStd) {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto ms = eval::mean_std(v);
  EXPECT_DOUBLE_EQ(ms.mean, 2.5);
  EXPECT_NEAR(ms.std, std::sqrt(1.25), 1e-15);
}

TEST(Summary, ResultsCsvHasFoldRowsAndSummary) {
  eval::ResultBlock block{"FetalSleepNet", "adult", "raw", "full", {}};
  std::mt19937_64 rng(2);
  for (int f = 0; f < 6; ++f) {
    std::vector<int> y(60), p(60);
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = static_cast<int>(i % 3);
      p[i] = rng() % 4 == 0 ? static_cast<int>(rng() % 3) : y[i];
    }
    block.folds.push_back(eval::metrics(p, y, 3, "S" + std::to_string(f)));
  }
  const std::vector<eval::ResultBlock> blocks{block};
  const auto csv = eval::results_csv(blocks);
  const auto lines = std::count(csv.begin(), csv.end(), '\n');
  EXPECT_EQ(lines, 1 + 6 + 1);
  EXPECT_EQ(csv.rfind("model,pretrain,input,strategy,fold,accuracy,macro_f1", 0), 0u);
  EXPECT_NE(csv.find("mean ± std"), std::string::npos);
}

TEST(Summary, StatsCsv) {
  std::vector<double> d(24, 1.0);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += 0.1 * i;
  const std::vector<eval::PairedTestResult> tests{eval::wilcoxon_exact(d, "accuracy")};
  const std::vector<double> p{tests[0].p};
  const auto csv = eval::stats_csv(tests, eval::holm_bonferroni(p), eval::bonferroni(p));
  EXPECT_EQ(csv.rfind("metric,W,p_exact,n,ties,holm_reject,bonferroni_reject\n", 0), 0u);
  EXPECT_NE(csv.find("accuracy,0"), std::string::npos);
}

namespace {

// Predicts argmax of one column; ignores every other feature.
class OneFeature : public eval::FeatureClassifier {
 public:
  explicit OneFeature(Eigen::Index col) : col_(col) {}
  std::vector<int> predict(const layers::Mat& x) const override {
    std::vector<int> out;
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.push_back(x(i, col_) < -0.5 ? 0 : x(i, col_) < 0.5 ? 1 : 2);
    return out;
  }
  std::size_t num_classes() const override { return 3; }

 private:
  Eigen::Index col_;
};

layers::Mat feature_table(std::size_t n, std::vector<int>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  layers::Mat x(static_cast<Eigen::Index>(n), 4);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 3);
    x(i, 0) = standard_normal(rng);
    x(i, 1) = (y[i] - 1.0) + 0.1 * standard_normal(rng);
    x(i, 2) = standard_normal(rng);
    x(i, 3) = 7.0;
  }
  return x;
}

}  // namespace

TEST(Importance, SingleFeatureModelRanksItFirst) {
  std::vector<int> y;
  const auto x = feature_table(300, y, 1);
  const std::vector<std::string> names{"a", "b", "c", "flat"};
  const OneFeature model(1);
  const auto ranked = eval::permutation_importance(model, x, y, names, 5, 9);
  ASSERT_EQ(ranked.size(), 4u);
  EXPECT_EQ(ranked[0].name, "b");
  EXPECT_GT(ranked[0].mean_drop, 0.4);
  for (std::size_t i = 1; i < ranked.size(); ++i) EXPECT_EQ(ranked[i].mean_drop, 0.0);
  const auto flat = std::find_if(ranked.begin(), ranked.end(), [](const auto& f) { return f.name == "flat"; });
  EXPECT_TRUE(flat->constant);
}

TEST(Importance, IgnoredFeatureAndDeterminism) {
  std::vector<int> y;
  const auto x = feature_table(300, y, 2);
  const std::vector<std::string> names{"a", "b", "c", "flat"};
  auto model = eval::SoftmaxRegression::fit(x, y, 3);
  // zero weights into column 0 so the model provably ignores it
  auto w = model.weights();
  w.row(0).setZero();
  const eval::SoftmaxRegression pruned(w, layers::Mat::Zero(1, 3), std::vector<double>(4, 0.0),
                                       std::vector<double>(4, 1.0));
  const auto r1 = eval::permutation_importance(pruned, x, y, names, 5, 4);
  const auto r2 = eval::permutation_importance(pruned, x, y, names, 5, 4);
  for (const auto& f : r1)
    if (f.name == "a") EXPECT_NEAR(f.mean_drop, 0.0, 1e-12);
  ASSERT_EQ(r1.size(), r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) {
    EXPECT_EQ(r1[i].name, r2[i].name);
    EXPECT_EQ(r1[i].mean_drop, r2[i].mean_drop);
  }
}

TEST(Importance, SoftmaxRegressionLearnsSeparableTable) {
  std::vector<int> y;
  const auto x = feature_table(300, y, 3);
  const auto model = eval::SoftmaxRegression::fit(x, y, 3);
  const auto r = eval::metrics(model.predict(x), y);
  EXPECT_GT(r.macro_f1, 0.95);
}

TEST(Importance, AverageAcrossFolds) {
  std::vector<eval::FeatureImportance> f1{{0, "a", 0.2, 0, false}, {1, "b", 0.1, 0, false}};
  std::vector<eval::FeatureImportance> f2{{1, "b", 0.5, 0, false}, {0, "a", 0.0, 0, false}};
  const std::vector<std::vector<eval::FeatureImportance>> folds{f1, f2};
  const auto avg = eval::average_importance(folds);
  EXPECT_EQ(avg[0].name, "b");
  EXPECT_NEAR(avg[0].mean_drop, 0.3, 1e-12);
  EXPECT_NEAR(avg[1].mean_drop, 0.1, 1e-12);
}

namespace {

model::HistoryRow history_row(std::size_t epoch, const ConfusionMatrix& cm, bool with_test) {
  model::HistoryRow h;
  h.epoch = epoch;
  h.val_confusion = cm;
  const auto fr = eval::fold_result(cm);
  h.val_acc = fr.accuracy;
  h.val_macro_f1 = fr.macro_f1;
  if (with_test) {
    h.test_confusion = cm;
    h.test_macro_f1 = fr.macro_f1;
  }
  return h;
}

}  // namespace

TEST(Tracking, PerfectHistoryIsFlat) {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 10;
  cm.at(1, 1) = 7;
  cm.at(2, 2) = 3;
  std::vector<model::HistoryRow> h;
  for (std::size_t e = 1; e <= 40; ++e) h.push_back(history_row(e, cm, true));
  const auto series = eval::track_class_over_training(h, 2, eval::TrackSource::kTest, 10);
  ASSERT_EQ(series.size(), 4u);
  for (const auto& p : series) {
    ASSERT_TRUE(p.scores);
    EXPECT_EQ(p.scores->f1, 1.0);
    EXPECT_EQ(p.scores->precision, 1.0);
    EXPECT_EQ(p.scores->recall, 1.0);
  }
  EXPECT_EQ(eval::track_class_over_training(h, 0, eval::TrackSource::kValidation).size(), 40u);
}

TEST(Tracking, SelfConsistentWithStoredScalars) {
  std::mt19937_64 rng(12);
  std::vector<model::HistoryRow> h;
  for (std::size_t e = 1; e <= 25; ++e) {
    ConfusionMatrix cm(3);
    for (auto& c : cm.counts) c = static_cast<long long>(rng() % 20);
    h.push_back(history_row(e, cm, e % 2 == 0));
  }
  double recomputed_macro = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto s = eval::track_class_over_training(h, c, eval::TrackSource::kValidation);
    recomputed_macro += s.back().scores->f1 / 3.0;
  }
  EXPECT_NEAR(recomputed_macro, h.back().val_macro_f1, 1e-12);
  // odd epochs lack a test matrix: gaps, not failures
  const auto test = eval::track_class_over_training(h, 1, eval::TrackSource::kTest);
  ASSERT_EQ(test.size(), 25u);
  EXPECT_FALSE(test[0].scores);
  EXPECT_TRUE(test[1].scores);
  const auto csv = eval::track_csv(test);
  EXPECT_EQ(csv.rfind("epoch,precision,recall,f1\n1,NA,NA,NA\n", 0), 0u);
}
