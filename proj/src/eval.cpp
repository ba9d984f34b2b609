#include "fetalsleep/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include "fetalsleep/error.hpp"
#include "fetalsleep/random.hpp"

namespace fsn::eval {

using layers::Mat;

LosoSplit loso_split(std::span<const std::string> subject_ids, std::size_t fold, std::size_t val_count) {
  std::vector<std::string> ids(subject_ids.begin(), subject_ids.end());
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw DataError("duplicate subject id '" + *std::adjacent_find(ids.begin(), ids.end()) + "'");
  if (ids.size() < val_count + 2)
    throw DataError("LOSO needs at least " + std::to_string(val_count + 2) + " subjects, got " +
                    std::to_string(ids.size()));
  if (fold >= ids.size())
    throw ArgumentError("fold " + std::to_string(fold) + " outside [0, " + std::to_string(ids.size()) + ")");
  LosoSplit s;
  s.test = ids[fold];
  for (std::size_t k = 1; k <= val_count; ++k) s.val.push_back(ids[(fold + k) % ids.size()]);
  for (std::size_t k = val_count + 1; k < ids.size(); ++k) s.train.push_back(ids[(fold + k) % ids.size()]);
  std::sort(s.train.begin(), s.train.end());
  return s;
}

PairedTestResult wilcoxon_exact(std::span<const double> differences, std::string metric, double alpha) {
  std::vector<double> d;
  for (double v : differences) {
    if (!std::isfinite(v)) throw ArgumentError("non-finite paired difference");
    if (v != 0.0) d.push_back(v);
  }
  if (d.empty()) throw UndefinedError("all paired differences are zero");
  const std::size_t n = d.size();

  // Doubled mid-ranks of |d| are integers.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::fabs(d[a]) < std::fabs(d[b]); });
  std::vector<std::size_t> rank2(n);
  bool ties = false;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::fabs(d[order[j + 1]]) == std::fabs(d[order[i]])) ++j;
    if (j > i) ties = true;
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = i + j + 2;  // (i+1 + j+1)
    i = j + 1;
  }
  std::size_t plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) plus2 += rank2[i];
  }
  const std::size_t w2 = std::min(plus2, total2 - plus2);

  // dist[s] = P(doubled W+ == s) with each rank in or out with probability 1/2.
  std::vector<double> dist(total2 + 1, 0.0);
  dist[0] = 1.0;
  std::size_t reach = 0;
  for (std::size_t r : rank2) {
    for (std::size_t s = reach + 1; s-- > 0;)
      if (dist[s] != 0.0) {
        dist[s + r] += 0.5 * dist[s];
        dist[s] *= 0.5;
      }
    reach += r;
  }
  double tail = 0.0;
  for (std::size_t s = 0; s <= w2; ++s) tail += dist[s];

  PairedTestResult r;
  r.metric = std::move(metric);
  r.w = static_cast<double>(w2) / 2.0;
  r.p = std::min(1.0, 2.0 * tail);
  r.n = n;
  r.ties = ties;
  r.significant = r.p < alpha;
  if (ties)
    std::clog << "note: " << (r.metric.empty() ? std::string("wilcoxon") : r.metric)
              << ": tied |differences| were mid-ranked; exact p is conditional on the tie pattern\n";
  return r;
}

PairedTestResult wilcoxon_exact(std::span<const double> a, std::span<const double> b, std::string metric,
                                double alpha) {
  if (a.size() != b.size()) throw ArgumentError("paired samples differ in length");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return wilcoxon_exact(d, std::move(metric), alpha);
}

std::vector<bool> holm_bonferroni(std::span<const double> p, double alpha) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<bool> reject(m, false);
  for (std::size_t i = 0; i < m; ++i) {
    if (!(p[order[i]] <= alpha / static_cast<double>(m - i))) break;
    reject[order[i]] = true;
  }
  return reject;
}

std::vector<bool> bonferroni(std::span<const double> p, double alpha) {
  std::vector<bool> reject;
  for (double v : p) reject.push_back(v <= alpha / static_cast<double>(p.size()));
  return reject;
}

MeanStd mean_std(std::span<const double> v) {
  if (v.empty()) return {};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size()))};
}

FoldSummary summarise(std::span<const FoldResult> folds) {
  FoldSummary s;
  if (folds.empty()) return s;
  std::vector<double> acc, mf;
  for (const auto& f : folds) {
    acc.push_back(f.accuracy);
    mf.push_back(f.macro_f1);
  }
  s.accuracy = mean_std(acc);
  s.macro_f1 = mean_std(mf);
  for (std::size_t c = 0; c < folds.front().f1.size(); ++c) {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(f.f1.at(c));
    s.f1.push_back(mean_std(v));
  }
  return s;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string pm(const MeanStd& m) { return num(m.mean) + " ± " + num(m.std); }

}  // namespace

std::string results_csv(std::span<const ResultBlock> blocks, LabelSpace space) {
  const std::size_t classes = num_classes(space);
  std::string out = "model,pretrain,input,strategy,fold,accuracy,macro_f1";
  for (std::size_t c = 0; c < classes; ++c)
    out += ",f1_" + std::string(class_name(static_cast<int>(c), space));
  out += ",collapsed\n";
  for (const auto& b : blocks) {
    const std::string head = b.model + "," + b.pretrain + "," + b.input + "," + b.strategy + ",";
    for (const auto& f : b.folds) {
      out += head + f.fold_id + "," + num(f.accuracy) + "," + num(f.macro_f1);
      for (double v : f.f1) out += "," + num(v);
      out += f.collapsed ? ",yes\n" : ",no\n";
    }
    const auto s = summarise(b.folds);
    std::size_t collapsed = 0;
    for (const auto& f : b.folds) collapsed += f.collapsed;
    out += head + "mean ± std," + pm(s.accuracy) + "," + pm(s.macro_f1);
    for (const auto& m : s.f1) out += "," + pm(m);
    out += "," + std::to_string(collapsed) + "/" + std::to_string(b.folds.size()) + "\n";
  }
  return out;
}

std::string stats_csv(std::span<const PairedTestResult> tests, const std::vector<bool>& holm,
                      const std::vector<bool>& bonf) {
  std::string out = "metric,W,p_exact,n,ties,holm_reject,bonferroni_reject\n";
  char buf[64];
  for (std::size_t i = 0; i < tests.size(); ++i) {
    const auto& t = tests[i];
    std::snprintf(buf, sizeof(buf), "%g,%.6g,%zu", t.w, t.p, t.n);
    out += t.metric + "," + buf + "," + (t.ties ? "yes" : "no") + "," +
           (i < holm.size() && holm[i] ? "yes" : "no") + "," + (i < bonf.size() && bonf[i] ? "yes" : "no") + "\n";
  }
  return out;
}

SoftmaxRegression::SoftmaxRegression(Mat weights, Mat bias, std::vector<double> mean, std::vector<double> scale)
    : weights_(std::move(weights)), bias_(std::move(bias)), mean_(std::move(mean)), scale_(std::move(scale)) {
  if (static_cast<std::size_t>(weights_.rows()) != mean_.size() || mean_.size() != scale_.size() ||
      bias_.cols() != weights_.cols())
    throw ShapeError("softmax regression parameter shapes disagree");
}

namespace {

Mat standardise(const Mat& x, const std::vector<double>& mean, const std::vector<double>& scale) {
  if (static_cast<std::size_t>(x.cols()) != mean.size()) throw ShapeError("feature count mismatch");
  Mat z(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    z.col(j) = (x.col(j).array() - mean[static_cast<std::size_t>(j)]) / scale[static_cast<std::size_t>(j)];
  return z;
}

}  // namespace

SoftmaxRegression SoftmaxRegression::fit(const Mat& x, std::span<const int> labels, std::size_t classes,
                                         const SoftmaxFitOptions& options) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto f = static_cast<std::size_t>(x.cols());
  if (n == 0 || labels.size() != n) throw DataError("feature rows and labels disagree or are empty");
  std::vector<double> mean(f), scale(f);
  for (std::size_t j = 0; j < f; ++j) {
    const auto col = x.col(static_cast<Eigen::Index>(j));
    mean[j] = col.mean();
    const double sd = std::sqrt((col.array() - mean[j]).square().mean());
    scale[j] = sd > 0.0 ? sd : 1.0;
  }
  const Mat z = standardise(x, mean, scale);
  std::vector<long long> counts(classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw LabelError("label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  std::vector<double> cw(classes, 0.0);
  std::size_t present = 0;
  for (auto c : counts) present += c > 0;
  for (std::size_t c = 0; c < classes; ++c)
    if (counts[c] > 0) cw[c] = static_cast<double>(n) / (static_cast<double>(present) * static_cast<double>(counts[c]));

  model::ModelWeights holder;  // reuse Adam on two named tensors
  holder.tensors = {{"w", Mat::Zero(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(classes))},
                    {"b", Mat::Zero(1, static_cast<Eigen::Index>(classes))}};
  model::Adam adam({options.lr});
  for (std::size_t it = 0; it < options.iterations; ++it) {
    Mat logits = z * holder.at("w");
    logits.rowwise() += holder.at("b").row(0);
    const auto loss = model::weighted_ce_loss(logits, labels, cw);
    model::Gradients g;
    g["w"] = z.transpose() * loss.dlogits + options.l2 * holder.at("w");
    g["b"] = loss.dlogits.colwise().sum();
    adam.step(holder, g);
  }
  return SoftmaxRegression(holder.at("w"), holder.at("b"), mean, scale);
}

std::vector<int> SoftmaxRegression::predict(const Mat& x) const {
  Mat logits = standardise(x, mean_, scale_) * weights_;
  logits.rowwise() += bias_.row(0);
  std::vector<int> out;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    out.push_back(static_cast<int>(arg));
  }
  return out;
}

std::vector<FeatureImportance> permutation_importance(const FeatureClassifier& model, const Mat& x,
                                                      std::span<const int> labels, std::span<const std::string> names,
                                                      std::size_t repeats, std::uint64_t seed) {
  if (repeats == 0) throw ArgumentError("repeats must be positive");
  const std::size_t classes = model.num_classes();
  const double base = metrics(model.predict(x), labels, classes).macro_f1;
  std::vector<FeatureImportance> out;
  Mat shuffled = x;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    FeatureImportance fi;
    fi.index = static_cast<std::size_t>(j);
    fi.name = static_cast<std::size_t>(j) < names.size() ? names[static_cast<std::size_t>(j)] : "f" + std::to_string(j);
    const auto col = x.col(j);
    if (col.maxCoeff() == col.minCoeff()) {
      fi.constant = true;
      std::clog << "warning: feature '" << fi.name << "' is constant on the test set; importance set to 0\n";
      out.push_back(fi);
      continue;
    }
    std::vector<double> drops;
    for (std::size_t r = 0; r < repeats; ++r) {
      std::mt19937_64 rng(split_seed(seed, static_cast<std::uint64_t>(j) * 1000003ULL + r));
      std::vector<double> v(static_cast<std::size_t>(x.rows()));
      for (Eigen::Index i = 0; i < x.rows(); ++i) v[static_cast<std::size_t>(i)] = x(i, j);
      for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
      for (Eigen::Index i = 0; i < x.rows(); ++i) shuffled(i, j) = v[static_cast<std::size_t>(i)];
      drops.push_back(base - metrics(model.predict(shuffled), labels, classes).macro_f1);
    }
    shuffled.col(j) = x.col(j);
    const auto ms = mean_std(drops);
    fi.mean_drop = ms.mean;
    fi.std_drop = ms.std;
    out.push_back(fi);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const FeatureImportance& a, const FeatureImportance& b) { return a.mean_drop > b.mean_drop; });
  return out;
}

std::vector<FeatureImportance> average_importance(std::span<const std::vector<FeatureImportance>> folds) {
  std::map<std::size_t, std::pair<FeatureImportance, std::vector<double>>> acc;
  for (const auto& fold : folds)
    for (const auto& fi : fold) {
      auto& slot = acc[fi.index];
      slot.first.index = fi.index;
      slot.first.name = fi.name;
      slot.first.constant = slot.first.constant || fi.constant;
      slot.second.push_back(fi.mean_drop);
    }
  std::vector<FeatureImportance> out;
  for (auto& [idx, slot] : acc) {
    const auto ms = mean_std(slot.second);
    slot.first.mean_drop = ms.mean;
    slot.first.std_drop = ms.std;
    out.push_back(slot.first);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const FeatureImportance& a, const FeatureImportance& b) { return a.mean_drop > b.mean_drop; });
  return out;
}

std::vector<ClassTrackPoint> track_class_over_training(std::span<const model::HistoryRow> history, std::size_t cls,
                                                       TrackSource source, std::size_t stride) {
  if (stride == 0) throw ArgumentError("stride must be positive");
  std::vector<ClassTrackPoint> out;
  for (const auto& row : history) {
    if (row.epoch % stride != 0 && stride != 1) continue;
    ClassTrackPoint p;
    p.epoch = row.epoch;
    const ConfusionMatrix* cm = nullptr;
    if (source == TrackSource::kTest && row.test_confusion) cm = &*row.test_confusion;
    if (source == TrackSource::kValidation && row.val_confusion.num_classes > 0) cm = &row.val_confusion;
    if (cm && cls < cm->num_classes && cm->total() > 0) p.scores = class_scores(*cm, cls);
    out.push_back(p);
  }
  return out;
}

std::string track_csv(std::span<const ClassTrackPoint> series) {
  std::string out = "epoch,precision,recall,f1\n";
  char buf[96];
  for (const auto& p : series) {
    if (p.scores)
      std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g\n", p.epoch, p.scores->precision, p.scores->recall,
                    p.scores->f1);
    else
      std::snprintf(buf, sizeof(buf), "%zu,NA,NA,NA\n", p.epoch);
    out += buf;
  }
  return out;
}

}  // namespace fsn::eval
