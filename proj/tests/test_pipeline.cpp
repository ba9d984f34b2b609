#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fetalsleep/error.hpp"
#include "fetalsleep/pipeline.hpp"
#include "fetalsleep/synth.hpp"

using namespace fsn;

namespace {

std::vector<synth::Generated> fetal_subjects(std::size_t count, double duration_s, std::uint64_t seed) {
  auto base = synth::default_config(synth::Domain::kFetal);
  base.duration_s = duration_s;
  base.cycle_min_s = 600.0;
  base.cycle_max_s = 1200.0;
  base.seed = seed;
  std::vector<synth::Generated> out;
  for (const auto& c : synth::subject_configs(base, count, "F")) out.push_back(synth::generate(c));
  return out;
}

const std::vector<model::SubjectSequence>& small_cohort() {
  static const auto seqs = [] {
    std::vector<model::SubjectSequence> s;
    for (const auto& g : fetal_subjects(6, 2400.0, 5))
      s.push_back(pipeline::prepare_subject(g.recording, g.labels, LabelSpace::kFetal));
    return s;
  }();
  return seqs;
}

model::TrainConfig quick_train() {
  model::TrainConfig t;
  t.max_epochs = 3;
  t.batch_size = 60;
  t.early_stop_patience = 3;
  t.seed = 9;
  return t;
}

}  // namespace

TEST(Preprocess, BandpassResampleShapes) {
  const auto g = fetal_subjects(1, 1200.0, 1).front();
  const auto r = pipeline::bandpass_resample(g.recording);
  EXPECT_EQ(r.sample_rate_hz, 100.0);
  EXPECT_EQ(r.num_samples(), g.recording.num_samples() / 4);
  EXPECT_EQ(r.channels.size(), 2u);
  pipeline::PreprocessOptions odd;
  odd.target_rate_hz = 150.0;
  EXPECT_THROW(pipeline::bandpass_resample(g.recording, odd), DataError);
}

TEST(Preprocess, PrepareSubjectEpochsAndScale) {
  const auto g = fetal_subjects(1, 1200.0, 2).front();
  const auto seq = pipeline::prepare_subject(g.recording, g.labels, LabelSpace::kFetal);
  EXPECT_EQ(seq.subject_id, g.recording.subject_id);
  EXPECT_EQ(seq.epoch_samples, 3000u);
  EXPECT_EQ(seq.num_epochs(), features::window_count(1200.0));
  EXPECT_EQ(static_cast<std::size_t>(seq.samples.rows()), seq.num_epochs() * 3000);
  for (int l : seq.labels) EXPECT_TRUE(l >= 0 && l < 3);

  // z-scored: unit scale; raw: µV scale
  const double z_sd = std::sqrt(seq.samples.col(0).array().square().mean());
  EXPECT_GT(z_sd, 0.8);
  EXPECT_LT(z_sd, 1.2);
  pipeline::PreprocessOptions raw;
  raw.zscore = false;
  const auto rs = pipeline::prepare_subject(g.recording, g.labels, LabelSpace::kFetal, raw);
  EXPECT_GT(std::sqrt(rs.samples.col(0).array().square().mean()), 5.0);
}

TEST(Preprocess, AdultDefaultsAreNonOverlapping) {
  auto cfg = synth::default_config(synth::Domain::kAdult);
  cfg.duration_s = 1800.0;
  cfg.seed = 3;
  const auto g = synth::generate(cfg);
  const auto seq = pipeline::prepare_subject(g.recording, g.labels, LabelSpace::kAdult, pipeline::adult_defaults());
  EXPECT_EQ(seq.num_epochs(), 60u);
  for (int l : seq.labels) EXPECT_TRUE(l >= 0 && l < 5);
}

TEST(Preprocess, IdentityMapMatchesPlainPath) {
  const auto g = fetal_subjects(1, 1200.0, 4).front();
  equalise::EqualisationMap id;
  for (std::size_t k = 0; k <= 256; ++k) id.freqs_hz.push_back(k * 400.0 / 512.0);
  id.gains.assign(2, std::vector<double>(257, 1.0));
  id.mapping = {{0, 0}, {1, 1}};
  const auto plain = pipeline::prepare_subject(g.recording, g.labels, LabelSpace::kFetal);
  const auto mapped = pipeline::prepare_subject(g.recording, g.labels, LabelSpace::kFetal, {}, &id);
  ASSERT_EQ(plain.samples.rows(), mapped.samples.rows());
  EXPECT_LT((plain.samples - mapped.samples).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Loso, OneFoldPerSubjectIndependentOfJobs) {
  const auto& subjects = small_cohort();
  const auto w0 = model::init_weights(model::tiny_config(3), 1);
  pipeline::LosoOptions o;
  o.train = quick_train();
  std::set<std::size_t> seen;
  const auto a = pipeline::run_loso(w0, subjects, o, [&](std::size_t k, const pipeline::LosoFold&) { seen.insert(k); });
  ASSERT_EQ(a.size(), 6u);
  EXPECT_EQ(seen.size(), 6u);
  std::set<std::string> tests;
  for (const auto& f : a) {
    tests.insert(f.split.test);
    EXPECT_EQ(f.test.fold_id, f.split.test);
    EXPECT_EQ(f.split.val.size(), 2u);
    EXPECT_EQ(f.split.train.size(), 3u);
    EXPECT_EQ(f.history.size(), f.epochs_run);
    EXPECT_TRUE(std::isfinite(f.history.back().test_macro_f1));
  }
  EXPECT_EQ(tests.size(), 6u);

  o.jobs = 3;
  const auto b = pipeline::run_loso(w0, subjects, o);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].test.macro_f1, b[k].test.macro_f1);
    EXPECT_EQ(a[k].best_epoch, b[k].best_epoch);
    EXPECT_EQ(a[k].history.back().train_loss, b[k].history.back().train_loss);
  }
}

TEST(Loso, FrozenStrategyKeepsBackbone) {
  const auto& subjects = small_cohort();
  const auto pre = model::init_weights(model::tiny_config(5), 2);
  const auto w0 = model::transfer_remap(pre, 3, 7);
  pipeline::LosoOptions o;
  o.train = quick_train();
  o.strategy = model::TransferStrategy::kFrozenCNN;
  o.track_test = false;
  const auto folds = pipeline::run_loso(w0, subjects, o);
  for (const auto& f : folds) EXPECT_TRUE(std::isnan(f.history.back().test_macro_f1));
}

TEST(Loso, ErrorsPropagate) {
  auto subjects = small_cohort();
  const auto w0 = model::init_weights(model::tiny_config(3), 1);
  pipeline::LosoOptions o;
  o.train = quick_train();
  o.val_count = 6;
  EXPECT_THROW(pipeline::run_loso(w0, subjects, o), Error);
  subjects[1].subject_id = subjects[0].subject_id;
  o.val_count = 2;
  EXPECT_THROW(pipeline::run_loso(w0, subjects, o), DataError);
  EXPECT_THROW(pipeline::pretrain(w0, std::span(subjects).first(2), quick_train()), DataError);
}

TEST(Pretrain, UsesLastSubjectsForValidation) {
  const auto& subjects = small_cohort();
  const auto w0 = model::init_weights(model::tiny_config(3), 4);
  const auto r = pipeline::pretrain(w0, subjects, quick_train());
  EXPECT_EQ(r.epochs_run, 3u);
  EXPECT_GE(r.best_epoch, 1u);
}
