#include "fetalsleep/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "fetalsleep/dsp.hpp"
#include "fetalsleep/error.hpp"
#include "fetalsleep/random.hpp"

namespace fsn::pipeline {

namespace {

int decimation_factor(double from_hz, double to_hz) {
  const double r = from_hz / to_hz;
  const auto f = static_cast<int>(std::llround(r));
  if (f < 1 || std::abs(r - f) > 1e-9)
    throw DataError("cannot resample " + std::to_string(from_hz) + " Hz to " + std::to_string(to_hz) +
                    " Hz by an integer factor");
  return f;
}

std::vector<model::SubjectSequence> pick(std::span<const model::SubjectSequence> all,
                                         const std::vector<std::string>& ids) {
  std::vector<model::SubjectSequence> out;
  for (const auto& id : ids)
    for (const auto& s : all)
      if (s.subject_id == id) out.push_back(s);
  return out;
}

}  // namespace

PreprocessOptions adult_defaults() {
  PreprocessOptions o;
  o.segment.step_s = 30.0;
  return o;
}

Recording bandpass_resample(const Recording& raw, const PreprocessOptions& options) {
  raw.validate();
  const int factor = decimation_factor(raw.sample_rate_hz, options.target_rate_hz);
  const auto taps = options.num_taps ? options.num_taps : dsp::default_num_taps(raw.sample_rate_hz);
  const auto filter = dsp::design_fir_bandpass(options.band_low_hz, options.band_high_hz, raw.sample_rate_hz, taps);
  Recording out;
  out.sample_rate_hz = raw.sample_rate_hz / factor;
  out.subject_id = raw.subject_id;
  for (const auto& ch : raw.channels)
    out.channels.push_back({ch.label, dsp::decimate(dsp::filter_zero_phase(ch.samples, filter), factor)});
  return out;
}

model::SubjectSequence prepare_subject(const Recording& raw, const LabelTrack& labels, LabelSpace space,
                                       const PreprocessOptions& options, const equalise::EqualisationMap* map) {
  Recording filtered;
  if (map) {
    equalise::PipelineOptions eq;
    eq.band_low_hz = options.band_low_hz;
    eq.band_high_hz = options.band_high_hz;
    eq.num_taps = options.num_taps;
    filtered = equalise::equalisation_pipeline(raw, *map, eq);
    filtered.channels.resize(raw.channels.size());
    const int factor = decimation_factor(raw.sample_rate_hz, options.target_rate_hz);
    for (auto& ch : filtered.channels) ch.samples = dsp::decimate(ch.samples, factor);
    filtered.sample_rate_hz = raw.sample_rate_hz / factor;
  } else {
    filtered = bandpass_resample(raw, options);
  }
  if (options.zscore) {
    const auto profile = options.calibration_s ? features::zscore_fit_calibration(filtered, *options.calibration_s)
                                               : features::zscore_fit(filtered, &labels);
    filtered = features::zscore_apply(filtered, profile);
  }
  const auto epochs = features::segment_epochs(filtered, labels, options.segment);
  auto seq = model::make_subject_sequence(epochs, space);
  seq.subject_id = raw.subject_id;
  return seq;
}

std::vector<LosoFold> run_loso(const model::ModelWeights& initial, std::span<const model::SubjectSequence> subjects,
                               const LosoOptions& options, const FoldCallback& on_fold) {
  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.subject_id);
  // validates ids once up front
  (void)eval::loso_split(ids, 0, options.val_count);

  const std::size_t folds = ids.size();
  std::vector<LosoFold> out(folds);
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;

  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= folds) return;
      try {
        LosoFold fold;
        fold.split = eval::loso_split(ids, k, options.val_count);
        model::TrainData data;
        data.train = pick(subjects, fold.split.train);
        data.val = pick(subjects, fold.split.val);
        if (options.track_test) data.test = pick(subjects, {fold.split.test});
        auto cfg = options.train;
        cfg.seed = split_seed(options.train.seed, k);
        auto result = model::train(initial, data, cfg, options.strategy);
        const auto test = pick(subjects, {fold.split.test});
        fold.test = model::evaluate(result.best, test);
        fold.test.fold_id = fold.split.test;
        fold.best_epoch = result.best_epoch;
        fold.epochs_run = result.epochs_run;
        fold.early_stopped = result.early_stopped;
        fold.history = std::move(result.history);
        fold.weights = std::move(result.best);
        std::lock_guard lock(mu);
        out[k] = std::move(fold);
        if (on_fold) on_fold(k, out[k]);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next.store(folds);
      }
    }
  };

  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, folds);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

model::TrainResult pretrain(const model::ModelWeights& initial, std::span<const model::SubjectSequence> subjects,
                            const model::TrainConfig& config, std::size_t val_count) {
  if (subjects.size() <= val_count) throw DataError("pretraining needs more subjects than validation subjects");
  std::vector<model::SubjectSequence> sorted(subjects.begin(), subjects.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.subject_id < b.subject_id; });
  model::TrainData data;
  data.train.assign(sorted.begin(), sorted.end() - static_cast<std::ptrdiff_t>(val_count));
  data.val.assign(sorted.end() - static_cast<std::ptrdiff_t>(val_count), sorted.end());
  return model::train(initial, data, config, model::TransferStrategy::kFullCNN);
}

}  // namespace fsn::pipeline
