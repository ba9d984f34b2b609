#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fetalsleep/equalise.hpp"
#include "fetalsleep/eval.hpp"
#include "fetalsleep/features.hpp"
#include "fetalsleep/model.hpp"
#include "fetalsleep/recording.hpp"

// Glue between the signal modules and the model: raw recording in, model
// input sequences out, plus the fold loop.
namespace fsn::pipeline {

struct PreprocessOptions {
  double target_rate_hz = 100.0;
  double band_low_hz = 1.0;
  double band_high_hz = 22.0;
  std::size_t num_taps = 0;  // 0: default for the native rate
  features::SegmentOptions segment{};
  /// Off leaves samples in µV (raw adult pretraining input).
  bool zscore = true;
  /// Fit z-score statistics on the first `calibration_s` seconds only.
  std::optional<double> calibration_s;
};

/// Adult recordings are scored on non-overlapping 30-s epochs.
PreprocessOptions adult_defaults();

/// Zero-phase bandpass at the native rate, then integer decimation to the
/// target rate. A non-integer rate ratio raises DataError.
Recording bandpass_resample(const Recording& raw, const PreprocessOptions& options = {});

/// Equalise (when a map is given), filter, resample, z-score, segment.
model::SubjectSequence prepare_subject(const Recording& raw, const LabelTrack& labels, LabelSpace space,
                                       const PreprocessOptions& options = {},
                                       const equalise::EqualisationMap* map = nullptr);

struct LosoOptions {
  model::TrainConfig train{};
  model::TransferStrategy strategy = model::TransferStrategy::kFullCNN;
  std::size_t val_count = 2;
  std::size_t jobs = 1;
  /// Evaluate the held-out subject every epoch (history only, never used for selection).
  bool track_test = true;
};

struct LosoFold {
  eval::LosoSplit split;
  eval::FoldResult test;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  std::vector<model::HistoryRow> history;
  model::ModelWeights weights;  // best-validation weights
};

using FoldCallback = std::function<void(std::size_t fold, const LosoFold&)>;

/// One fold per subject, each trained from `initial` with seed
/// split_seed(train.seed, fold). Results do not depend on `jobs`.
std::vector<LosoFold> run_loso(const model::ModelWeights& initial, std::span<const model::SubjectSequence> subjects,
                               const LosoOptions& options, const FoldCallback& on_fold = {});

/// Trains on every subject but the last `val_count` (sorted by id), which
/// drive early stopping.
model::TrainResult pretrain(const model::ModelWeights& initial, std::span<const model::SubjectSequence> subjects,
                            const model::TrainConfig& config, std::size_t val_count = 2);

}  // namespace fsn::pipeline
