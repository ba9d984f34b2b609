#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fetalsleep/dsp.hpp"
#include "fetalsleep/recording.hpp"

namespace fsn::features {

struct LabeledEpoch {
  std::vector<std::vector<double>> channels;  // samples per channel
  Stage label = Stage::kExcluded;
  std::string subject_id;
  double start_s = 0.0;
};

struct SegmentOptions {
  double window_s = 30.0;
  double step_s = 15.0;
};

/// Stage with the largest total overlap with [start_s, end_s). Ties go to the
/// stage whose first overlapping interval starts earliest. Returns nullopt
/// when nothing overlaps.
std::optional<Stage> majority_label(const LabelTrack& track, double start_s, double end_s);

/// Number of window offsets 0, step, 2·step, ... that fit in `duration_s`.
std::size_t window_count(double duration_s, const SegmentOptions& options = {});

/// Windows whose majority label is missing or kExcluded are dropped.
std::vector<LabeledEpoch> segment_epochs(const Recording& recording, const LabelTrack& labels,
                                         const SegmentOptions& options = {});

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
};

struct NormalizationProfile {
  enum class Source { kFullRecording, kCalibrationWindow };

  std::string subject_id;
  std::vector<ChannelStats> channels;
  Source source = Source::kFullRecording;
  /// When set, zscore_apply tracks slow drift with an exponential moving
  /// average of this time constant (seconds), starting from the profile.
  std::optional<double> ema_time_constant_s;
};

inline constexpr double kDefaultCalibrationS = 40.0 * 60.0;

/// Per-channel mean and population std. With `labels`, only samples inside
/// non-excluded intervals are used.
NormalizationProfile zscore_fit(const Recording& recording, const LabelTrack* labels = nullptr);
/// Profile from the first `calibration_s` seconds only.
NormalizationProfile zscore_fit_calibration(const Recording& recording,
                                            double calibration_s = kDefaultCalibrationS);
Recording zscore_apply(const Recording& recording, const NormalizationProfile& profile);

struct Hjorth {
  double activity = 0.0;
  double mobility = 0.0;
  double complexity = 0.0;
};

Hjorth hjorth(std::span<const double> x);

/// Sign changes of the first difference (strict: zero differences never count).
std::size_t derivative_sign_changes(std::span<const double> x);
double petrosian_fd(std::span<const double> x);

/// Log-spaced box sizes from 16 to n/4 samples (at least 8 distinct sizes
/// when n allows).
std::vector<std::size_t> default_dfa_boxes(std::size_t n);
/// DFA-1 scaling exponent.
double dfa(std::span<const double> x, std::span<const std::size_t> box_sizes);
inline double dfa(std::span<const double> x) {
  const auto boxes = default_dfa_boxes(x.size());
  return dfa(x, boxes);
}

struct Band {
  std::string_view name;
  double low_hz;
  double high_hz;  // exclusive
};

/// Delta, Theta, Alpha, Beta as half-open bands tiling [1, 22) Hz.
std::span<const Band> standard_bands();
inline constexpr std::pair<double, double> kThetaBand{4.0, 8.0};

struct BandPowers {
  std::vector<double> absolute;       // µV²
  std::vector<double> relative;       // shares summing to 1
  std::vector<double> absolute_db;
  std::vector<double> relative_db;
};

/// Integral of the piecewise-linear PSD over [a, b).
double integrate_psd(const dsp::PsdEstimate& psd, double a, double b);
BandPowers band_powers(const dsp::PsdEstimate& psd, std::span<const Band> bands = standard_bands());

inline constexpr std::size_t kPerChannelFeatures = 17;
inline constexpr std::size_t kNumFeatures = 2 * kPerChannelFeatures + 1;

struct FeatureVector {
  std::array<double, kNumFeatures> values{};

  /// Column names in output order: L_* then R_* then theta_coherence.
  static const std::array<std::string, kNumFeatures>& names();
};

/// 35 handcrafted features of one dual-channel epoch.
FeatureVector extract_features(std::span<const double> left, std::span<const double> right,
                               double sample_rate_hz);

std::string csv_header();
std::string csv_row(const std::string& subject, double start_s, std::string_view label,
                    const FeatureVector& features);

}  // namespace fsn::features
