#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fetalsleep/random.hpp"
#include "fetalsleep/recording.hpp"

namespace fsn::synth {

struct Peak {
  double centre_hz = 10.0;
  double width_hz = 1.0;  // Gaussian sigma
  double gain = 1.0;      // relative to the power law at the centre
};

/// Power law 1/(f + knee)^exponent plus Gaussian bumps, tapered outside
/// [low_hz, high_hz] with half-cosine skirts `taper_hz` wide.
struct SpectralShape {
  double exponent = 1.0;
  double knee_hz = 1.0;
  std::vector<Peak> peaks;
  double low_hz = 0.5;
  double high_hz = 30.0;
  double taper_hz = 0.5;

  double operator()(double f_hz) const;
};

/// D(f) = ((f + 1) / (ref + 1))^exponent multiplies every adult profile.
struct DomainTilt {
  double exponent = 0.0;
  double ref_hz = 10.0;

  double operator()(double f_hz) const;
};

struct StateProfile {
  Stage stage = Stage::kRem;
  double amp_lo_uv = 10.0;
  double amp_hi_uv = 50.0;
  /// Shapes (each normalised to unit power on [0, 50] Hz) and mixture weights.
  std::vector<std::pair<SpectralShape, double>> mixture;
  DomainTilt tilt;
  double min_duration_s = 180.0;
  double mean_duration_s = 600.0;

  /// Relative PSD, arbitrary scale.
  double psd(double f_hz) const;
  double amp_centre_uv() const { return 0.5 * (amp_lo_uv + amp_hi_uv); }
};

enum class Domain { kFetal, kAdult };

struct GeneratorConfig {
  Domain domain = Domain::kFetal;
  /// Fetal: REM, NREM, Intermediate. Adult: W, REM, N1, N2, N3.
  std::vector<double> priors{0.515, 0.405, 0.080};
  double cycle_min_s = 600.0;
  double cycle_max_s = 2400.0;
  double intermediate_min_s = 30.0;
  double intermediate_max_s = 180.0;
  double sample_rate_hz = 400.0;
  double duration_s = 4.0 * 3600.0;
  std::uint64_t seed = 0;
  double coupling = 0.8;
  /// Per-bout amplitude factor drawn from U(1 - j, 1 + j).
  double amplitude_jitter = 0.05;
  double crossfade_s = 1.0;
  DomainTilt adult_tilt{5.0, 10.0};
  std::string subject_id = "synthetic";

  void validate() const;
};

GeneratorConfig default_config(Domain domain);

std::vector<StateProfile> fetal_profiles();
std::vector<StateProfile> adult_profiles(const DomainTilt& tilt);
std::vector<StateProfile> profiles_for(const GeneratorConfig& config);

/// Fetal: NREM/REM cycles with Intermediate bouts at transitions. Adult:
/// semi-Markov walk over 5 stages. Bouts tile [0, duration_s).
LabelTrack gen_state_sequence(const GeneratorConfig& config);

/// Shaping FIR (odd length, unit energy) whose |H|^2 follows `profile`.
std::vector<double> shaping_filter(const StateProfile& profile, double sample_rate_hz);
/// Default filter length: about 5 s of taps, odd.
std::size_t shaping_taps(double sample_rate_hz);

/// RMS giving a median 30-s epoch peak-to-peak at the profile range centre.
double calibrated_rms(const StateProfile& profile, double sample_rate_hz);

struct BoutRealisation {
  double start_s = 0.0;
  double end_s = 0.0;
  Stage stage = Stage::kExcluded;
  double rms = 0.0;  // includes jitter
};

struct GenerationReport {
  std::vector<BoutRealisation> bouts;
};

/// Two channels; channel 1 = coupling * ch0 + sqrt(1 - coupling^2) * independent.
Recording gen_signal(const LabelTrack& track, std::span<const StateProfile> profiles, const GeneratorConfig& config,
                     GenerationReport* report = nullptr);

struct Generated {
  Recording recording;
  LabelTrack labels;
  GenerationReport report;
};

Generated generate(const GeneratorConfig& config);
/// generate() with an adult config check.
Generated gen_adult_recording(const GeneratorConfig& config);

/// Expected one-sided PSD (µV²/Hz) of either channel at `freqs_hz`, given the
/// realised bouts: time-weighted sum of rms^2 * |H|^2 normalised to unit power.
std::vector<double> expected_psd(const GenerationReport& report, std::span<const StateProfile> profiles,
                                 double sample_rate_hz, std::span<const double> freqs_hz);

/// Seeds for `count` subjects derived from one master seed.
std::vector<GeneratorConfig> subject_configs(const GeneratorConfig& base, std::size_t count,
                                             const std::string& prefix = "S");

}  // namespace fsn::synth
