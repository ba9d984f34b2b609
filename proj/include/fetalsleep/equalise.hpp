#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fetalsleep/dsp.hpp"
#include "fetalsleep/recording.hpp"

namespace fsn::equalise {

inline constexpr double kDefaultEpsilon = 1e-8;
/// Gains above this ratio are reported on stderr; they are never clipped.
inline constexpr double kLargeGainWarning = 1e6;

/// Per-channel power-ratio gains on a Welch frequency grid.
struct EqualisationMap {
  std::vector<double> freqs_hz;
  /// gains[c][k]: ratio for source channel c at freqs_hz[k].
  std::vector<std::vector<double>> gains;
  /// (source channel, target channel) pairs; a bijection.
  std::vector<std::pair<std::size_t, std::size_t>> mapping;
  double epsilon = kDefaultEpsilon;

  std::size_t num_channels() const { return gains.size(); }
  void validate() const;
};

struct GroupPsdOptions {
  double epoch_len_s = 30.0;
  std::size_t nfft = 512;
  double overlap_frac = 0.5;
};

/// Mean of per-epoch Welch PSDs over every contiguous, non-overlapping epoch
/// of `channel` across all recordings. Recordings must share a rate.
dsp::PsdEstimate mean_group_psd(std::span<const Recording> recordings, std::size_t channel,
                                const GroupPsdOptions& options = {});

/// gains[c][k] = target[map(c)][k] / (source[c][k] + epsilon).
EqualisationMap compute_gain_map(std::span<const dsp::PsdEstimate> target_psd_per_channel,
                                 std::span<const dsp::PsdEstimate> source_psd_per_channel,
                                 const std::vector<std::pair<std::size_t, std::size_t>>& mapping,
                                 double epsilon = kDefaultEpsilon);

/// √gain of `channel` resampled onto the bins k = 0..nfft/2 of an nfft-point
/// DFT at `sample_rate_hz`: linear interpolation in frequency, constant
/// beyond the last grid point.
std::vector<double> sqrt_gain_on_grid(const EqualisationMap& map, std::size_t channel,
                                      std::size_t nfft, double sample_rate_hz);

/// Scales the non-negative-frequency bins of a full DFT by `sqrt_gain`
/// (nfft/2 + 1 values), forces bins 0 and nfft/2 real, and rebuilds the
/// negative-frequency half as the complex conjugate mirror.
void equalise_spectrum(std::vector<dsp::Complex>& spectrum, std::span<const double> sqrt_gain);

struct EqualisationReport {
  std::size_t fft_length = 0;
  double max_imag_residual = 0.0;
  double output_peak = 0.0;
};

/// Amplitude-only equalisation of one continuous channel: zero-pad to the
/// next power of two, FFT, scale by √gain, enforce Hermitian symmetry,
/// inverse FFT, drop the padding.
std::vector<double> apply_equalisation(std::span<const double> signal, const EqualisationMap& map,
                                       std::size_t channel, double sample_rate_hz,
                                       EqualisationReport* report = nullptr);

struct PipelineOptions {
  double band_low_hz = 1.0;
  double band_high_hz = 22.0;
  std::size_t num_taps = 0;  // 0: dsp::default_num_taps(rate)
};

/// Equalises every channel (channel i uses map channel i) and then applies
/// the 1-22 Hz zero-phase bandpass. Length and channel order are kept.
Recording equalisation_pipeline(const Recording& source, const EqualisationMap& map,
                                const PipelineOptions& options = {});

/// CSV `freq_hz,gain_ch0,gain_ch1,...`.
std::string map_to_csv(const EqualisationMap& map);
/// JSON sidecar with mapping and epsilon.
std::string map_sidecar_json(const EqualisationMap& map);
EqualisationMap map_from_files(std::string_view csv, std::string_view sidecar_json);

std::string psd_to_csv(const dsp::PsdEstimate& psd);

}  // namespace fsn::equalise
