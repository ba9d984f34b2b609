#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "fetalsleep/fft.hpp"

namespace fsn::dsp {

enum class WindowKind { kHann, kHamming, kBlackman, kRectangular };

/// Window of length n. Periodic windows (the DFT-even form used for spectral
/// estimation) drop the final sample of the symmetric length-(n+1) window.
std::vector<double> make_window(WindowKind kind, std::size_t n, bool periodic);

struct FirFilter {
  std::vector<double> taps;  // odd length, symmetric
  double low_hz = 0.0;
  double high_hz = 0.0;
  double sample_rate_hz = 0.0;

  std::size_t size() const { return taps.size(); }
  /// H(f) evaluated by direct DTFT of the taps, referenced to the centre tap
  /// so the returned value is real for a symmetric filter.
  double response(double freq_hz) const;
};

/// 401 taps at 400 Hz, scaled with the rate so the transition width in Hz
/// is the same at any rate (101 taps at 100 Hz).
std::size_t default_num_taps(double sample_rate_hz);

/// Linear-phase windowed-sinc bandpass (Hamming). Built as the difference
/// of two lowpass kernels, each normalised to unit DC gain, so the DC
/// response is zero by construction; the result is scaled to unit gain at
/// the band centre.
FirFilter design_fir_bandpass(double low_hz, double high_hz, double sample_rate_hz,
                              std::size_t num_taps);

/// Forward-backward application with odd-reflection padding of 3·taps
/// samples at each end. Output has zero phase and the input's length.
std::vector<double> filter_zero_phase(std::span<const double> signal, const FirFilter& filter);

/// Keeps every factor-th sample starting with the first.
std::vector<double> decimate(std::span<const double> signal, int factor);

struct PsdEstimate {
  std::vector<double> freqs_hz;  // k·fs/nfft, k = 0..nfft/2
  std::vector<double> power;     // µV²/Hz, one-sided
  std::size_t nfft = 0;
  double sample_rate_hz = 0.0;
  std::size_t num_epochs_averaged = 1;
  std::size_t num_segments = 0;

  double df() const { return sample_rate_hz / static_cast<double>(nfft); }
};

/// Welch one-sided PSD: per-segment mean removal, window, periodogram with
/// density scaling 1/(fs·Σw²), averaged over segments.
PsdEstimate welch_psd(std::span<const double> signal, double sample_rate_hz, std::size_t nfft = 512,
                      double overlap_frac = 0.5, WindowKind window = WindowKind::kHann);

inline constexpr std::size_t kSefFftSize = 32768;

/// Spectral edge frequency: smallest bin frequency where the cumulative
/// power, DC excluded, reaches `fraction` of the total. Signals shorter than
/// `nfft` are Blackman-windowed and zero-padded; longer ones average the
/// periodograms of consecutive non-overlapping nfft-sample segments.
double spectral_edge(std::span<const double> signal, double sample_rate_hz, double fraction = 0.9,
                     std::size_t nfft = kSefFftSize);
inline double sef90(std::span<const double> signal, double sample_rate_hz) {
  return spectral_edge(signal, sample_rate_hz, 0.9);
}

struct SefPoint {
  double start_s;
  double sef_hz;
};
/// SEF90 over sliding windows (default 30 s windows every 15 s).
std::vector<SefPoint> sef90_series(std::span<const double> signal, double sample_rate_hz,
                                   double window_s = 30.0, double hop_s = 15.0);

struct CoherenceSpectrum {
  std::vector<double> freqs_hz;
  std::vector<double> msc;  // magnitude-squared coherence per bin
  std::size_t num_segments = 0;
};

CoherenceSpectrum coherence_spectrum(std::span<const double> x, std::span<const double> y,
                                     double sample_rate_hz, std::size_t nfft = 256,
                                     double overlap_frac = 0.5);

/// Mean magnitude-squared coherence over bins with band.first <= f < band.second.
double coherence(std::span<const double> x, std::span<const double> y, double sample_rate_hz,
                 std::pair<double, double> band, std::size_t nfft = 256, double overlap_frac = 0.5);

}  // namespace fsn::dsp
