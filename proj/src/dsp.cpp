#include "fetalsleep/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "fetalsleep/error.hpp"

namespace fsn::dsp {

namespace {

constexpr double kPi = std::numbers::pi;

double sinc(double x) { return x == 0.0 ? 1.0 : std::sin(kPi * x) / (kPi * x); }

std::vector<double> lowpass_kernel(double cutoff_hz, double fs, const std::vector<double>& window) {
  const std::size_t m = window.size();
  const double centre = static_cast<double>(m - 1) / 2.0;
  const double fc = cutoff_hz / fs;
  std::vector<double> h(m);
  for (std::size_t n = 0; n < m; ++n) h[n] = 2.0 * fc * sinc(2.0 * fc * (n - centre)) * window[n];
  const double dc = std::accumulate(h.begin(), h.end(), 0.0);
  for (auto& v : h) v /= dc;
  return h;
}

std::vector<double> convolve_same(std::span<const double> x, std::span<const double> h) {
  const auto full = fft_convolve(x, h);
  const std::size_t offset = (h.size() - 1) / 2;
  return std::vector<double>(full.begin() + offset, full.begin() + offset + x.size());
}

struct Segmentation {
  std::size_t hop;
  std::size_t count;
};

Segmentation segments(std::size_t n, std::size_t nfft, double overlap_frac) {
  if (!(overlap_frac >= 0.0 && overlap_frac < 1.0))
    throw ArgumentError("overlap fraction must lie in [0, 1)");
  const auto noverlap = static_cast<std::size_t>(std::floor(nfft * overlap_frac));
  const std::size_t hop = nfft - noverlap;
  return {hop, (n - nfft) / hop + 1};
}

/// Mean-removed, windowed segment spectrum.
std::vector<Complex> segment_spectrum(std::span<const double> x, const std::vector<double>& window) {
  const std::size_t n = window.size();
  const double mean = std::accumulate(x.begin(), x.begin() + n, 0.0) / static_cast<double>(n);
  std::vector<Complex> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = (x[i] - mean) * window[i];
  fft_inplace(buf, false);
  return buf;
}

}  // namespace

std::vector<double> make_window(WindowKind kind, std::size_t n, bool periodic) {
  std::vector<double> w(n, 1.0);
  if (n <= 1 || kind == WindowKind::kRectangular) return w;
  const double denom = periodic ? static_cast<double>(n) : static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = 2.0 * kPi * static_cast<double>(i) / denom;
    switch (kind) {
      case WindowKind::kHann: w[i] = 0.5 - 0.5 * std::cos(t); break;
      case WindowKind::kHamming: w[i] = 0.54 - 0.46 * std::cos(t); break;
      case WindowKind::kBlackman: w[i] = 0.42 - 0.5 * std::cos(t) + 0.08 * std::cos(2.0 * t); break;
      case WindowKind::kRectangular: break;
    }
  }
  return w;
}

double FirFilter::response(double freq_hz) const {
  const double centre = static_cast<double>(taps.size() - 1) / 2.0;
  double acc = 0.0;
  for (std::size_t n = 0; n < taps.size(); ++n)
    acc += taps[n] * std::cos(2.0 * kPi * freq_hz * (static_cast<double>(n) - centre) / sample_rate_hz);
  return acc;
}

std::size_t default_num_taps(double sample_rate_hz) {
  return 2 * static_cast<std::size_t>(std::round(sample_rate_hz / 2.0)) + 1;
}

FirFilter design_fir_bandpass(double low_hz, double high_hz, double sample_rate_hz,
                              std::size_t num_taps) {
  if (!(sample_rate_hz > 0)) throw DesignError("sample rate must be positive");
  if (!(low_hz > 0 && low_hz < high_hz && high_hz < sample_rate_hz / 2))
    throw DesignError("band edges must satisfy 0 < low < high < fs/2");
  if (num_taps < 3 || num_taps % 2 == 0) throw DesignError("number of taps must be odd and >= 3");
  const auto window = make_window(WindowKind::kHamming, num_taps, false);
  const auto hi = lowpass_kernel(high_hz, sample_rate_hz, window);
  const auto lo = lowpass_kernel(low_hz, sample_rate_hz, window);
  FirFilter f{std::vector<double>(num_taps), low_hz, high_hz, sample_rate_hz};
  for (std::size_t n = 0; n < num_taps; ++n) f.taps[n] = hi[n] - lo[n];
  const double gain = f.response(0.5 * (low_hz + high_hz));
  for (auto& v : f.taps) v /= gain;
  return f;
}

std::vector<double> filter_zero_phase(std::span<const double> signal, const FirFilter& filter) {
  const std::size_t n = signal.size();
  const std::size_t pad = 3 * filter.size();
  if (n <= pad)
    throw LengthError("signal of " + std::to_string(n) + " samples is too short for a " +
                      std::to_string(filter.size()) + "-tap zero-phase filter (needs > " +
                      std::to_string(pad) + ")");
  std::vector<double> ext(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) {
    ext[i] = 2.0 * signal[0] - signal[pad - i];
    ext[pad + n + i] = 2.0 * signal[n - 1] - signal[n - 2 - i];
  }
  std::copy(signal.begin(), signal.end(), ext.begin() + pad);
  // Symmetric taps: a centred pass is the forward pass with its group delay
  // removed, and the reverse pass is the same operation on the reversed
  // signal, so applying the centred kernel twice is forward-backward.
  auto once = convolve_same(ext, filter.taps);
  auto twice = convolve_same(once, filter.taps);
  return std::vector<double>(twice.begin() + pad, twice.begin() + pad + n);
}

std::vector<double> decimate(std::span<const double> signal, int factor) {
  if (factor < 1) throw ArgumentError("decimation factor must be >= 1");
  std::vector<double> out;
  out.reserve(signal.size() / factor + 1);
  for (std::size_t i = 0; i < signal.size(); i += static_cast<std::size_t>(factor)) out.push_back(signal[i]);
  return out;
}

PsdEstimate welch_psd(std::span<const double> signal, double sample_rate_hz, std::size_t nfft,
                      double overlap_frac, WindowKind window_kind) {
  if (nfft < 2 || nfft % 2 != 0) throw ArgumentError("Welch FFT length must be even and >= 2");
  if (signal.size() < nfft)
    throw LengthError("signal of " + std::to_string(signal.size()) +
                      " samples is shorter than the Welch FFT length " + std::to_string(nfft));
  const auto seg = segments(signal.size(), nfft, overlap_frac);
  const auto window = make_window(window_kind, nfft, true);
  double wpow = 0.0;
  for (double w : window) wpow += w * w;
  const std::size_t nbins = nfft / 2 + 1;

  PsdEstimate psd;
  psd.nfft = nfft;
  psd.sample_rate_hz = sample_rate_hz;
  psd.num_segments = seg.count;
  psd.power.assign(nbins, 0.0);
  psd.freqs_hz.resize(nbins);
  for (std::size_t k = 0; k < nbins; ++k) psd.freqs_hz[k] = k * sample_rate_hz / static_cast<double>(nfft);

  for (std::size_t s = 0; s < seg.count; ++s) {
    const auto spec = segment_spectrum(signal.subspan(s * seg.hop, nfft), window);
    for (std::size_t k = 0; k < nbins; ++k) psd.power[k] += std::norm(spec[k]);
  }
  const double scale = 1.0 / (sample_rate_hz * wpow * static_cast<double>(seg.count));
  for (std::size_t k = 0; k < nbins; ++k) {
    const bool edge = k == 0 || k == nbins - 1;
    psd.power[k] *= scale * (edge ? 1.0 : 2.0);
  }
  return psd;
}

double spectral_edge(std::span<const double> signal, double sample_rate_hz, double fraction,
                     std::size_t nfft) {
  if (signal.empty()) throw UndefinedError("spectral edge of an empty signal");
  if (!(fraction > 0 && fraction <= 1)) throw ArgumentError("edge fraction must lie in (0, 1]");
  const std::size_t nbins = nfft / 2 + 1;
  std::vector<double> power(nbins, 0.0);
  if (signal.size() <= nfft) {
    const auto window = make_window(WindowKind::kBlackman, signal.size(), false);
    std::vector<double> tapered(signal.begin(), signal.end());
    for (std::size_t i = 0; i < tapered.size(); ++i) tapered[i] *= window[i];
    const auto spec = rfft(tapered, nfft);
    for (std::size_t k = 0; k < nbins; ++k) power[k] = std::norm(spec[k]);
  } else {
    const auto window = make_window(WindowKind::kBlackman, nfft, false);
    std::vector<double> tapered(nfft);
    for (std::size_t start = 0; start + nfft <= signal.size(); start += nfft) {
      for (std::size_t i = 0; i < nfft; ++i) tapered[i] = signal[start + i] * window[i];
      const auto spec = rfft(tapered, nfft);
      for (std::size_t k = 0; k < nbins; ++k) power[k] += std::norm(spec[k]);
    }
  }
  double total = 0.0;
  for (std::size_t k = 1; k < nbins; ++k) total += power[k];
  if (!(total > 0.0)) throw UndefinedError("spectral edge undefined: no power outside DC");
  const double threshold = fraction * total;
  double cum = 0.0;
  for (std::size_t k = 1; k < nbins; ++k) {
    cum += power[k];
    if (cum >= threshold) return k * sample_rate_hz / static_cast<double>(nfft);
  }
  return sample_rate_hz / 2.0;
}

std::vector<SefPoint> sef90_series(std::span<const double> signal, double sample_rate_hz,
                                   double window_s, double hop_s) {
  if (!(window_s > 0 && hop_s > 0)) throw ArgumentError("SEF window and hop must be positive");
  const auto win = static_cast<std::size_t>(std::llround(window_s * sample_rate_hz));
  const auto hop = static_cast<std::size_t>(std::llround(hop_s * sample_rate_hz));
  std::vector<SefPoint> out;
  for (std::size_t start = 0; start + win <= signal.size(); start += hop)
    out.push_back({start / sample_rate_hz, sef90(signal.subspan(start, win), sample_rate_hz)});
  return out;
}

CoherenceSpectrum coherence_spectrum(std::span<const double> x, std::span<const double> y,
                                     double sample_rate_hz, std::size_t nfft, double overlap_frac) {
  if (x.size() != y.size()) throw ArgumentError("coherence inputs must have equal length");
  if (x.size() < nfft) throw EstimateError("coherence needs at least one full segment");
  const auto seg = segments(x.size(), nfft, overlap_frac);
  if (seg.count < 2)
    throw EstimateError("coherence needs at least 2 Welch segments (a single segment is identically 1)");
  const auto window = make_window(WindowKind::kHann, nfft, true);
  const std::size_t nbins = nfft / 2 + 1;
  std::vector<double> pxx(nbins, 0.0), pyy(nbins, 0.0);
  std::vector<Complex> pxy(nbins);
  for (std::size_t s = 0; s < seg.count; ++s) {
    const auto sx = segment_spectrum(x.subspan(s * seg.hop, nfft), window);
    const auto sy = segment_spectrum(y.subspan(s * seg.hop, nfft), window);
    for (std::size_t k = 0; k < nbins; ++k) {
      pxx[k] += std::norm(sx[k]);
      pyy[k] += std::norm(sy[k]);
      pxy[k] += std::conj(sx[k]) * sy[k];
    }
  }
  CoherenceSpectrum out;
  out.num_segments = seg.count;
  out.freqs_hz.resize(nbins);
  out.msc.resize(nbins);
  for (std::size_t k = 0; k < nbins; ++k) {
    out.freqs_hz[k] = k * sample_rate_hz / static_cast<double>(nfft);
    const double denom = pxx[k] * pyy[k];
    out.msc[k] = denom > 0.0 ? std::min(1.0, std::norm(pxy[k]) / denom) : 0.0;
  }
  return out;
}

double coherence(std::span<const double> x, std::span<const double> y, double sample_rate_hz,
                 std::pair<double, double> band, std::size_t nfft, double overlap_frac) {
  if (!(band.first > 0 && band.first < band.second && band.second <= sample_rate_hz / 2))
    throw ArgumentError("coherence band must lie within (0, Nyquist]");
  const auto spec = coherence_spectrum(x, y, sample_rate_hz, nfft, overlap_frac);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < spec.freqs_hz.size(); ++k) {
    if (spec.freqs_hz[k] >= band.first && spec.freqs_hz[k] < band.second) {
      acc += spec.msc[k];
      ++count;
    }
  }
  if (count == 0) throw EstimateError("coherence band contains no frequency bins");
  return acc / static_cast<double>(count);
}

}  // namespace fsn::dsp
