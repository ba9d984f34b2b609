#include "fetalsleep/features.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>

#include "fetalsleep/error.hpp"

namespace fsn::features {

namespace {

constexpr double kTieTolerance = 1e-9;
constexpr double kDbFloor = 1e-12;

double mean_of(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double variance_of(std::span<const double> x) {
  const double m = mean_of(x);
  double acc = 0.0;
  for (double v : x) acc += (v - m) * (v - m);
  return acc / static_cast<double>(x.size());
}

std::vector<double> diff(std::span<const double> x) {
  std::vector<double> d(x.size() - 1);
  for (std::size_t i = 1; i < x.size(); ++i) d[i - 1] = x[i] - x[i - 1];
  return d;
}

double to_db(double v) { return 10.0 * std::log10(std::max(v, kDbFloor)); }

std::string fmt(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

template <typename F>
auto named(const char* feature, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw FeatureError(std::string(feature) + ": " + e.what());
  }
}

constexpr std::array<Band, 4> kBands{{
    {"delta", 1.0, 4.0},
    {"theta", 4.0, 8.0},
    {"alpha", 8.0, 13.0},
    {"beta", 13.0, 22.0},
}};

}  // namespace

std::optional<Stage> majority_label(const LabelTrack& track, double start_s, double end_s) {
  struct Tally {
    double overlap = 0.0;
    double first_start = 0.0;
  };
  std::map<Stage, Tally> tally;
  for (const auto& iv : track.intervals) {
    const double overlap = std::min(end_s, iv.end_s) - std::max(start_s, iv.start_s);
    if (overlap <= 0.0) continue;
    auto [it, inserted] = tally.try_emplace(iv.stage, Tally{0.0, iv.start_s});
    it->second.overlap += overlap;
    if (!inserted) it->second.first_start = std::min(it->second.first_start, iv.start_s);
  }
  std::optional<Stage> best;
  Tally best_tally;
  for (const auto& [stage, t] : tally) {
    const bool better = !best || t.overlap > best_tally.overlap + kTieTolerance ||
                        (std::fabs(t.overlap - best_tally.overlap) <= kTieTolerance &&
                         t.first_start < best_tally.first_start);
    if (better) {
      best = stage;
      best_tally = t;
    }
  }
  return best;
}

std::size_t window_count(double duration_s, const SegmentOptions& options) {
  if (duration_s + 1e-9 < options.window_s) return 0;
  return static_cast<std::size_t>(std::floor((duration_s - options.window_s) / options.step_s + 1e-9)) + 1;
}

std::vector<LabeledEpoch> segment_epochs(const Recording& recording, const LabelTrack& labels,
                                         const SegmentOptions& options) {
  recording.validate();
  if (!(options.window_s > 0 && options.step_s > 0))
    throw ArgumentError("window and step must be positive");
  const double fs = recording.sample_rate_hz;
  const auto win = static_cast<std::size_t>(std::llround(options.window_s * fs));
  const auto step = static_cast<std::size_t>(std::llround(options.step_s * fs));
  if (recording.num_samples() < win)
    throw LengthError("recording of " + fmt(recording.duration_s()) + " s is shorter than one " +
                      fmt(options.window_s) + " s window");
  std::vector<LabeledEpoch> out;
  for (std::size_t offset = 0; offset + win <= recording.num_samples(); offset += step) {
    const double start = offset / fs;
    const auto label = majority_label(labels, start, start + options.window_s);
    if (!label || *label == Stage::kExcluded) continue;
    LabeledEpoch e;
    e.label = *label;
    e.subject_id = recording.subject_id;
    e.start_s = start;
    for (const auto& ch : recording.channels)
      e.channels.emplace_back(ch.samples.begin() + offset, ch.samples.begin() + offset + win);
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

NormalizationProfile fit_masked(const Recording& recording, const std::vector<char>* mask) {
  recording.validate();
  NormalizationProfile p;
  p.subject_id = recording.subject_id;
  for (const auto& ch : recording.channels) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ch.samples.size(); ++i)
      if (!mask || (*mask)[i]) {
        sum += ch.samples[i];
        ++n;
      }
    if (n < 2) throw NormalizationError("channel '" + ch.label + "' has fewer than 2 usable samples");
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < ch.samples.size(); ++i)
      if (!mask || (*mask)[i]) ss += (ch.samples[i] - mean) * (ch.samples[i] - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (!(sd > 0.0)) throw NormalizationError("channel '" + ch.label + "' has zero variance");
    p.channels.push_back({mean, sd});
  }
  return p;
}

}  // namespace

NormalizationProfile zscore_fit(const Recording& recording, const LabelTrack* labels) {
  if (!labels) return fit_masked(recording, nullptr);
  std::vector<char> mask(recording.num_samples(), 0);
  const double fs = recording.sample_rate_hz;
  for (const auto& iv : labels->intervals) {
    if (iv.stage == Stage::kExcluded) continue;
    const auto a = static_cast<std::size_t>(std::max(0.0, std::ceil(iv.start_s * fs - 1e-9)));
    const auto b = std::min(mask.size(), static_cast<std::size_t>(std::max(0.0, std::ceil(iv.end_s * fs - 1e-9))));
    for (std::size_t i = a; i < b; ++i) mask[i] = 1;
  }
  return fit_masked(recording, &mask);
}

NormalizationProfile zscore_fit_calibration(const Recording& recording, double calibration_s) {
  if (!(calibration_s > 0)) throw ArgumentError("calibration period must be positive");
  std::vector<char> mask(recording.num_samples(), 0);
  const auto n = std::min(mask.size(), static_cast<std::size_t>(std::llround(calibration_s * recording.sample_rate_hz)));
  std::fill(mask.begin(), mask.begin() + n, 1);
  auto p = fit_masked(recording, &mask);
  p.source = NormalizationProfile::Source::kCalibrationWindow;
  return p;
}

Recording zscore_apply(const Recording& recording, const NormalizationProfile& profile) {
  recording.validate();
  if (profile.channels.size() != recording.channels.size())
    throw NormalizationError("profile channel count does not match the recording");
  Recording out = recording;
  for (std::size_t c = 0; c < out.channels.size(); ++c) {
    auto stats = profile.channels[c];
    if (!(stats.std > 0.0)) throw NormalizationError("profile std must be positive");
    auto& x = out.channels[c].samples;
    if (!profile.ema_time_constant_s) {
      for (auto& v : x) v = (v - stats.mean) / stats.std;
      continue;
    }
    const double alpha = 1.0 / (*profile.ema_time_constant_s * recording.sample_rate_hz);
    double mean = stats.mean, var = stats.std * stats.std;
    for (auto& v : x) {
      const double raw = v;
      v = (raw - mean) / std::sqrt(var);
      mean += alpha * (raw - mean);
      var += alpha * ((raw - mean) * (raw - mean) - var);
    }
  }
  return out;
}

Hjorth hjorth(std::span<const double> x) {
  if (x.size() < 3) throw FeatureError("Hjorth parameters need at least 3 samples");
  const auto d1 = diff(x);
  const auto d2 = diff(d1);
  const double v0 = variance_of(x), v1 = variance_of(d1), v2 = variance_of(d2);
  if (!(v0 > 0.0) || !(v1 > 0.0)) throw FeatureError("Hjorth parameters undefined for zero variance");
  const double mobility = std::sqrt(v1 / v0);
  return {v0, mobility, std::sqrt(v2 / v1) / mobility};
}

std::size_t derivative_sign_changes(std::span<const double> x) {
  std::size_t count = 0;
  for (std::size_t i = 2; i < x.size(); ++i)
    if ((x[i] - x[i - 1]) * (x[i - 1] - x[i - 2]) < 0.0) ++count;
  return count;
}

double petrosian_fd(std::span<const double> x) {
  if (x.size() < 3) throw FeatureError("PFD needs at least 3 samples");
  const double n = static_cast<double>(x.size());
  const double nd = static_cast<double>(derivative_sign_changes(x));
  return std::log10(n) / (std::log10(n) + std::log10(n / (n + 0.4 * nd)));
}

std::vector<std::size_t> default_dfa_boxes(std::size_t n) {
  const double lo = 16.0, hi = static_cast<double>(n / 4);
  std::vector<std::size_t> out;
  if (hi < lo) return out;
  const int count = 10;
  for (int i = 0; i < count; ++i) {
    const double s = lo * std::pow(hi / lo, static_cast<double>(i) / (count - 1));
    const auto v = static_cast<std::size_t>(std::llround(s));
    if (out.empty() || v != out.back()) out.push_back(v);
  }
  return out;
}

double dfa(std::span<const double> x, std::span<const std::size_t> box_sizes) {
  if (box_sizes.size() < 3) throw FeatureError("DFA needs at least 3 box sizes");
  const std::size_t max_box = *std::max_element(box_sizes.begin(), box_sizes.end());
  if (x.size() < 4 * max_box)
    throw FeatureError("DFA signal of " + std::to_string(x.size()) + " samples is shorter than 4x the largest box");
  const double m = mean_of(x);
  std::vector<double> profile(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) profile[i] = acc += x[i] - m;

  std::vector<double> log_s, log_f;
  for (std::size_t s : box_sizes) {
    if (s < 3) throw FeatureError("DFA box sizes must be >= 3");
    const std::size_t boxes = x.size() / s;
    // Closed-form least squares on t = 0..s-1.
    const double sd = static_cast<double>(s);
    const double t_mean = (sd - 1.0) / 2.0;
    const double t_var = (sd * sd - 1.0) / 12.0;
    double sq = 0.0;
    for (std::size_t b = 0; b < boxes; ++b) {
      const double* y = profile.data() + b * s;
      double y_mean = 0.0, cov = 0.0;
      for (std::size_t t = 0; t < s; ++t) y_mean += y[t];
      y_mean /= sd;
      for (std::size_t t = 0; t < s; ++t) cov += (t - t_mean) * (y[t] - y_mean);
      cov /= sd;
      const double slope = cov / t_var;
      for (std::size_t t = 0; t < s; ++t) {
        const double r = y[t] - (y_mean + slope * (t - t_mean));
        sq += r * r;
      }
    }
    const double f = std::sqrt(sq / static_cast<double>(boxes * s));
    if (!(f > 0.0)) throw FeatureError("DFA fluctuation is zero at box size " + std::to_string(s));
    log_s.push_back(std::log10(sd));
    log_f.push_back(std::log10(f));
  }
  const double ms = mean_of(log_s), mf = mean_of(log_f);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < log_s.size(); ++i) {
    num += (log_s[i] - ms) * (log_f[i] - mf);
    den += (log_s[i] - ms) * (log_s[i] - ms);
  }
  return num / den;
}

std::span<const Band> standard_bands() { return kBands; }

double integrate_psd(const dsp::PsdEstimate& psd, double a, double b) {
  const auto& f = psd.freqs_hz;
  const auto& p = psd.power;
  if (a < f.front() || b > f.back()) throw FeatureError("PSD grid does not cover the band edges");
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < f.size(); ++k) {
    const double lo = std::max(a, f[k]), hi = std::min(b, f[k + 1]);
    if (hi <= lo) continue;
    const double w = f[k + 1] - f[k];
    auto at = [&](double q) { return p[k] + (p[k + 1] - p[k]) * (q - f[k]) / w; };
    total += 0.5 * (at(lo) + at(hi)) * (hi - lo);
  }
  return total;
}

BandPowers band_powers(const dsp::PsdEstimate& psd, std::span<const Band> bands) {
  BandPowers out;
  double total = 0.0;
  for (const auto& band : bands) {
    const double v = integrate_psd(psd, band.low_hz, band.high_hz);
    out.absolute.push_back(v);
    total += v;
  }
  if (!(total > 0.0)) throw FeatureError("zero total band power");
  for (double v : out.absolute) {
    out.relative.push_back(v / total);
    out.absolute_db.push_back(to_db(v));
    out.relative_db.push_back(to_db(v / total));
  }
  return out;
}

const std::array<std::string, kNumFeatures>& FeatureVector::names() {
  static const auto names = [] {
    std::array<std::string, kNumFeatures> n;
    const char* per[kPerChannelFeatures] = {
        "mean",          "std",           "ptp",           "zero_crossings", "hjorth_activity",
        "hjorth_mobility", "hjorth_complexity", "abs_delta_db", "abs_theta_db", "abs_alpha_db",
        "abs_beta_db",   "rel_delta_db",  "rel_theta_db",  "rel_alpha_db",  "rel_beta_db",
        "pfd",           "dfa"};
    for (std::size_t i = 0; i < kPerChannelFeatures; ++i) {
      n[i] = std::string("L_") + per[i];
      n[kPerChannelFeatures + i] = std::string("R_") + per[i];
    }
    n[kNumFeatures - 1] = "theta_coherence";
    return n;
  }();
  return names;
}

namespace {

void channel_features(std::span<const double> x, double fs, double* out) {
  if (x.size() < 3) throw FeatureError("epoch too short for features");
  const double mean = mean_of(x);
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  std::size_t zc = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if ((x[i] >= 0.0) != (x[i - 1] >= 0.0)) ++zc;
  out[0] = mean;
  out[1] = std::sqrt(variance_of(x));
  out[2] = *mx - *mn;
  out[3] = static_cast<double>(zc);
  const auto h = named("hjorth", [&] { return hjorth(x); });
  out[4] = h.activity;
  out[5] = h.mobility;
  out[6] = h.complexity;
  const auto bp = named("band_power", [&] { return band_powers(dsp::welch_psd(x, fs, 512, 0.5)); });
  for (std::size_t b = 0; b < 4; ++b) {
    out[7 + b] = bp.absolute_db[b];
    out[11 + b] = bp.relative_db[b];
  }
  out[15] = named("pfd", [&] { return petrosian_fd(x); });
  out[16] = named("dfa", [&] { return dfa(x); });
}

}  // namespace

FeatureVector extract_features(std::span<const double> left, std::span<const double> right,
                               double sample_rate_hz) {
  if (left.size() != right.size()) throw FeatureError("epoch channels differ in length");
  FeatureVector fv;
  channel_features(left, sample_rate_hz, fv.values.data());
  channel_features(right, sample_rate_hz, fv.values.data() + kPerChannelFeatures);
  fv.values[kNumFeatures - 1] =
      named("theta_coherence", [&] { return dsp::coherence(left, right, sample_rate_hz, kThetaBand); });
  for (std::size_t i = 0; i < kNumFeatures; ++i)
    if (!std::isfinite(fv.values[i])) throw FeatureError(FeatureVector::names()[i] + ": non-finite value");
  return fv;
}

std::string csv_header() {
  std::string out = "subject,start_s,label";
  for (const auto& n : FeatureVector::names()) out += "," + n;
  return out + "\n";
}

std::string csv_row(const std::string& subject, double start_s, std::string_view label,
                    const FeatureVector& features) {
  std::string out = subject + "," + fmt(start_s) + "," + std::string(label);
  for (double v : features.values) out += "," + fmt(v);
  return out + "\n";
}

}  // namespace fsn::features
