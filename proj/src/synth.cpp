#include "fetalsleep/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "fetalsleep/dsp.hpp"
#include "fetalsleep/error.hpp"
#include "fetalsleep/fft.hpp"

namespace fsn::synth {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kNormTopHz = 50.0;
constexpr double kCalibrationEpochS = 30.0;
constexpr std::size_t kCalibrationEpochs = 48;

double taper(double f, double lo, double hi, double width) {
  if (f < lo - width || f > hi + width) return 0.0;
  if (f < lo) return 0.5 * (1.0 + std::cos(kPi * (lo - f) / width));
  if (f > hi) return 0.5 * (1.0 + std::cos(kPi * (f - hi) / width));
  return 1.0;
}

double shape_power(const SpectralShape& s) {
  // trapezoid on a fine grid; the shapes are smooth
  const std::size_t n = 5000;
  const double df = kNormTopHz / static_cast<double>(n);
  double acc = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    const double w = (k == 0 || k == n) ? 0.5 : 1.0;
    acc += w * s(k * df);
  }
  return acc * df;
}

std::vector<double> mixture_norms(const StateProfile& p) {
  std::vector<double> out;
  for (const auto& m : p.mixture) out.push_back(shape_power(m.first));
  return out;
}

double mixture_psd(const StateProfile& p, const std::vector<double>& norms, double f) {
  double v = 0.0;
  for (std::size_t i = 0; i < p.mixture.size(); ++i) v += p.mixture[i].second * p.mixture[i].first(f) / norms[i];
  return v * p.tilt(f);
}

std::uint64_t stage_salt(Stage s) { return 0xC0FFEEULL + static_cast<std::uint64_t>(s) * 7919ULL; }

/// White noise of length n filtered by h, steady state (no edge transient).
std::vector<double> shaped_noise(std::size_t n, std::span<const double> h, std::mt19937_64& rng) {
  std::vector<double> white(n + h.size() - 1);
  for (auto& v : white) v = standard_normal(rng);
  const auto full = dsp::fft_convolve(white, h);
  return {full.begin() + static_cast<std::ptrdiff_t>(h.size() - 1),
          full.begin() + static_cast<std::ptrdiff_t>(h.size() - 1 + n)};
}

const StateProfile& find_profile(std::span<const StateProfile> profiles, Stage stage) {
  for (const auto& p : profiles)
    if (p.stage == stage) return p;
  throw ConfigError("no state profile for stage " + std::string(stage_token(stage)));
}

double energy_response(std::span<const double> h, double f, double fs) {
  // |H(f)|^2 by direct DTFT
  double re = 0.0, im = 0.0;
  const double w = 2.0 * kPi * f / fs;
  for (std::size_t n = 0; n < h.size(); ++n) {
    re += h[n] * std::cos(w * n);
    im -= h[n] * std::sin(w * n);
  }
  return re * re + im * im;
}

SpectralShape rem_shape() {
  SpectralShape s;
  s.exponent = 0.4;
  s.knee_hz = 2.0;
  s.peaks = {{16.0, 3.0, 1.5}};
  return s;
}

SpectralShape nrem_shape() {
  SpectralShape s;
  s.exponent = 3.0;
  s.knee_hz = 1.0;
  s.peaks = {{1.8, 0.8, 1.5}};
  return s;
}

StateProfile make_profile(Stage stage, double lo, double hi, std::vector<std::pair<SpectralShape, double>> mix,
                          double min_s, double mean_s, DomainTilt tilt = {}) {
  StateProfile p;
  p.stage = stage;
  p.amp_lo_uv = lo;
  p.amp_hi_uv = hi;
  p.mixture = std::move(mix);
  p.tilt = tilt;
  p.min_duration_s = min_s;
  p.mean_duration_s = mean_s;
  return p;
}

double draw(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

LabelTrack fetal_sequence(const GeneratorConfig& c) {
  std::mt19937_64 rng(split_seed(c.seed, 0));
  const double p_rem = c.priors[0], p_nrem = c.priors[1], p_int = c.priors[2];
  const double nrem_share = p_nrem / (p_nrem + p_rem);
  const double mean_cycle = 0.5 * (c.cycle_min_s + c.cycle_max_s);
  const double mean_int = 0.5 * (c.intermediate_min_s + c.intermediate_max_s);
  // two transitions per cycle, each followed by an Intermediate bout with
  // probability q, gives the Intermediate time share p_int
  const double q = std::min(1.0, p_int * mean_cycle / (2.0 * mean_int * (1.0 - p_int)));
  constexpr double kMinBout = 180.0;

  std::vector<LabelInterval> bouts;
  double t = 0.0;
  bool nrem_first = uniform01(rng) < 0.5;
  auto push = [&](Stage s, double d) {
    d = std::round(d);
    bouts.push_back({t, t + d, s});
    t += d;
  };
  while (t < c.duration_s) {
    const double cycle = draw(rng, c.cycle_min_s, c.cycle_max_s);
    const double frac = std::clamp(nrem_share + draw(rng, -0.1, 0.1), 0.05, 0.95);
    const double nrem_d = std::max(kMinBout, frac * cycle);
    const double rem_d = std::max(kMinBout, (1.0 - frac) * cycle);
    for (int half = 0; half < 2; ++half) {
      const bool nrem = (half == 0) == nrem_first;
      push(nrem ? Stage::kNrem : Stage::kRem, nrem ? nrem_d : rem_d);
      if (uniform01(rng) < q) push(Stage::kIntermediate, draw(rng, c.intermediate_min_s, c.intermediate_max_s));
    }
  }

  // trim to the duration; a short REM/NREM tail is folded into the
  // nearest preceding REM/NREM bout
  while (!bouts.empty() && bouts.back().start_s >= c.duration_s) bouts.pop_back();
  bouts.back().end_s = c.duration_s;
  if (bouts.back().stage != Stage::kIntermediate && bouts.back().duration_s() < kMinBout && bouts.size() > 1) {
    bouts.pop_back();
    if (bouts.back().stage == Stage::kIntermediate && bouts.size() > 1) bouts.pop_back();
    bouts.back().end_s = c.duration_s;
  }
  return LabelTrack{std::move(bouts)};
}

LabelTrack adult_sequence(const GeneratorConfig& c) {
  std::mt19937_64 rng(split_seed(c.seed, 0));
  const auto profiles = adult_profiles(c.adult_tilt);
  std::vector<LabelInterval> bouts;
  double t = 0.0;
  std::size_t cur = profiles.size();
  while (t < c.duration_s) {
    // entry rate prior/mean keeps time shares near the priors
    std::vector<double> rate(profiles.size());
    double total = 0.0;
    for (std::size_t s = 0; s < profiles.size(); ++s) {
      rate[s] = s == cur ? 0.0 : c.priors[s] / profiles[s].mean_duration_s;
      total += rate[s];
    }
    double u = uniform01(rng) * total;
    std::size_t next = 0;
    while (next + 1 < rate.size() && u >= rate[next]) u -= rate[next++];
    const auto& p = profiles[next];
    const double d = std::round(draw(rng, p.min_duration_s, 2.0 * p.mean_duration_s - p.min_duration_s));
    bouts.push_back({t, std::min(t + d, c.duration_s), p.stage});
    t += d;
    cur = next;
  }
  return LabelTrack{std::move(bouts)};
}

}  // namespace

double SpectralShape::operator()(double f) const {
  if (f < 0.0) f = -f;
  const double edge = taper(f, low_hz, high_hz, taper_hz);
  if (edge == 0.0) return 0.0;
  double v = std::pow(f + knee_hz, -exponent);
  for (const auto& pk : peaks) {
    const double base = std::pow(pk.centre_hz + knee_hz, -exponent);
    const double z = (f - pk.centre_hz) / pk.width_hz;
    v += pk.gain * base * std::exp(-0.5 * z * z);
  }
  return v * edge;
}

double DomainTilt::operator()(double f) const {
  if (exponent == 0.0) return 1.0;
  return std::pow((std::abs(f) + 1.0) / (ref_hz + 1.0), exponent);
}

double StateProfile::psd(double f) const { return mixture_psd(*this, mixture_norms(*this), f); }

void GeneratorConfig::validate() const {
  const std::size_t want = domain == Domain::kFetal ? 3 : 5;
  if (priors.size() != want)
    throw ConfigError("generator needs " + std::to_string(want) + " state priors, got " +
                      std::to_string(priors.size()));
  double sum = 0.0;
  for (double p : priors) {
    if (!(p >= 0.0)) throw ConfigError("state priors must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("state priors must sum to 1, got " + std::to_string(sum));
  if (domain == Domain::kFetal && priors[0] + priors[1] <= 0.0)
    throw ConfigError("REM and NREM priors cannot both be zero");
  if (!(cycle_min_s > 0.0) || cycle_max_s < cycle_min_s) throw ConfigError("bad cycle duration range");
  if (!(intermediate_min_s > 0.0) || intermediate_max_s < intermediate_min_s)
    throw ConfigError("bad intermediate duration range");
  if (!(sample_rate_hz > 0.0)) throw ConfigError("sample rate must be positive");
  if (!(duration_s > 0.0)) throw ConfigError("duration must be positive");
  if (domain == Domain::kFetal && duration_s < cycle_min_s)
    throw ConfigError("duration must cover at least one sleep cycle");
  if (!(coupling >= 0.0 && coupling <= 1.0)) throw ConfigError("coupling must be in [0, 1]");
  if (!(amplitude_jitter >= 0.0 && amplitude_jitter < 1.0)) throw ConfigError("amplitude jitter must be in [0, 1)");
  if (!(crossfade_s >= 0.0)) throw ConfigError("cross-fade must be non-negative");
  if (sample_rate_hz < 2.0 * 35.0) throw ConfigError("sample rate must be at least 70 Hz");
}

GeneratorConfig default_config(Domain domain) {
  GeneratorConfig c;
  c.domain = domain;
  if (domain == Domain::kAdult) {
    c.priors = {0.20, 0.20, 0.10, 0.35, 0.15};
    c.sample_rate_hz = 100.0;
    c.duration_s = 8.0 * 3600.0;
  }
  return c;
}

std::vector<StateProfile> fetal_profiles() {
  return {
      make_profile(Stage::kRem, 10.0, 50.0, {{rem_shape(), 1.0}}, 180.0, 900.0),
      make_profile(Stage::kNrem, 100.0, 200.0, {{nrem_shape(), 1.0}}, 180.0, 660.0),
      make_profile(Stage::kIntermediate, 50.0, 100.0, {{rem_shape(), 0.5}, {nrem_shape(), 0.5}}, 30.0, 105.0),
  };
}

std::vector<StateProfile> adult_profiles(const DomainTilt& tilt) {
  auto wake = rem_shape();
  wake.peaks.push_back({10.0, 1.0, 4.0});
  auto n2 = nrem_shape();
  n2.peaks.push_back({13.0, 1.0, 6.0});
  auto n3 = nrem_shape();
  n3.exponent = 3.4;
  return {
      make_profile(Stage::kWake, 30.0, 70.0, {{wake, 1.0}}, 60.0, 300.0, tilt),
      make_profile(Stage::kRem, 25.0, 60.0, {{rem_shape(), 1.0}}, 120.0, 600.0, tilt),
      make_profile(Stage::kN1, 30.0, 70.0, {{rem_shape(), 0.5}, {nrem_shape(), 0.5}}, 30.0, 120.0, tilt),
      make_profile(Stage::kN2, 40.0, 90.0, {{n2, 1.0}}, 120.0, 600.0, tilt),
      make_profile(Stage::kN3, 50.0, 110.0, {{n3, 1.0}}, 120.0, 450.0, tilt),
  };
}

std::vector<StateProfile> profiles_for(const GeneratorConfig& config) {
  return config.domain == Domain::kFetal ? fetal_profiles() : adult_profiles(config.adult_tilt);
}

LabelTrack gen_state_sequence(const GeneratorConfig& config) {
  config.validate();
  auto track = config.domain == Domain::kFetal ? fetal_sequence(config) : adult_sequence(config);
  track.validate();
  return track;
}

std::size_t shaping_taps(double fs) { return 2 * static_cast<std::size_t>(std::llround(2.5 * fs)) + 1; }

std::vector<double> shaping_filter(const StateProfile& profile, double fs) {
  const std::size_t n = shaping_taps(fs);
  const std::size_t half = n / 2;
  const auto norms = mixture_norms(profile);
  std::vector<double> amp(half + 1);
  for (std::size_t k = 0; k <= half; ++k) amp[k] = std::sqrt(std::max(0.0, mixture_psd(profile, norms, k * fs / n)));
  // zero-phase frequency sampling, Hann-windowed
  std::vector<double> h(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = static_cast<double>(i) - static_cast<double>(half);
    double v = amp[0];
    for (std::size_t k = 1; k <= half; ++k) v += 2.0 * amp[k] * std::cos(2.0 * kPi * k * m / n);
    const double win = 0.5 * (1.0 + std::cos(2.0 * kPi * m / (n + 1)));
    h[i] = v * win;
  }
  double energy = 0.0;
  for (double v : h) energy += v * v;
  if (!(energy > 0.0)) throw ConfigError("state profile has no power below Nyquist");
  const double s = 1.0 / std::sqrt(energy);
  for (auto& v : h) v *= s;
  return h;
}

double calibrated_rms(const StateProfile& profile, double fs) {
  const auto h = shaping_filter(profile, fs);
  const auto len = static_cast<std::size_t>(std::llround(kCalibrationEpochS * fs));
  std::mt19937_64 rng(stage_salt(profile.stage));
  const auto x = shaped_noise(len * kCalibrationEpochs, h, rng);
  std::vector<double> p2p(kCalibrationEpochs);
  for (std::size_t e = 0; e < kCalibrationEpochs; ++e) {
    const auto [lo, hi] = std::minmax_element(x.begin() + e * len, x.begin() + (e + 1) * len);
    p2p[e] = *hi - *lo;
  }
  std::nth_element(p2p.begin(), p2p.begin() + kCalibrationEpochs / 2, p2p.end());
  return profile.amp_centre_uv() / p2p[kCalibrationEpochs / 2];
}

Recording gen_signal(const LabelTrack& track, std::span<const StateProfile> profiles, const GeneratorConfig& config,
                     GenerationReport* report) {
  config.validate();
  track.validate();
  if (track.intervals.empty()) throw DataError("label track is empty");
  const double fs = config.sample_rate_hz;
  const auto total = static_cast<std::size_t>(std::llround(track.intervals.back().end_s * fs));

  struct Prepared {
    std::vector<double> h;
    double rms;
  };
  std::vector<std::pair<Stage, Prepared>> cache;
  auto prepared = [&](Stage s) -> const Prepared& {
    for (const auto& [st, p] : cache)
      if (st == s) return p;
    const auto& prof = find_profile(profiles, s);
    cache.push_back({s, {shaping_filter(prof, fs), calibrated_rms(prof, fs)}});
    return cache.back().second;
  };
  for (const auto& iv : track.intervals) prepared(iv.stage);

  Recording rec;
  rec.sample_rate_hz = fs;
  rec.subject_id = config.subject_id;
  rec.channels = {{"left", std::vector<double>(total, 0.0)}, {"right", std::vector<double>(total, 0.0)}};
  const auto fade = static_cast<std::size_t>(std::llround(config.crossfade_s * fs));
  const double cross = std::sqrt(1.0 - config.coupling * config.coupling);
  std::mt19937_64 amp_rng(split_seed(config.seed, 1));
  GenerationReport rep;

  for (std::size_t b = 0; b < track.intervals.size(); ++b) {
    const auto& iv = track.intervals[b];
    const auto& prep = prepared(iv.stage);
    const double rms = prep.rms * (1.0 + config.amplitude_jitter * (2.0 * uniform01(amp_rng) - 1.0));
    rep.bouts.push_back({iv.start_s, iv.end_s, iv.stage, rms});

    const auto s0 = static_cast<std::size_t>(std::llround(iv.start_s * fs));
    const auto s1 = std::min(total, static_cast<std::size_t>(std::llround(iv.end_s * fs)));
    if (s1 <= s0) continue;
    // ramps are centred on boundaries shared with a neighbouring bout
    const bool join_prev = b > 0 && std::abs(track.intervals[b - 1].end_s - iv.start_s) < 1e-9;
    const bool join_next =
        b + 1 < track.intervals.size() && std::abs(track.intervals[b + 1].start_s - iv.end_s) < 1e-9;
    const std::size_t lead = join_prev ? std::min(fade / 2, s0) : 0;
    const std::size_t tail = join_next ? std::min(fade - fade / 2, total - s1) : 0;
    const std::size_t a = s0 - lead, z = s1 + tail;
    const std::size_t n = z - a;

    std::mt19937_64 rng0(split_seed(config.seed, 1000 + 2 * b));
    std::mt19937_64 rng1(split_seed(config.seed, 1001 + 2 * b));
    const auto x0 = shaped_noise(n, prep.h, rng0);
    const auto x1 = shaped_noise(n, prep.h, rng1);

    const double in_w = static_cast<double>(fade);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t t = a + i;
      double w = 1.0;
      // linear weights: outgoing + incoming = 1 across each boundary
      if (join_prev && fade > 0) {
        const double d = static_cast<double>(t) + 0.5 - (static_cast<double>(s0) - fade / 2.0);
        if (d < in_w) w = std::clamp(d / in_w, 0.0, 1.0);
      }
      if (join_next && fade > 0) {
        const double d = (static_cast<double>(s1) + (fade - fade / 2.0)) - (static_cast<double>(t) + 0.5);
        if (d < in_w) w = std::min(w, std::clamp(d / in_w, 0.0, 1.0));
      }
      const double v0 = rms * x0[i];
      rec.channels[0].samples[t] += w * v0;
      rec.channels[1].samples[t] += w * (config.coupling * v0 + cross * rms * x1[i]);
    }
  }
  if (report) *report = std::move(rep);
  return rec;
}

Generated generate(const GeneratorConfig& config) {
  Generated g;
  g.labels = gen_state_sequence(config);
  const auto profiles = profiles_for(config);
  g.recording = gen_signal(g.labels, profiles, config, &g.report);
  return g;
}

Generated gen_adult_recording(const GeneratorConfig& config) {
  if (config.domain != Domain::kAdult) throw ConfigError("gen_adult_recording needs an adult-domain config");
  return generate(config);
}

std::vector<double> expected_psd(const GenerationReport& report, std::span<const StateProfile> profiles,
                                 double fs, std::span<const double> freqs) {
  std::vector<double> out(freqs.size(), 0.0);
  double total = 0.0;
  for (const auto& b : report.bouts) total += b.end_s - b.start_s;
  if (!(total > 0.0)) throw DataError("generation report has no bouts");
  std::vector<std::pair<Stage, std::vector<double>>> responses;
  for (const auto& b : report.bouts) {
    auto it = std::find_if(responses.begin(), responses.end(), [&](const auto& r) { return r.first == b.stage; });
    if (it == responses.end()) {
      const auto h = shaping_filter(find_profile(profiles, b.stage), fs);
      std::vector<double> r(freqs.size());
      for (std::size_t k = 0; k < freqs.size(); ++k) r[k] = 2.0 * energy_response(h, freqs[k], fs) / fs;
      responses.push_back({b.stage, std::move(r)});
      it = std::prev(responses.end());
    }
    const double w = (b.end_s - b.start_s) / total * b.rms * b.rms;
    for (std::size_t k = 0; k < freqs.size(); ++k) out[k] += w * it->second[k];
  }
  return out;
}

std::vector<GeneratorConfig> subject_configs(const GeneratorConfig& base, std::size_t count,
                                             const std::string& prefix) {
  std::vector<GeneratorConfig> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto c = base;
    c.seed = split_seed(base.seed, 0x5EED0000ULL + i);
    char id[32];
    std::snprintf(id, sizeof id, "%s%02zu", prefix.c_str(), i + 1);
    c.subject_id = id;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace fsn::synth
