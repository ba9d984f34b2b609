#include "fetalsleep/equalise.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fetalsleep/error.hpp"

namespace fsn::equalise {

namespace {

std::string fmt(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

bool same_grid(const dsp::PsdEstimate& a, const dsp::PsdEstimate& b) {
  if (a.freqs_hz.size() != b.freqs_hz.size()) return false;
  for (std::size_t k = 0; k < a.freqs_hz.size(); ++k)
    if (std::fabs(a.freqs_hz[k] - b.freqs_hz[k]) > 1e-9 * std::max(1.0, std::fabs(a.freqs_hz[k])))
      return false;
  return true;
}

}  // namespace

void EqualisationMap::validate() const {
  if (freqs_hz.size() < 2) throw GridError("equalisation map needs at least two frequency bins");
  for (std::size_t k = 1; k < freqs_hz.size(); ++k)
    if (!(freqs_hz[k] > freqs_hz[k - 1])) throw GridError("map frequencies must be strictly increasing");
  for (const auto& g : gains) {
    if (g.size() != freqs_hz.size()) throw GridError("gain vector length differs from the grid");
    for (double v : g)
      if (!(v >= 0.0) || !std::isfinite(v)) throw GridError("gains must be finite and non-negative");
  }
  if (mapping.size() != gains.size()) throw ConfigError("channel mapping must cover every gain channel");
  std::set<std::size_t> src, dst;
  for (auto [s, t] : mapping) {
    if (!src.insert(s).second || !dst.insert(t).second)
      throw ConfigError("channel mapping must be a bijection");
    if (s >= gains.size()) throw ConfigError("mapping source channel out of range");
  }
}

dsp::PsdEstimate mean_group_psd(std::span<const Recording> recordings, std::size_t channel,
                                const GroupPsdOptions& options) {
  if (recordings.empty()) throw EstimateError("no recordings to average");
  const double fs = recordings.front().sample_rate_hz;
  dsp::PsdEstimate mean;
  std::size_t epochs = 0;
  for (const auto& rec : recordings) {
    rec.validate();
    if (std::fabs(rec.sample_rate_hz - fs) > 1e-9)
      throw EstimateError("recordings in a group must share one sample rate");
    if (channel >= rec.channels.size())
      throw EstimateError("recording '" + rec.subject_id + "' has no channel " + std::to_string(channel));
    const auto epoch_len = static_cast<std::size_t>(std::llround(options.epoch_len_s * fs));
    const std::span<const double> x = rec.channels[channel].samples;
    for (std::size_t start = 0; start + epoch_len <= x.size(); start += epoch_len) {
      auto psd = dsp::welch_psd(x.subspan(start, epoch_len), fs, options.nfft, options.overlap_frac,
                                dsp::WindowKind::kHann);
      if (epochs == 0) {
        mean = std::move(psd);
      } else {
        for (std::size_t k = 0; k < mean.power.size(); ++k) mean.power[k] += psd.power[k];
      }
      ++epochs;
    }
  }
  if (epochs == 0) throw EstimateError("no complete epochs available for the group PSD");
  for (auto& p : mean.power) p /= static_cast<double>(epochs);
  mean.num_epochs_averaged = epochs;
  return mean;
}

EqualisationMap compute_gain_map(std::span<const dsp::PsdEstimate> target_psd,
                                 std::span<const dsp::PsdEstimate> source_psd,
                                 const std::vector<std::pair<std::size_t, std::size_t>>& mapping,
                                 double epsilon) {
  if (source_psd.empty()) throw GridError("no source PSDs");
  EqualisationMap map;
  map.freqs_hz = source_psd.front().freqs_hz;
  map.epsilon = epsilon;
  map.mapping = mapping;
  map.gains.assign(source_psd.size(), {});
  std::size_t large = 0;
  for (auto [src, dst] : mapping) {
    if (src >= source_psd.size() || dst >= target_psd.size())
      throw ConfigError("channel mapping refers to a missing PSD");
    const auto& s = source_psd[src];
    const auto& t = target_psd[dst];
    if (!same_grid(s, t) || !same_grid(s, source_psd.front()))
      throw GridError("target and source PSDs are on different frequency grids");
    auto& g = map.gains[src];
    g.resize(s.power.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
      g[k] = t.power[k] / (s.power[k] + epsilon);
      if (g[k] > kLargeGainWarning) ++large;
    }
  }
  map.validate();
  if (large > 0)
    std::cerr << "warning: " << large << " equalisation gain bin(s) exceed " << kLargeGainWarning << "\n";
  return map;
}

std::vector<double> sqrt_gain_on_grid(const EqualisationMap& map, std::size_t channel,
                                      std::size_t nfft, double fs) {
  if (channel >= map.gains.size()) throw GridError("map has no channel " + std::to_string(channel));
  const auto& f = map.freqs_hz;
  const auto& g = map.gains[channel];
  if (f.front() > 1e-12 || f.back() < fs / 2.0 - 1e-9)
    throw GridError("equalisation map covers [" + fmt(f.front()) + ", " + fmt(f.back()) +
                    "] Hz but the signal spans [0, " + fmt(fs / 2.0) + "] Hz");
  std::vector<double> root(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) root[k] = std::sqrt(g[k]);

  std::vector<double> out(nfft / 2 + 1);
  std::size_t j = 0;
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double fk = k * fs / static_cast<double>(nfft);
    if (fk >= f.back()) {
      out[k] = root.back();
      continue;
    }
    while (j + 1 < f.size() && f[j + 1] <= fk) ++j;
    const double t = (fk - f[j]) / (f[j + 1] - f[j]);
    out[k] = root[j] + t * (root[j + 1] - root[j]);
  }
  return out;
}

void equalise_spectrum(std::vector<dsp::Complex>& spectrum, std::span<const double> sqrt_gain) {
  const std::size_t n = spectrum.size();
  if (n < 2 || n % 2 != 0) throw LengthError("equalised spectrum length must be even");
  if (sqrt_gain.size() != n / 2 + 1) throw GridError("gain vector does not match the spectrum");
  for (std::size_t k = 0; k <= n / 2; ++k) spectrum[k] *= sqrt_gain[k];
  spectrum[0] = {spectrum[0].real(), 0.0};
  spectrum[n / 2] = {spectrum[n / 2].real(), 0.0};
  for (std::size_t k = 1; k < n / 2; ++k) spectrum[n - k] = std::conj(spectrum[k]);
}

std::vector<double> apply_equalisation(std::span<const double> signal, const EqualisationMap& map,
                                       std::size_t channel, double fs, EqualisationReport* report) {
  if (signal.size() < 2) throw LengthError("equalisation needs at least 2 samples");
  const std::size_t nfft = dsp::next_pow2(signal.size());
  const auto root = sqrt_gain_on_grid(map, channel, nfft, fs);
  auto spectrum = dsp::rfft(signal, nfft);
  equalise_spectrum(spectrum, root);
  dsp::fft_inplace(spectrum, true);

  std::vector<double> out(signal.size());
  double peak = 0.0, imag = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = spectrum[i].real();
    peak = std::max(peak, std::fabs(out[i]));
    imag = std::max(imag, std::fabs(spectrum[i].imag()));
  }
  if (imag > 1e-10 * peak && peak > 0.0)
    throw NumericError("imaginary residual " + fmt(imag) + " after Hermitian reconstruction");
  if (report) *report = {nfft, imag, peak};
  return out;
}

Recording equalisation_pipeline(const Recording& source, const EqualisationMap& map,
                                const PipelineOptions& options) {
  source.validate();
  if (source.channels.size() > map.num_channels())
    throw GridError("map has fewer channels than the recording");
  const std::size_t taps =
      options.num_taps ? options.num_taps : dsp::default_num_taps(source.sample_rate_hz);
  const auto filter =
      dsp::design_fir_bandpass(options.band_low_hz, options.band_high_hz, source.sample_rate_hz, taps);
  Recording out;
  out.sample_rate_hz = source.sample_rate_hz;
  out.subject_id = source.subject_id;
  for (std::size_t c = 0; c < source.channels.size(); ++c) {
    const auto eq = apply_equalisation(source.channels[c].samples, map, c, source.sample_rate_hz);
    out.channels.push_back({source.channels[c].label, dsp::filter_zero_phase(eq, filter)});
  }
  return out;
}

std::string map_to_csv(const EqualisationMap& map) {
  std::string out = "freq_hz";
  for (std::size_t c = 0; c < map.gains.size(); ++c) out += ",gain_ch" + std::to_string(c);
  out += '\n';
  for (std::size_t k = 0; k < map.freqs_hz.size(); ++k) {
    out += fmt(map.freqs_hz[k]);
    for (const auto& g : map.gains) out += "," + fmt(g[k]);
    out += '\n';
  }
  return out;
}

std::string map_sidecar_json(const EqualisationMap& map) {
  nlohmann::json j;
  j["epsilon"] = map.epsilon;
  j["mapping"] = nlohmann::json::array();
  for (auto [s, t] : map.mapping) j["mapping"].push_back({{"source", s}, {"target", t}});
  j["num_bins"] = map.freqs_hz.size();
  return j.dump(2) + "\n";
}

EqualisationMap map_from_files(std::string_view csv, std::string_view sidecar_json) {
  EqualisationMap map;
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line.rfind("freq_hz", 0) != 0) throw ParseError("map CSV lacks header");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  map.gains.assign(columns, {});
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<double> cells;
    std::size_t start = 0;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) comma = line.size();
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(line.data() + start, line.data() + comma, v);
      if (ec != std::errc() || ptr != line.data() + comma)
        throw ParseError("bad number in map CSV row " + std::to_string(row));
      cells.push_back(v);
      start = comma + 1;
    }
    if (cells.size() != columns + 1) throw ParseError("wrong column count in map CSV row " + std::to_string(row));
    map.freqs_hz.push_back(cells[0]);
    for (std::size_t c = 0; c < columns; ++c) map.gains[c].push_back(cells[c + 1]);
  }
  try {
    const auto j = nlohmann::json::parse(sidecar_json);
    map.epsilon = j.at("epsilon").get<double>();
    for (const auto& m : j.at("mapping"))
      map.mapping.emplace_back(m.at("source").get<std::size_t>(), m.at("target").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad map sidecar: ") + e.what());
  }
  map.validate();
  return map;
}

std::string psd_to_csv(const dsp::PsdEstimate& psd) {
  std::string out = "freq_hz,power\n";
  for (std::size_t k = 0; k < psd.freqs_hz.size(); ++k) out += fmt(psd.freqs_hz[k]) + "," + fmt(psd.power[k]) + "\n";
  return out;
}

}  // namespace fsn::equalise
