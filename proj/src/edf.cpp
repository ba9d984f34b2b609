#include "fetalsleep/edf.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "fetalsleep/error.hpp"

namespace fsn::edf {

namespace {

constexpr char kTalOnsetEnd = 0x14;
constexpr char kTalDurationSep = 0x15;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\0')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\0')) s.remove_suffix(1);
  return s;
}

/// Sequential reader over the fixed-width header fields.
class FieldReader {
 public:
  explicit FieldReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  std::string_view raw(std::size_t width) {
    if (pos_ + width > bytes_.size()) throw ParseError("EDF header truncated", pos_);
    std::string_view field(reinterpret_cast<const char*>(bytes_.data()) + pos_, width);
    for (char c : field) {
      auto u = static_cast<unsigned char>(c);
      if (u < 32 || u > 126) throw ParseError("non-ASCII byte in EDF header field", pos_);
    }
    pos_ += width;
    return field;
  }

  std::string text(std::size_t width) { return std::string(trim(raw(width))); }

  double decimal(std::size_t width, const char* name) {
    const std::size_t at = pos_;
    auto field = trim(raw(width));
    double value = 0.0;
    auto first = field.data();
    if (!field.empty() && field.front() == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, field.data() + field.size(), value);
    if (field.empty() || ec != std::errc() || ptr != field.data() + field.size())
      throw ParseError(std::string("malformed numeric field '") + name + "'", at);
    return value;
  }

  int integer(std::size_t width, const char* name) {
    const std::size_t at = pos_;
    auto field = trim(raw(width));
    int value = 0;
    auto first = field.data();
    if (!field.empty() && field.front() == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, field.data() + field.size(), value);
    if (field.empty() || ec != std::errc() || ptr != field.data() + field.size())
      throw ParseError(std::string("malformed integer field '") + name + "'", at);
    return value;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void put_field(std::string& out, std::string_view value, std::size_t width, const char* name) {
  if (value.size() > width)
    throw RangeError(std::string("EDF field '") + name + "' exceeds " + std::to_string(width) +
                     " characters: '" + std::string(value) + "'");
  for (char c : value) {
    auto u = static_cast<unsigned char>(c);
    if (u < 32 || u > 126)
      throw RangeError(std::string("EDF field '") + name + "' contains non-printable ASCII");
  }
  out.append(value);
  out.append(width - value.size(), ' ');
}

/// Shortest decimal text of at most `width` characters that parses back to a
/// value close to `v`.
std::string format_number(double v, std::size_t width) {
  if (std::isfinite(v) && v == std::round(v) && std::fabs(v) < 1e7) {
    auto s = std::to_string(static_cast<long long>(v));
    if (s.size() <= width) return s;
  }
  char buf[64];
  for (int precision = static_cast<int>(width); precision >= 1; --precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strlen(buf) <= width) return buf;
  }
  throw RangeError("cannot format " + std::to_string(v) + " into " + std::to_string(width) +
                   " characters");
}

double reparse(const std::string& text) {
  double v = 0.0;
  std::from_chars(text.data(), text.data() + text.size(), v);
  return v;
}

void check_signal_header(const SignalHeader& s, std::size_t index) {
  const auto name = "signal " + std::to_string(index) + " ('" + s.label + "')";
  if (!(s.physical_max > s.physical_min))
    throw ParseError(name + ": physical_max must exceed physical_min");
  if (!(s.digital_max > s.digital_min))
    throw ParseError(name + ": digital_max must exceed digital_min");
  if (s.digital_min < -32768 || s.digital_max > 32767)
    throw ParseError(name + ": digital range exceeds 16 bits");
  if (s.samples_per_record <= 0) throw ParseError(name + ": samples per record must be positive");
}

std::int16_t read_i16(const std::uint8_t* p) {
  return static_cast<std::int16_t>(static_cast<std::uint16_t>(p[0]) |
                                   (static_cast<std::uint16_t>(p[1]) << 8));
}

void write_i16(std::string& out, int v) {
  auto u = static_cast<std::uint16_t>(static_cast<std::int16_t>(v));
  out.push_back(static_cast<char>(u & 0xff));
  out.push_back(static_cast<char>(u >> 8));
}

}  // namespace

std::size_t Header::record_bytes() const {
  std::size_t n = 0;
  for (const auto& s : signals) n += 2 * static_cast<std::size_t>(s.samples_per_record);
  return n;
}

double microvolt_scale(std::string_view dim) {
  dim = trim(dim);
  if (dim == "mV") return 1e3;
  if (dim == "V") return 1e6;
  if (dim == "nV") return 1e-3;
  return 1.0;
}

File parse_edf(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 256) throw ParseError("file shorter than the 256-byte EDF header", bytes.size());
  FieldReader in(bytes);
  File file;
  Header& h = file.header;
  h.version = in.text(8);
  h.patient_id = in.text(80);
  h.recording_id = in.text(80);
  h.start_date = in.text(8);
  h.start_time = in.text(8);
  const std::size_t header_bytes_at = in.offset();
  h.header_bytes = in.integer(8, "header bytes");
  h.reserved = in.text(44);
  h.num_records = in.integer(8, "number of data records");
  h.record_duration_s = in.decimal(8, "record duration");
  const std::size_t ns_at = in.offset();
  const int ns = in.integer(4, "number of signals");
  if (ns <= 0) throw ParseError("number of signals must be positive", ns_at);
  if (h.header_bytes != 256 + 256 * ns)
    throw ParseError("header byte count " + std::to_string(h.header_bytes) +
                         " inconsistent with " + std::to_string(ns) + " signals",
                     header_bytes_at);
  if (bytes.size() < static_cast<std::size_t>(h.header_bytes))
    throw ParseError("EDF signal headers truncated", bytes.size());

  h.signals.resize(ns);
  for (auto& s : h.signals) s.label = in.text(16);
  for (auto& s : h.signals) s.transducer = in.text(80);
  for (auto& s : h.signals) s.physical_dim = in.text(8);
  for (auto& s : h.signals) s.physical_min = in.decimal(8, "physical minimum");
  for (auto& s : h.signals) s.physical_max = in.decimal(8, "physical maximum");
  for (auto& s : h.signals) s.digital_min = in.integer(8, "digital minimum");
  for (auto& s : h.signals) s.digital_max = in.integer(8, "digital maximum");
  for (auto& s : h.signals) s.prefilter = in.text(80);
  for (auto& s : h.signals) s.samples_per_record = in.integer(8, "samples per record");
  for (auto& s : h.signals) s.reserved = in.text(32);
  for (std::size_t i = 0; i < h.signals.size(); ++i) {
    try {
      check_signal_header(h.signals[i], i);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), 256 + 216 * ns);
    }
  }

  const std::size_t record_bytes = h.record_bytes();
  const std::size_t available = bytes.size() - h.header_bytes;
  if (h.num_records == -1) {
    if (available % record_bytes != 0)
      throw ParseError("record count unknown and data length is not a whole number of records",
                       bytes.size());
    h.num_records = static_cast<int>(available / record_bytes);
  }
  if (h.num_records < 0) throw ParseError("negative number of data records", 236);
  const std::size_t needed = record_bytes * static_cast<std::size_t>(h.num_records);
  if (available < needed)
    throw ParseError("data records truncated: need " + std::to_string(needed) + " bytes, have " +
                         std::to_string(available),
                     bytes.size());

  file.signals.resize(ns);
  for (int i = 0; i < ns; ++i) {
    const auto& sh = h.signals[i];
    if (sh.is_annotation()) continue;
    file.signals[i].samples.reserve(static_cast<std::size_t>(sh.samples_per_record) * h.num_records);
  }
  const std::uint8_t* p = bytes.data() + h.header_bytes;
  for (int r = 0; r < h.num_records; ++r) {
    for (int i = 0; i < ns; ++i) {
      const auto& sh = h.signals[i];
      const std::size_t n = static_cast<std::size_t>(sh.samples_per_record);
      if (sh.is_annotation()) {
        file.signals[i].annotation_bytes.append(reinterpret_cast<const char*>(p), 2 * n);
      } else {
        const double gain = (sh.physical_max - sh.physical_min) / (sh.digital_max - sh.digital_min);
        const double unit = microvolt_scale(sh.physical_dim);
        auto& out = file.signals[i].samples;
        for (std::size_t k = 0; k < n; ++k) {
          const double d = read_i16(p + 2 * k);
          out.push_back(((d - sh.digital_min) * gain + sh.physical_min) * unit);
        }
      }
      p += 2 * n;
    }
  }
  return file;
}

Bytes write_edf(const File& file) {
  const Header& h = file.header;
  const int ns = h.num_signals();
  if (ns <= 0) throw RangeError("EDF file needs at least one signal");
  if (static_cast<int>(file.signals.size()) != ns)
    throw RangeError("signal data count does not match header");

  std::string out;
  out.reserve(256 + 256 * ns + h.record_bytes() * std::max(h.num_records, 0));
  put_field(out, h.version, 8, "version");
  put_field(out, h.patient_id, 80, "patient id");
  put_field(out, h.recording_id, 80, "recording id");
  put_field(out, h.start_date, 8, "start date");
  put_field(out, h.start_time, 8, "start time");
  put_field(out, std::to_string(256 + 256 * ns), 8, "header bytes");
  put_field(out, h.reserved, 44, "reserved");
  put_field(out, std::to_string(h.num_records), 8, "number of data records");
  put_field(out, format_number(h.record_duration_s, 8), 8, "record duration");
  put_field(out, std::to_string(ns), 4, "number of signals");

  std::vector<double> pmin(ns), pmax(ns);
  for (int i = 0; i < ns; ++i) {
    const auto& s = h.signals[i];
    check_signal_header(s, i);
  }
  for (const auto& s : h.signals) put_field(out, s.label, 16, "label");
  for (const auto& s : h.signals) put_field(out, s.transducer, 80, "transducer");
  for (const auto& s : h.signals) put_field(out, s.physical_dim, 8, "physical dimension");
  for (int i = 0; i < ns; ++i) {
    auto text = format_number(h.signals[i].physical_min, 8);
    pmin[i] = reparse(text);
    put_field(out, text, 8, "physical minimum");
  }
  for (int i = 0; i < ns; ++i) {
    auto text = format_number(h.signals[i].physical_max, 8);
    pmax[i] = reparse(text);
    put_field(out, text, 8, "physical maximum");
  }
  for (const auto& s : h.signals) put_field(out, std::to_string(s.digital_min), 8, "digital minimum");
  for (const auto& s : h.signals) put_field(out, std::to_string(s.digital_max), 8, "digital maximum");
  for (const auto& s : h.signals) put_field(out, s.prefilter, 80, "prefilter");
  for (const auto& s : h.signals)
    put_field(out, std::to_string(s.samples_per_record), 8, "samples per record");
  for (const auto& s : h.signals) put_field(out, s.reserved, 32, "signal reserved");

  for (int i = 0; i < ns; ++i) {
    const auto& s = h.signals[i];
    const std::size_t expected = static_cast<std::size_t>(s.samples_per_record) * h.num_records;
    if (s.is_annotation()) {
      if (file.signals[i].annotation_bytes.size() > 2 * expected)
        throw RangeError("annotation bytes exceed the declared record space");
    } else if (file.signals[i].samples.size() != expected) {
      throw RangeError("signal '" + s.label + "' has " +
                       std::to_string(file.signals[i].samples.size()) + " samples, header implies " +
                       std::to_string(expected));
    }
  }

  for (int r = 0; r < h.num_records; ++r) {
    for (int i = 0; i < ns; ++i) {
      const auto& s = h.signals[i];
      const std::size_t n = static_cast<std::size_t>(s.samples_per_record);
      if (s.is_annotation()) {
        const auto& raw = file.signals[i].annotation_bytes;
        const std::size_t begin = std::min(raw.size(), r * 2 * n);
        const std::size_t len = std::min(raw.size() - begin, 2 * n);
        out.append(raw, begin, len);
        out.append(2 * n - len, '\0');
        continue;
      }
      const double unit = microvolt_scale(s.physical_dim);
      const double span = pmax[i] - pmin[i];
      const double dspan = static_cast<double>(s.digital_max) - s.digital_min;
      const double tol = 1e-9 * std::max(std::fabs(pmin[i]), std::fabs(pmax[i]));
      const double* src = file.signals[i].samples.data() + r * n;
      for (std::size_t k = 0; k < n; ++k) {
        const double v = src[k] / unit;
        if (!(v >= pmin[i] - tol && v <= pmax[i] + tol))
          throw RangeError("sample " + std::to_string(r * n + k) + " of signal '" + s.label +
                           "' (" + std::to_string(v) + ") outside physical range [" +
                           std::to_string(pmin[i]) + ", " + std::to_string(pmax[i]) + "]");
        double d = std::round((v - pmin[i]) / span * dspan + s.digital_min);
        d = std::clamp(d, static_cast<double>(s.digital_min), static_cast<double>(s.digital_max));
        write_i16(out, static_cast<int>(d));
      }
    }
  }
  return Bytes(out.begin(), out.end());
}

Bytes write_edf(const Header& header, const Recording& recording) {
  recording.validate();
  if (header.num_signals() != static_cast<int>(recording.channels.size()))
    throw RangeError("header declares " + std::to_string(header.num_signals()) +
                     " signals, recording has " + std::to_string(recording.channels.size()));
  File file;
  file.header = header;
  const auto n = recording.num_samples();
  for (const auto& s : header.signals) {
    if (s.is_annotation()) throw RangeError("recording cannot fill an annotation signal");
    if (s.samples_per_record != header.signals.front().samples_per_record)
      throw RangeError("a Recording requires equal samples per record for every signal");
  }
  const auto spr = static_cast<std::size_t>(header.signals.front().samples_per_record);
  if (n % spr != 0)
    throw LengthError("recording length " + std::to_string(n) +
                      " is not a whole number of data records of " + std::to_string(spr));
  file.header.num_records = static_cast<int>(n / spr);
  for (const auto& ch : recording.channels) file.signals.push_back({ch.samples, {}});
  return write_edf(file);
}

Header make_header(const Recording& recording, double record_duration_s) {
  recording.validate();
  Header h;
  h.patient_id = recording.subject_id.empty() ? "X" : recording.subject_id;
  h.recording_id = "Startdate X";
  const double spr = recording.sample_rate_hz * record_duration_s;
  if (std::fabs(spr - std::round(spr)) > 1e-9 || spr < 1)
    throw ArgumentError("record duration does not hold a whole number of samples");
  for (const auto& ch : recording.channels) {
    SignalHeader s;
    s.label = ch.label.substr(0, 16);
    s.transducer = "AgAgCl electrode";
    s.physical_dim = "uV";
    double peak = 1.0;
    for (double v : ch.samples) peak = std::max(peak, std::fabs(v));
    peak = std::ceil(peak);
    s.physical_min = -peak;
    s.physical_max = peak;
    s.samples_per_record = static_cast<int>(std::round(spr));
    h.signals.push_back(std::move(s));
  }
  h.header_bytes = 256 + 256 * h.num_signals();
  h.record_duration_s = record_duration_s;
  h.num_records = static_cast<int>(recording.num_samples() / static_cast<std::size_t>(std::round(spr)));
  return h;
}

Recording File::to_recording(const std::vector<std::string>& labels,
                             const std::string& subject_id) const {
  std::vector<int> picks;
  if (labels.empty()) {
    int spr = -1;
    for (int i = 0; i < header.num_signals(); ++i) {
      const auto& s = header.signals[i];
      if (s.is_annotation()) continue;
      if (spr < 0) spr = s.samples_per_record;
      if (s.samples_per_record == spr) picks.push_back(i);
    }
  } else {
    for (const auto& want : labels) {
      auto it = std::find_if(header.signals.begin(), header.signals.end(),
                             [&](const SignalHeader& s) { return s.label == want; });
      if (it == header.signals.end()) throw DataError("EDF has no signal labelled '" + want + "'");
      picks.push_back(static_cast<int>(it - header.signals.begin()));
    }
  }
  if (picks.empty()) throw DataError("EDF holds no data signals");
  Recording rec;
  rec.subject_id = subject_id;
  const int spr = header.signals[picks.front()].samples_per_record;
  rec.sample_rate_hz = spr / header.record_duration_s;
  for (int i : picks) {
    if (header.signals[i].samples_per_record != spr)
      throw DataError("signals '" + header.signals[picks.front()].label + "' and '" +
                      header.signals[i].label + "' have different sample rates");
    rec.channels.push_back({header.signals[i].label, signals[i].samples});
  }
  return rec;
}

std::vector<Annotation> parse_tal(std::string_view bytes) {
  std::vector<Annotation> out;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    if (bytes[pos] == '\0') {
      ++pos;
      continue;
    }
    const std::size_t end = bytes.find('\0', pos);
    const std::size_t tal_end = end == std::string_view::npos ? bytes.size() : end;
    std::string_view tal = bytes.substr(pos, tal_end - pos);
    const std::size_t head_end = tal.find(kTalOnsetEnd);
    if (head_end == std::string_view::npos) throw ParseError("TAL without onset terminator", pos);
    std::string_view head = tal.substr(0, head_end);
    std::string_view onset_text = head, duration_text;
    if (auto d = head.find(kTalDurationSep); d != std::string_view::npos) {
      onset_text = head.substr(0, d);
      duration_text = head.substr(d + 1);
    }
    auto number = [&](std::string_view text, const char* what) {
      if (!text.empty() && text.front() == '+') text.remove_prefix(1);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (text.empty() || ec != std::errc() || ptr != text.data() + text.size())
        throw ParseError(std::string("malformed TAL ") + what, pos);
      return v;
    };
    if (onset_text.empty() || (onset_text.front() != '+' && onset_text.front() != '-'))
      throw ParseError("TAL onset must start with a sign", pos);
    const double onset = number(onset_text, "onset");
    const double duration = duration_text.empty() ? 0.0 : number(duration_text, "duration");
    std::string_view rest = tal.substr(head_end + 1);
    while (!rest.empty()) {
      const std::size_t sep = rest.find(kTalOnsetEnd);
      std::string_view text = rest.substr(0, sep);
      if (!text.empty()) out.push_back({onset, duration, std::string(text)});
      if (sep == std::string_view::npos) break;
      rest.remove_prefix(sep + 1);
    }
    pos = tal_end;
  }
  return out;
}

std::string encode_tal(const std::vector<Annotation>& annotations) {
  std::string out;
  auto num = [](double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
  };
  for (const auto& a : annotations) {
    out += (a.onset_s < 0 ? "" : "+") + num(a.onset_s);
    if (a.duration_s > 0) {
      out += kTalDurationSep;
      out += num(a.duration_s);
    }
    out += kTalOnsetEnd;
    out += a.text;
    out += kTalOnsetEnd;
    out += '\0';
  }
  return out;
}

const StageMap& rk_stage_map() {
  static const StageMap map{
      {"Sleep stage W", Stage::kWake}, {"Sleep stage R", Stage::kRem},
      {"Sleep stage 1", Stage::kN1},   {"Sleep stage 2", Stage::kN2},
      {"Sleep stage 3", Stage::kN3},   {"Sleep stage 4", Stage::kN3},
      {"Sleep stage ?", Stage::kExcluded}, {"Movement time", Stage::kExcluded},
      {"W", Stage::kWake},             {"R", Stage::kRem},
      {"1", Stage::kN1},               {"2", Stage::kN2},
      {"3", Stage::kN3},               {"4", Stage::kN3},
      {"Movement", Stage::kExcluded},  {"?", Stage::kExcluded},
  };
  return map;
}

LabelTrack parse_hypnogram(std::string_view annotation_bytes, const StageMap& stage_map) {
  LabelTrack track;
  for (const auto& a : parse_tal(annotation_bytes)) {
    auto it = stage_map.find(a.text);
    if (it == stage_map.end()) throw ParseError("unrecognised stage annotation '" + a.text + "'");
    if (a.duration_s <= 0) continue;
    track.intervals.push_back({a.onset_s, a.onset_s + a.duration_s, it->second});
  }
  std::stable_sort(track.intervals.begin(), track.intervals.end(),
                   [](const LabelInterval& x, const LabelInterval& y) { return x.start_s < y.start_s; });
  track.validate();
  return track;
}

LabelTrack parse_hypnogram_file(std::span<const std::uint8_t> edf_bytes, const StageMap& stage_map) {
  const File file = parse_edf(edf_bytes);
  std::string tal;
  for (int i = 0; i < file.header.num_signals(); ++i)
    if (file.header.signals[i].is_annotation()) tal += file.signals[i].annotation_bytes;
  return parse_hypnogram(tal, stage_map);
}

Bytes make_annotation_file(const std::vector<Annotation>& annotations, double total_duration_s) {
  // Time-keeping TAL with an empty annotation: "+0\x14\x14\0".
  std::string tal = std::string("+0") + kTalOnsetEnd + kTalOnsetEnd + '\0';
  tal += encode_tal(annotations);
  File file;
  file.header.version = "0";
  file.header.patient_id = "X";
  file.header.recording_id = "Startdate X";
  file.header.reserved = "EDF+C";
  file.header.num_records = 1;
  file.header.record_duration_s = total_duration_s;
  SignalHeader s;
  s.label = std::string(kAnnotationLabel);
  s.physical_min = -1;
  s.physical_max = 1;
  s.samples_per_record = static_cast<int>((tal.size() + 1) / 2);
  file.header.signals.push_back(s);
  file.header.header_bytes = 512;
  file.signals.push_back({{}, tal});
  return write_edf(file);
}

}  // namespace fsn::edf
