#include "fetalsleep/container.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "fetalsleep/error.hpp"

namespace fsn::container {

namespace {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& pos, const char* what) {
  if (pos + sizeof(T) > bytes.size())
    throw ParseError(std::string("container truncated reading ") + what, pos);
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

std::string format_seconds(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

std::vector<std::uint8_t> encode(const Recording& recording) {
  recording.validate();
  if (recording.channels.size() > std::numeric_limits<std::uint16_t>::max())
    throw RangeError("too many channels for the container format");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(recording.channels.size()));
  put<double>(out, recording.sample_rate_hz);
  for (const auto& ch : recording.channels) {
    if (ch.samples.size() > std::numeric_limits<std::uint32_t>::max())
      throw RangeError("channel too long for the container format");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ch.samples.size()));
    out.reserve(out.size() + 4 * ch.samples.size());
    for (double v : ch.samples) put<float>(out, static_cast<float>(v));
  }
  return out;
}

Recording decode(std::span<const std::uint8_t> bytes, const std::string& subject_id) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ParseError("missing FSR1 magic", 0);
  std::size_t pos = 4;
  Recording rec;
  rec.subject_id = subject_id;
  const auto nch = take<std::uint16_t>(bytes, pos, "channel count");
  const std::size_t rate_at = pos;
  rec.sample_rate_hz = take<double>(bytes, pos, "sample rate");
  if (!(rec.sample_rate_hz > 0)) throw ParseError("sample rate must be positive", rate_at);
  for (std::uint16_t c = 0; c < nch; ++c) {
    const std::size_t len_at = pos;
    const auto n = take<std::uint32_t>(bytes, pos, "channel length");
    if (pos + 4ull * n > bytes.size()) throw ParseError("channel samples truncated", len_at);
    Channel ch;
    ch.label = "ch" + std::to_string(c);
    ch.samples.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, bytes.data() + pos + 4ull * i, 4);
      ch.samples[i] = v;
    }
    pos += 4ull * n;
    rec.channels.push_back(std::move(ch));
  }
  if (pos != bytes.size()) throw ParseError("trailing bytes after last channel", pos);
  try {
    rec.validate();
  } catch (const DataError& e) {
    throw ParseError(e.what());
  }
  return rec;
}

std::string encode_labels(const LabelTrack& track) {
  track.validate();
  std::string out;
  for (const auto& iv : track.intervals) {
    out += format_seconds(iv.start_s);
    out += '\t';
    out += format_seconds(iv.end_s);
    out += '\t';
    out += stage_token(iv.stage);
    out += '\n';
  }
  return out;
}

LabelTrack decode_labels(std::string_view text) {
  LabelTrack track;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    const std::size_t line_at = pos;
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    std::string_view fields[3];
    std::size_t start = 0;
    for (int f = 0; f < 3; ++f) {
      const std::size_t tab = line.find('\t', start);
      if (f < 2 && tab == std::string_view::npos)
        throw ParseError("label line " + std::to_string(line_no) + " needs 3 tab-separated fields",
                         line_at);
      fields[f] = line.substr(start, f < 2 ? tab - start : std::string_view::npos);
      start = tab + 1;
    }
    LabelInterval iv;
    for (int f = 0; f < 2; ++f) {
      double& dst = f == 0 ? iv.start_s : iv.end_s;
      auto [ptr, ec] = std::from_chars(fields[f].data(), fields[f].data() + fields[f].size(), dst);
      if (ec != std::errc() || ptr != fields[f].data() + fields[f].size())
        throw ParseError("bad time on label line " + std::to_string(line_no), line_at);
    }
    auto stage = stage_from_token(fields[2]);
    if (!stage)
      throw ParseError("unknown label token '" + std::string(fields[2]) + "' on line " +
                           std::to_string(line_no),
                       line_at);
    iv.stage = *stage;
    track.intervals.push_back(iv);
  }
  try {
    track.validate();
  } catch (const DataError& e) {
    throw ParseError(e.what());
  }
  return track;
}

std::filesystem::path labels_path(const std::filesystem::path& container_path) {
  auto p = container_path;
  p.replace_extension(".labels");
  return p;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void write_internal(const std::filesystem::path& path, const Recording& recording,
                    const LabelTrack& labels) {
  write_file(path, encode(recording));
  write_text(labels_path(path), encode_labels(labels));
}

std::pair<Recording, LabelTrack> read_internal(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  Recording rec = decode(bytes, path.stem().string());
  LabelTrack track;
  const auto lp = labels_path(path);
  if (std::filesystem::exists(lp)) {
    const auto text = read_file(lp);
    track = decode_labels(std::string_view(reinterpret_cast<const char*>(text.data()), text.size()));
  }
  return {std::move(rec), std::move(track)};
}

std::vector<std::filesystem::path> list_recordings(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".fsr") out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace fsn::container
