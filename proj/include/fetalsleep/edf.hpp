#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fetalsleep/recording.hpp"

namespace fsn::edf {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::string_view kAnnotationLabel = "EDF Annotations";

struct SignalHeader {
  std::string label;         // 16
  std::string transducer;    // 80
  std::string physical_dim;  // 8
  double physical_min = 0.0;
  double physical_max = 0.0;
  int digital_min = -32768;
  int digital_max = 32767;
  std::string prefilter;  // 80
  int samples_per_record = 0;
  std::string reserved;  // 32

  bool is_annotation() const { return label == kAnnotationLabel; }
  /// Physical size of one digital step, in the header's physical unit.
  double quantum() const { return (physical_max - physical_min) / (digital_max - digital_min); }
};

struct Header {
  std::string version = "0";
  std::string patient_id;
  std::string recording_id;
  std::string start_date = "01.01.00";
  std::string start_time = "00.00.00";
  int header_bytes = 256;
  std::string reserved;  // 44; "EDF+C" marks EDF+
  int num_records = 0;
  double record_duration_s = 1.0;
  std::vector<SignalHeader> signals;

  int num_signals() const { return static_cast<int>(signals.size()); }
  std::size_t record_bytes() const;
};

struct Signal {
  std::vector<double> samples;  // physical values converted to µV
  std::string annotation_bytes;  // raw TAL bytes, annotation signals only
};

struct File {
  Header header;
  std::vector<Signal> signals;

  /// Collects same-rate signals into a Recording. With no labels given, all
  /// non-annotation signals sharing the first signal's rate are used.
  Recording to_recording(const std::vector<std::string>& labels = {},
                         const std::string& subject_id = {}) const;
};

/// Multiplier from a physical dimension string to µV ("uV" 1, "mV" 1e3, "V" 1e6).
double microvolt_scale(std::string_view physical_dim);

File parse_edf(std::span<const std::uint8_t> bytes);
Bytes write_edf(const File& file);
/// Writes `recording` using `header` for all metadata; header signal count
/// must match the channel count and num_records is derived from the data.
Bytes write_edf(const Header& header, const Recording& recording);

/// Header for `recording` with the given record length. Physical ranges are
/// taken symmetric around zero from the largest magnitude in each channel,
/// rounded outward, and 16-bit digital ranges.
Header make_header(const Recording& recording, double record_duration_s = 1.0);

struct Annotation {
  double onset_s = 0.0;
  double duration_s = 0.0;
  std::string text;
  bool operator==(const Annotation&) const = default;
};

/// Decodes EDF+ time-stamped annotation lists. Record time-keeping entries
/// (empty text) are skipped.
std::vector<Annotation> parse_tal(std::string_view bytes);
std::string encode_tal(const std::vector<Annotation>& annotations);

using StageMap = std::map<std::string, Stage, std::less<>>;

/// Rechtschaffen & Kales vocabulary as written by Sleep-EDF, plus the bare
/// symbols {W, R, 1, 2, 3, 4, Movement, ?}. Stages 3 and 4 both map to N3;
/// movement and unknown map to kExcluded.
const StageMap& rk_stage_map();

/// Maps (onset, duration, stage-string) annotations to a LabelTrack.
/// Unknown stage strings raise ParseError naming the string.
LabelTrack parse_hypnogram(std::string_view annotation_bytes, const StageMap& stage_map = rk_stage_map());
/// Same, taking a whole EDF+ hypnogram file.
LabelTrack parse_hypnogram_file(std::span<const std::uint8_t> edf_bytes,
                                const StageMap& stage_map = rk_stage_map());

/// EDF+C file carrying only an annotation signal with one TAL per record.
Bytes make_annotation_file(const std::vector<Annotation>& annotations, double total_duration_s);

}  // namespace fsn::edf
