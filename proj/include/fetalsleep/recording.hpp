#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fsn {

/// Sleep stage of one scored interval. Fetal and adult vocabularies share
/// REM; `Excluded` marks movement/unknown spans that never reach training.
enum class Stage : std::uint8_t { kRem, kNrem, kIntermediate, kWake, kN1, kN2, kN3, kExcluded };

/// Which classifier label space a stage is mapped into.
enum class LabelSpace { kFetal, kAdult };

/// Number of classes in a label space (3 fetal, 5 adult).
int num_classes(LabelSpace space);

/// Class index of `stage` within `space`: fetal REM=0, NREM=1,
/// Intermediate=2; adult Wake=0, REM=1, N1=2, N2=3, N3=4. Returns nullopt
/// when the stage is not part of that space (including kExcluded).
std::optional<int> class_index(Stage stage, LabelSpace space);
Stage stage_from_class(int index, LabelSpace space);

std::string_view class_name(int index, LabelSpace space);

/// Sidecar token (REM, NREM, INT, EXCL, W, N1, N2, N3).
std::string_view stage_token(Stage stage);
std::optional<Stage> stage_from_token(std::string_view token);

struct Channel {
  std::string label;
  std::vector<double> samples;  // µV
};

/// Multi-channel recording with a common sample rate.
struct Recording {
  std::vector<Channel> channels;
  double sample_rate_hz = 0.0;
  std::string subject_id;

  std::size_t num_samples() const { return channels.empty() ? 0 : channels.front().samples.size(); }
  double duration_s() const { return sample_rate_hz > 0 ? num_samples() / sample_rate_hz : 0.0; }

  /// Throws DataError if channels differ in length or the rate is not positive.
  void validate() const;
};

struct LabelInterval {
  double start_s = 0.0;
  double end_s = 0.0;
  Stage stage = Stage::kExcluded;

  double duration_s() const { return end_s - start_s; }
  bool operator==(const LabelInterval&) const = default;
};

/// Sorted, non-overlapping labelled intervals.
struct LabelTrack {
  std::vector<LabelInterval> intervals;

  /// Throws DataError unless every interval has start < end and the list is
  /// sorted without overlap.
  void validate() const;
  bool operator==(const LabelTrack&) const = default;
};

}  // namespace fsn
