#include "fetalsleep/recording.hpp"

#include <array>

#include "fetalsleep/error.hpp"

namespace fsn {

namespace {

struct StageInfo {
  Stage stage;
  std::string_view token;
};

constexpr std::array<StageInfo, 8> kStageTokens{{
    {Stage::kRem, "REM"},
    {Stage::kNrem, "NREM"},
    {Stage::kIntermediate, "INT"},
    {Stage::kExcluded, "EXCL"},
    {Stage::kWake, "W"},
    {Stage::kN1, "N1"},
    {Stage::kN2, "N2"},
    {Stage::kN3, "N3"},
}};

constexpr std::array<Stage, 3> kFetalOrder{Stage::kRem, Stage::kNrem, Stage::kIntermediate};
constexpr std::array<Stage, 5> kAdultOrder{Stage::kWake, Stage::kRem, Stage::kN1, Stage::kN2,
                                           Stage::kN3};

}  // namespace

int num_classes(LabelSpace space) { return space == LabelSpace::kFetal ? 3 : 5; }

std::optional<int> class_index(Stage stage, LabelSpace space) {
  if (space == LabelSpace::kFetal) {
    for (std::size_t i = 0; i < kFetalOrder.size(); ++i)
      if (kFetalOrder[i] == stage) return static_cast<int>(i);
  } else {
    for (std::size_t i = 0; i < kAdultOrder.size(); ++i)
      if (kAdultOrder[i] == stage) return static_cast<int>(i);
  }
  return std::nullopt;
}

Stage stage_from_class(int index, LabelSpace space) {
  if (index < 0 || index >= num_classes(space))
    throw LabelError("class index " + std::to_string(index) + " out of range");
  return space == LabelSpace::kFetal ? kFetalOrder[index] : kAdultOrder[index];
}

std::string_view class_name(int index, LabelSpace space) {
  return stage_token(stage_from_class(index, space));
}

std::string_view stage_token(Stage stage) {
  for (const auto& info : kStageTokens)
    if (info.stage == stage) return info.token;
  return "EXCL";
}

std::optional<Stage> stage_from_token(std::string_view token) {
  for (const auto& info : kStageTokens)
    if (info.token == token) return info.stage;
  return std::nullopt;
}

void Recording::validate() const {
  if (!(sample_rate_hz > 0.0)) throw DataError("recording sample rate must be positive");
  for (const auto& ch : channels) {
    if (ch.samples.size() != channels.front().samples.size())
      throw DataError("channel '" + ch.label + "' length differs from channel '" +
                      channels.front().label + "'");
  }
}

void LabelTrack::validate() const {
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    const auto& iv = intervals[i];
    if (!(iv.start_s < iv.end_s))
      throw DataError("label interval " + std::to_string(i) + " has start >= end");
    if (i > 0 && iv.start_s < intervals[i - 1].end_s)
      throw DataError("label interval " + std::to_string(i) + " overlaps or is out of order");
  }
}

}  // namespace fsn
