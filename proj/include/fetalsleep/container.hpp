#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fetalsleep/recording.hpp"

// Internal recording container.
//
//   "FSR1" | u16 channel count | f64 sample rate |
//   per channel: u32 sample count, f32 samples[count]
//
// All integers and floats little-endian. Interval labels live in a sidecar
// text file next to the container (same stem, ".labels" extension), one
// `start_s<TAB>end_s<TAB>TOKEN` line per interval.
namespace fsn::container {

inline constexpr char kMagic[4] = {'F', 'S', 'R', '1'};

std::vector<std::uint8_t> encode(const Recording& recording);
/// Channel labels are not stored; decoded channels are named ch0, ch1, ...
Recording decode(std::span<const std::uint8_t> bytes, const std::string& subject_id = {});

std::string encode_labels(const LabelTrack& track);
LabelTrack decode_labels(std::string_view text);

std::filesystem::path labels_path(const std::filesystem::path& container_path);

void write_internal(const std::filesystem::path& path, const Recording& recording,
                    const LabelTrack& labels);
/// Subject id is taken from the file stem.
std::pair<Recording, LabelTrack> read_internal(const std::filesystem::path& path);

/// Sorted list of *.fsr files in a directory.
std::vector<std::filesystem::path> list_recordings(const std::filesystem::path& dir);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace fsn::container
