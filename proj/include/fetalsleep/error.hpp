#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fsn {

/// Coarse error category; the CLI maps it to an exit code.
enum class ErrorKind { kUser, kData, kInternal };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ErrorKind kind = ErrorKind::kData)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Malformed input bytes. Carries the byte offset of the offending field
/// when one is known.
class ParseError : public Error {
 public:
  static constexpr std::size_t kNoOffset = static_cast<std::size_t>(-1);

  explicit ParseError(const std::string& what, std::size_t offset = kNoOffset)
      : Error(offset == kNoOffset ? what
                                  : what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

#define FSN_DEFINE_ERROR(Name, Kind)                                       \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(what, ErrorKind::Kind) {} \
  };

FSN_DEFINE_ERROR(RangeError, kData)
FSN_DEFINE_ERROR(DesignError, kUser)
FSN_DEFINE_ERROR(LengthError, kData)
FSN_DEFINE_ERROR(ArgumentError, kUser)
FSN_DEFINE_ERROR(UndefinedError, kData)
FSN_DEFINE_ERROR(EstimateError, kData)
FSN_DEFINE_ERROR(GridError, kData)
FSN_DEFINE_ERROR(NormalizationError, kData)
FSN_DEFINE_ERROR(FeatureError, kData)
FSN_DEFINE_ERROR(ShapeError, kUser)
FSN_DEFINE_ERROR(WeightError, kData)
FSN_DEFINE_ERROR(LabelError, kData)
FSN_DEFINE_ERROR(NumericError, kInternal)
FSN_DEFINE_ERROR(DataError, kData)
FSN_DEFINE_ERROR(ConfigError, kUser)

#undef FSN_DEFINE_ERROR

}  // namespace fsn
