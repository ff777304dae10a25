#pragma once

#include <stdexcept>
#include <string>

namespace rg {

enum class ErrorCode {
  DimensionMismatch,
  DegenerateSeparation,
  RankDeficient,
  InvalidConfig,
  LayerOutOfRange,
  PositionOutOfRange,
  MissingBasis,
  NonFiniteLoss,
  CorruptCheckpoint,
  DegenerateSeries,
  BadMagic,
  UnsupportedVersion,
  ChecksumMismatch,
  TruncatedFile,
  IoError,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DegenerateSeparation: return "DegenerateSeparation";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::LayerOutOfRange: return "LayerOutOfRange";
    case ErrorCode::PositionOutOfRange: return "PositionOutOfRange";
    case ErrorCode::MissingBasis: return "MissingBasis";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::DegenerateSeries: return "DegenerateSeries";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace rg
