#include "bbgc/error.hpp"

namespace bbgc {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return "Usage";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::SourceUnavailable: return "SourceUnavailable";
    case ErrorKind::MalformedResponse: return "MalformedResponse";
    case ErrorKind::Timeout: return "Timeout";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::TruncatedStore: return "TruncatedStore";
    case ErrorKind::EmptyPool: return "EmptyPool";
    case ErrorKind::OverlappingCollections: return "OverlappingCollections";
    case ErrorKind::TooFewAnchors: return "TooFewAnchors";
    case ErrorKind::EmptyCollections: return "EmptyCollections";
    case ErrorKind::SizesOutOfRange: return "SizesOutOfRange";
    case ErrorKind::KTooLarge: return "KTooLarge";
    case ErrorKind::EmptyCluster: return "EmptyCluster";
    case ErrorKind::EmptyDenseModeList: return "EmptyDenseModeList";
    case ErrorKind::ZeroDenseCount: return "ZeroDenseCount";
    case ErrorKind::EmptyStore: return "EmptyStore";
    case ErrorKind::AcceptanceStall: return "AcceptanceStall";
  }
  return "Unknown";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
      return 2;
    case ErrorKind::EmptyDenseModeList:
    case ErrorKind::ZeroDenseCount:
    case ErrorKind::EmptyCluster:
    case ErrorKind::AcceptanceStall:
      return 4;
    case ErrorKind::SourceUnavailable:
    case ErrorKind::MalformedResponse:
    case ErrorKind::Timeout:
      return 5;
    default:
      return 3;
  }
}

}  // namespace bbgc
