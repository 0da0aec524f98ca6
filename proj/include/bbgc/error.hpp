#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bbgc {

enum class ErrorKind {
  Usage,
  ZeroVector,
  NonFinite,
  DimensionMismatch,
  InvalidConfig,
  SourceUnavailable,
  MalformedResponse,
  Timeout,
  IoError,
  BadMagic,
  VersionMismatch,
  TruncatedStore,
  EmptyPool,
  OverlappingCollections,
  TooFewAnchors,
  EmptyCollections,
  SizesOutOfRange,
  KTooLarge,
  EmptyCluster,
  EmptyDenseModeList,
  ZeroDenseCount,
  EmptyStore,
  AcceptanceStall,
};

std::string_view to_string(ErrorKind kind);

// Process exit code a CLI run reports for an error of this kind:
// 2 usage, 3 input-contract violation, 4 calibration precondition,
// 5 source failure.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace bbgc
