#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sstage {

enum class ErrorCode {
  ExtentInvalid,
  Overflow,
  ShapeMismatch,
  DimMismatch,
  OutOfBlock,
  UnknownVariable,
  UnfilledSelection,
  LengthMismatch,
  DecodeError,
  CohortFailed,
  OpenTimeout,
  StreamClosed,
  ConnectionLost,
  StaleStep,
  OutOfRange,
  NotInStep,
  PatternChangedAfterLock,
  ProtocolError,
  InvalidParameter,
  DegenerateInput,
  ParseError,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Every failure surfaced by the library carries one of the codes above so
/// callers can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace sstage
