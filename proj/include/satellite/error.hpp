#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace satellite {

enum class ErrorKind {
  format,      // malformed binary or JSON input
  validation,  // non-finite values, broken invariants
  alignment,   // id / row count mismatch between paired artifacts
  parameter,   // caller supplied an out-of-range argument
  merge,       // incompatible datasets
  numeric,     // divergence, NaN, non-convergent fit
  io,          // filesystem failures
  lookup,      // unknown cluster / run / sample id
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::validation: return "validation";
    case ErrorKind::alignment: return "alignment";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::merge: return "merge";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::io: return "io";
    case ErrorKind::lookup: return "lookup";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Error raised by a pipeline stage; carries the stage name so that a
/// failure deep inside a composed run can be attributed.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), stage + ": " + cause.what()),
        stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace satellite
