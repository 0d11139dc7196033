#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace redloop {

// Root of every error the library throws. Callers that only care about
// "something went wrong in redloop" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A documented precondition of an operation was violated by the caller.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class RangeError : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

// derive_fooled and friends reject prompts the annotator discarded.
class LabelledDiscardError : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

// Malformed input file. `line` is 1-based; 0 when not line oriented.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class ConflictError : public Error {
 public:
  using Error::Error;
};

// Attempt to write to a dataset tagged HoldoutTest.
class ImmutableError : public Error {
 public:
  using Error::Error;
};

// Transport-level backend failure worth retrying.
class BackendError : public Error {
 public:
  using Error::Error;
};

class RateLimitError : public BackendError {
 public:
  RateLimitError(const std::string& what, double retry_after_s)
      : BackendError(what), retry_after_s_(retry_after_s) {}
  double retry_after_s() const { return retry_after_s_; }

 private:
  double retry_after_s_;
};

// Permanent backend failure (bad request, auth, failed job).
class BackendFatalError : public Error {
 public:
  using Error::Error;
};

class UnparseableVerdictError : public Error {
 public:
  explicit UnparseableVerdictError(std::string raw)
      : Error("unparseable verdict: '" + raw + "'"), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

// Raised by the loop when a stage cannot complete; the run is left
// suspended and resumable from its persisted state.
class StageError : public Error {
 public:
  using Error::Error;
};

class QuotaStarvationError : public StageError {
 public:
  using StageError::StageError;
};

class AnnotatorTimeoutError : public StageError {
 public:
  using StageError::StageError;
};

}  // namespace redloop
