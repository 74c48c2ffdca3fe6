#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace studentsim {

// Error families. Each maps to a distinct CLI exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// Non-2xx responses and malformed payloads from a backend.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// Timeouts / connection failures that persisted through every retry.
class TransientError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// A profile could not be scored; the pipeline records it and moves on.
class ScoringError : public Error {
 public:
  using Error::Error;
};

class AnalysisError : public Error {
 public:
  using Error::Error;
};

class PolicyError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Thrown by a pipeline stage; carries the stage name for the exit message.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what, int code)
      : Error(what), stage_(std::move(stage)), code_(code) {}
  const std::string& stage() const { return stage_; }
  int code() const { return code_; }

 private:
  std::string stage_;
  int code_;
};

namespace exit_codes {
inline constexpr int kOk = 0;
inline constexpr int kGeneric = 1;
inline constexpr int kConfig = 2;
inline constexpr int kBackend = 3;
inline constexpr int kParse = 4;
inline constexpr int kInput = 5;
}  // namespace exit_codes

inline int exit_code(const std::exception& e) {
  if (auto* s = dynamic_cast<const StageError*>(&e)) return s->code();
  if (dynamic_cast<const ConfigError*>(&e)) return exit_codes::kConfig;
  if (dynamic_cast<const BackendError*>(&e)) return exit_codes::kBackend;
  if (dynamic_cast<const ParseError*>(&e)) return exit_codes::kParse;
  if (dynamic_cast<const InputError*>(&e)) return exit_codes::kInput;
  return exit_codes::kGeneric;
}

}  // namespace studentsim
