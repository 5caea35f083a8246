#pragma once

#include <stdexcept>
#include <string>

namespace s2gr {

// Exception taxonomy shared by all modules. The CLI maps these onto exit codes.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or inconsistent settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries the offending line when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line = -1)
      : Error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

/// Mathematical domain violation, e.g. cosine of a zero-norm vector.
class DomainError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape or contract mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or value during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// An upstream pipeline artifact is missing. `prerequisite` names the command
/// that produces it.
class MissingPrerequisite : public Error {
 public:
  MissingPrerequisite(const std::string& what, std::string prerequisite)
      : Error(what + " (run `" + prerequisite + "` first)"),
        prerequisite_(std::move(prerequisite)) {}
  const std::string& prerequisite() const { return prerequisite_; }

 private:
  std::string prerequisite_;
};

}  // namespace s2gr
