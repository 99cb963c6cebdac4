// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dpf {

// Error taxonomy shared across the library. Every throw site uses one of
// these so the CLI can map failure classes onto stable exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, int line)
      : Error(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_ = 0;
};

// A value violates a domain invariant (negative nutrient, bad stride, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Tensor/feature dimensions do not match an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A referenced entity (dish id, file, registry key) does not exist.
class LookupError : public Error {
 public:
  using Error::Error;
};

// An identifier that must be unique appears more than once.
class DuplicateError : public Error {
 public:
  using Error::Error;
};

// Filesystem or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration; carries the offending field path.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& msg, std::string field)
      : Error(msg + " [" + field + "]"), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// An API precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace dpf
