#pragma once

#include <stdexcept>
#include <string>

namespace ood {

// Process exit codes used by the CLI.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kTraining = 3,
  kConstraint = 4,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kFailure)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Tensor shapes disagree.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

/// Sequence longer than the model supports.
class LengthError : public Error {
 public:
  explicit LengthError(const std::string& what) : Error("length error: " + what) {}
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract error: " + what) {}
};

/// Argument outside a function's mathematical domain.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error("config error: " + what, ExitCode::kConfig) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what)
      : Error("training error: " + what, ExitCode::kTraining) {}
};

class ConstraintError : public Error {
 public:
  explicit ConstraintError(const std::string& what)
      : Error("constraint error: " + what, ExitCode::kConstraint) {}
};

}  // namespace ood
