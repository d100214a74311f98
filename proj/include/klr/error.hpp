#pragma once

#include <stdexcept>
#include <string>

namespace klr {

// Exit codes used by the command line front end.
enum class ExitCode : int {
  kOk = 0,
  kContract = 2,
  kNumerical = 3,
  kIo = 4,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode exit_code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Violated precondition: shape mismatch, wrong mode, bad argument.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(what, ExitCode::kContract) {}
};

/// Zero vector or all-zero map where a nonzero one is required.
class DegenerateInputError : public ContractError {
 public:
  explicit DegenerateInputError(const std::string& what) : ContractError("degenerate input: " + what) {}
};

class VocabularyError : public ContractError {
 public:
  explicit VocabularyError(const std::string& token)
      : ContractError("unknown token '" + token + "'"), token_(token) {}
  const std::string& token() const noexcept { return token_; }

 private:
  std::string token_;
};

class ConfigError : public ContractError {
 public:
  explicit ConfigError(const std::string& what) : ContractError("config: " + what) {}
};

/// Concept or covariance dimensions do not match the pipeline they are loaded into.
class LoadError : public ContractError {
 public:
  explicit LoadError(const std::string& what) : ContractError("load: " + what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(what, ExitCode::kNumerical) {}
};

class FactorizationError : public NumericalError {
 public:
  FactorizationError(const std::string& what, double smallest_pivot)
      : NumericalError(what + " (smallest pivot " + std::to_string(smallest_pivot) + ")"),
        smallest_pivot_(smallest_pivot) {}
  double smallest_pivot() const noexcept { return smallest_pivot_; }

 private:
  double smallest_pivot_;
};

class TrainingDivergedError : public NumericalError {
 public:
  explicit TrainingDivergedError(int step)
      : NumericalError("training diverged: non-finite loss at step " + std::to_string(step)), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, ExitCode::kIo) {}
};

class ChecksumError : public IoError {
 public:
  explicit ChecksumError(const std::string& what) : IoError("checksum: " + what) {}
};

class VersionError : public IoError {
 public:
  VersionError(const std::string& path, unsigned found, unsigned expected)
      : IoError(path + ": unsupported format version " + std::to_string(found) + " (expected " +
                std::to_string(expected) + ")"),
        found_(found) {}
  unsigned found() const noexcept { return found_; }

 private:
  unsigned found_;
};

class FormatError : public IoError {
 public:
  explicit FormatError(const std::string& what) : IoError("format: " + what) {}
};

}  // namespace klr
