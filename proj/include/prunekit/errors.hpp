#pragma once

#include <stdexcept>
#include <string>

namespace prunekit {

/// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller broke a documented precondition (length mismatch, bad fraction).
class ContractError : public Error {
 public:
  using Error::Error;
};

class UnknownLayerError : public Error {
 public:
  explicit UnknownLayerError(const std::string& name)
      : Error("unknown layer: " + name), layer_(name) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

enum class LoadErrorKind {
  missing_file,
  malformed_manifest,
  shape_mismatch,
  non_finite,
  version_mismatch,
  corrupt,
};

const char* to_string(LoadErrorKind kind) noexcept;

class LoadError : public Error {
 public:
  LoadError(LoadErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  LoadErrorKind kind() const noexcept { return kind_; }

 private:
  LoadErrorKind kind_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Evaluator/trainer failures, including the external protocol.
class EvaluatorError : public Error {
 public:
  using Error::Error;
};

class CapabilityError : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};

class ProtocolError : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};

class TrainingDiverged : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};

}  // namespace prunekit
