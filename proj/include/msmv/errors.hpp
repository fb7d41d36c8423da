#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace msmv {

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ConfigurationError : public Error {
 public:
  explicit ConfigurationError(const std::string& what, std::string key = {}, std::size_t line = 0)
      : Error("configuration", what), key_(std::move(key)), line_(line) {}
  const std::string& key() const noexcept { return key_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string key_;
  std::size_t line_;
};

// Non-finite callback output; the offending inputs are kept for diagnostics.
class ModelError : public Error {
 public:
  ModelError(const std::string& what, std::vector<double> inputs)
      : Error("model", what), inputs_(std::move(inputs)) {}
  const std::vector<double>& inputs() const noexcept { return inputs_; }

 private:
  std::vector<double> inputs_;
};

class EvaluationError : public Error {
 public:
  EvaluationError(const std::string& what, std::size_t index)
      : Error("evaluation", what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class UnsupportedDimensionError : public Error {
 public:
  explicit UnsupportedDimensionError(const std::string& what) : Error("unsupported-dimension", what) {}
};

class BlowUpError : public Error {
 public:
  BlowUpError(const std::string& what, std::size_t step, std::size_t particle, std::string label)
      : Error("blow-up", what), step_(step), particle_(particle), label_(std::move(label)) {}
  std::size_t step() const noexcept { return step_; }
  std::size_t particle() const noexcept { return particle_; }
  const std::string& label() const noexcept { return label_; }

 private:
  std::size_t step_;
  std::size_t particle_;
  std::string label_;
};

class CapabilityError : public Error {
 public:
  explicit CapabilityError(const std::string& what) : Error("capability", what) {}
};

class TruncationError : public Error {
 public:
  explicit TruncationError(const std::string& what) : Error("truncation", what) {}
};

class ConditioningError : public Error {
 public:
  ConditioningError(const std::string& what, double clipped_fraction)
      : Error("conditioning", what), clipped_fraction_(clipped_fraction) {}
  double clipped_fraction() const noexcept { return clipped_fraction_; }

 private:
  double clipped_fraction_;
};

// Execution options shared by long-running operations.
struct RunContext {
  unsigned threads = 1;
  bool strict = false;
};

// Records a warning, or throws it as a configuration error in strict mode.
inline void warn(std::vector<std::string>& sink, const std::string& message, bool strict) {
  if (strict) throw ConfigurationError("strict mode: " + message);
  sink.push_back(message);
}

}  // namespace msmv
