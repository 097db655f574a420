#pragma once

#include <stdexcept>
#include <string>

namespace ciec {

/// Invalid sizes, hyperparameters, or shapes that disagree with a config.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs that violate an operation's preconditions (labels, boxes, masks).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed dataset, checkpoint, or config file.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss parts or divergence during optimization.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ciec
