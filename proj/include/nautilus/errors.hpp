#pragma once

#include <stdexcept>
#include <string>

namespace nautilus {

// Error taxonomy used across the library. Every failure mode surfaces as one
// of these so callers can map them to exit codes uniformly.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct ModelError : std::runtime_error {
  explicit ModelError(const std::string& msg) : std::runtime_error("model error: " + msg) {}
};

struct LossError : std::runtime_error {
  explicit LossError(const std::string& msg) : std::runtime_error("loss error: " + msg) {}
};

struct PipelineError : std::runtime_error {
  explicit PipelineError(const std::string& msg) : std::runtime_error("pipeline error: " + msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace nautilus
