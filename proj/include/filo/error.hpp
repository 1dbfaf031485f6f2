#pragma once

#include <stdexcept>
#include <string>

namespace filo {

enum class ErrorKind {
  kInput = 1,     // rejected input (bad dimensions, bad image)
  kConfig = 2,    // inconsistent configuration or shapes
  kFormat = 3,    // malformed tensor container / file
  kMetric = 4,    // metric undefined for the given data
  kIo = 5,        // file system failure
  kTraining = 6,  // divergence, empty dataset
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::kInput, what) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error(ErrorKind::kFormat, what) {}
};
struct MetricError : Error {
  explicit MetricError(const std::string& what) : Error(ErrorKind::kMetric, what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};
struct TrainingError : Error {
  explicit TrainingError(const std::string& what) : Error(ErrorKind::kTraining, what) {}
};

}  // namespace filo
