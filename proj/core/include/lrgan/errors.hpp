#pragma once

#include <stdexcept>
#include <string>

namespace lrgan {

// Error categories, also used as CLI exit codes.
enum class ErrorCategory : int {
  kOk = 0,
  kUsage = 1,
  kConfig = 2,
  kIo = 3,
  kData = 4,
  kNumeric = 5,
  kValidation = 6,
  kCheckpoint = 7,
};

const char* to_string(ErrorCategory c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

// Bad tensor shapes, out-of-range arguments, non-finite inputs.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ErrorCategory::kValidation, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorCategory::kConfig, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::kIo, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what)
      : Error(ErrorCategory::kData, what) {}
};

// NaN/Inf during optimization; carries the name of the first bad term.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorCategory::kNumeric, what) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what)
      : Error(ErrorCategory::kCheckpoint, what) {}
};

}  // namespace lrgan
