#pragma once

#include <stdexcept>
#include <string>

namespace helix {

/// Base error carrying a short machine-parsable category string.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& msg)
      : std::runtime_error(msg), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error("dimension", msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};

struct PreconditionError : Error {
  explicit PreconditionError(const std::string& msg) : Error("precondition", msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

struct DataError : Error {
  explicit DataError(const std::string& msg) : Error("data", msg) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error("format", msg) {}
};

struct TrainError : Error {
  explicit TrainError(const std::string& msg) : Error("train", msg) {}
};

}  // namespace helix
