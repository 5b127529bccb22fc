#pragma once

#include <stdexcept>
#include <string>

namespace touchmatch {

// Every library failure carries a short machine-readable category so the CLI
// can print "error: <category>: <message>" on a single line.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& m) : Error("invalid-argument", m) {}
};

struct InvalidGraspError : Error {
  explicit InvalidGraspError(const std::string& m) : Error("invalid-grasp", m) {}
};

struct DegenerateObjectError : Error {
  explicit DegenerateObjectError(const std::string& m) : Error("degenerate-object", m) {}
};

struct DatasetError : Error {
  explicit DatasetError(const std::string& m) : Error("dataset", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

struct MissingPrerequisite : Error {
  explicit MissingPrerequisite(const std::string& m) : Error("missing-prerequisite", m) {}
};

}  // namespace touchmatch
