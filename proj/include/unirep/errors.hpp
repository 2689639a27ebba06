#pragma once

#include <stdexcept>
#include <string>

namespace unirep {

// Shape or argument contract violated by a caller.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration (flags, config file, model config).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf encountered, or a numerically undefined request.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// On-disk format problem: missing file, byte-count mismatch, bad manifest.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace unirep
