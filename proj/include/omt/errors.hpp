#pragma once

#include <stdexcept>
#include <string>

namespace omt {

// Invalid configuration: bad parameter ranges, malformed config files,
// unsupported combinations (e.g. block size above the enumeration cap).
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or unreadable input data (CSV contents, value ranges).
class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical calibration could not complete (e.g. failure to bracket the
// constraint root).
class CalibrationError : public std::runtime_error {
public:
  explicit CalibrationError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace omt
