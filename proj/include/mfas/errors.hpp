#pragma once

#include <stdexcept>
#include <string>

namespace mfas {

// CLI maps these to exit codes: usage/config -> 1, data -> 2, numerical -> 3.
struct InputError : std::runtime_error {
  explicit InputError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct StateError : std::runtime_error {
  explicit StateError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace mfas
