#pragma once

#include <cstdint>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace osdd {

// Invalid arguments, bad shapes, out-of-range config values. CLI maps this
// to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Non-finite losses, NaN aborts. CLI maps this to exit code 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
std::string str_cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

template <typename... Args>
[[noreturn]] void fail_validation(Args&&... args) {
  throw ValidationError(str_cat(std::forward<Args>(args)...));
}

template <typename... Args>
[[noreturn]] void fail_numeric(Args&&... args) {
  throw NumericError(str_cat(std::forward<Args>(args)...));
}

inline void log_warn(const std::string& msg) {
  std::cerr << "[warn] " << msg << "\n";
}

inline void log_info(const std::string& msg) {
  std::cerr << "[info] " << msg << "\n";
}

}  // namespace osdd
