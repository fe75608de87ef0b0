#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cacl {

// Error taxonomy shared by the library and the CLI. Exit codes: 2 config,
// 3 data, 4 numeric fault, 5 verification failure.
class Error : public std::runtime_error {
 public:
  Error(std::string msg, const char* kind, int exit_code)
      : std::runtime_error(std::move(msg)), kind_(kind), exit_code_(exit_code) {}
  const char* kind() const { return kind_; }
  int exit_code() const { return exit_code_; }

 private:
  const char* kind_;
  int exit_code_;
};

struct ConfigError : Error {
  explicit ConfigError(std::string msg) : Error(std::move(msg), "config", 2) {}
};

struct DataError : Error {
  explicit DataError(std::string msg) : Error(std::move(msg), "data", 3) {}
};

struct NumericFault : Error {
  explicit NumericFault(std::string msg) : Error(std::move(msg), "numeric", 4) {}
};

// Shape mismatches are numeric faults; the message names the op and shapes.
struct ShapeError : NumericFault {
  explicit ShapeError(std::string msg) : NumericFault(std::move(msg)) {}
  ShapeError(const char* op, const std::string& detail)
      : NumericFault(std::string(op) + ": " + detail) {}
};

struct VerificationError : Error {
  explicit VerificationError(std::string msg)
      : Error(std::move(msg), "verification", 5) {}
};

}  // namespace cacl
