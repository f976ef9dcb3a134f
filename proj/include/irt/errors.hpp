#pragma once

#include <stdexcept>
#include <string>

namespace irt {

// Error classes map one-to-one onto CLI exit codes.
enum class ErrorCode : int {
  kOk = 0,
  kUsage = 2,
  kDimension = 3,
  kDomain = 4,
  kContract = 5,
  kNumeric = 6,
  kIo = 7,
  kSchema = 8,
  kRotation = 9,
  kPalette = 10,
  kConfiguration = 11,
  kCheckpoint = 12,
  kCapability = 13,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }
  int exit_code() const { return static_cast<int>(code_); }

 private:
  ErrorCode code_;
};

const char* error_code_name(ErrorCode code);

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace irt
