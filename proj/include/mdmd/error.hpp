#pragma once

#include <stdexcept>
#include <string>

namespace mdmd {

// All library failures surface as Error. `code` is a stable kebab-case tag
// used by the CLI to pick exit codes and print machine-parsable one-liners.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace mdmd
