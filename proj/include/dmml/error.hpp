#pragma once

#include <stdexcept>
#include <string>

namespace dmml {

// Error carrying a stable machine-readable code (e.g. "dim_mismatch").
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

inline void require(bool cond, const char* code, const std::string& message) {
  if (!cond) throw Error(code, message);
}

}  // namespace dmml
