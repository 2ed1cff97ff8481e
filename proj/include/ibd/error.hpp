#pragma once

#include <stdexcept>
#include <string>

namespace ibd {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind {
  Config,       // invalid configuration or argument
  Artifact,     // missing or incompatible on-disk artifact
  Numeric,      // non-finite values, failed optimization
  Shape,        // tensor shape mismatch
  Format,       // malformed file contents
  Invalid,      // violated precondition
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace ibd
