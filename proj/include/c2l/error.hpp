#pragma once

#include <stdexcept>
#include <string>

namespace c2l {

enum class ErrorKind {
  Config,           // invalid configuration or usage
  Dimension,        // shape / length mismatch
  Contract,         // precondition violated by the caller
  Integrity,        // partition / freeze / leakage guard violated
  MissingArtifact,  // expected upstream file not found
  Numeric,          // NaN or Inf encountered
  Io,               // read/write failure or malformed file
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace c2l
