#pragma once

#include <stdexcept>
#include <string>

namespace polyspeech {

/// Failure classes. The CLI maps these onto its exit codes.
enum class ErrorKind {
  kInvalidArgument,  // bad input to a library call
  kUsage,            // bad command line / config
  kDependency,       // a required artifact (checkpoint, manifest) is missing or mismatched
  kNumeric,          // non-finite values
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& what) {
  throw Error(ErrorKind::kInvalidArgument, what);
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, const std::string& what) {
  if (!condition) fail(what);
}

}  // namespace polyspeech
