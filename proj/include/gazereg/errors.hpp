#ifndef GAZEREG_ERRORS_HPP
#define GAZEREG_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gazereg {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// process exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class OrderingError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value or degenerate numeric state; names the offending tensor.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A flow provider could not deliver the requested frame pair.
class ProviderError : public Error {
 public:
  ProviderError(int src_frame, int dst_frame, const std::string& what)
      : Error("flow " + std::to_string(src_frame) + "->" + std::to_string(dst_frame) + ": " + what),
        src_(src_frame),
        dst_(dst_frame) {}
  int src_frame() const noexcept { return src_; }
  int dst_frame() const noexcept { return dst_; }

 private:
  int src_;
  int dst_;
};

}  // namespace gazereg

#endif  // GAZEREG_ERRORS_HPP
