#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace plate {

// Operation invoked on an object whose state cannot support it
// (for example an attention row with every key masked).
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed input file. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace plate
