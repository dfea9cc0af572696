#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ptgcn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input text; `line` is 1-based, 0 when unknown.
struct ParseError : Error {
  ParseError(std::size_t line, const std::string &what)
      : Error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct ValidationError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

/// A caller broke an operation's precondition.
struct ContractError : Error {
  using Error::Error;
};

struct LookupError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NonFiniteLossError : Error {
  explicit NonFiniteLossError(const std::string &sentence_id)
      : Error("non-finite loss on sentence '" + sentence_id + "'"),
        sentence_id(sentence_id) {}
  std::string sentence_id;
};

} // namespace ptgcn
