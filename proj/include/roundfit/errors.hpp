#pragma once

#include <stdexcept>
#include <string>

namespace roundfit {

// Shapes disagree (matmul inner dims, broadcast, loss operands, file metadata).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside its documented domain.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Object used in a state that does not permit the call (consumed tape, missing prior blocks).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or truncated file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed input whose values are unusable (token id out of range, too few tokens).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Text that does not parse.
class ParseError : public DataError {
 public:
  using DataError::DataError;
};

// Value that cannot be represented in the requested encoding.
class EncodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Problem too large for an exhaustive method.
class SizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace roundfit
