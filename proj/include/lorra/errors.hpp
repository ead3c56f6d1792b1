#pragma once

#include <stdexcept>
#include <string>

namespace lorra {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map categories onto exit codes.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Bad configuration values or unknown configuration keys.
class ConfigError : public Error {
  public:
    using Error::Error;
};

// Input files that cannot be read, parsed or that violate the dataset schema.
class DataError : public Error {
  public:
    using Error::Error;
};

class ParseError : public DataError {
  public:
    ParseError(const std::string& what, std::size_t byte_offset)
        : DataError(what), byte_offset_(byte_offset) {}
    std::size_t byte_offset() const { return byte_offset_; }

  private:
    std::size_t byte_offset_;
};

class SchemaError : public DataError {
  public:
    using DataError::DataError;
};

class LookupError : public DataError {
  public:
    using DataError::DataError;
};

// Violated preconditions: shape mismatches, out-of-range arguments.
class ContractError : public Error {
  public:
    using Error::Error;
};

// Non-finite losses or parameters during training.
class NumericError : public Error {
  public:
    using Error::Error;
};

}  // namespace lorra
