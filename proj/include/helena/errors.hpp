#pragma once

#include <stdexcept>
#include <string>

namespace helena {

/// Operand extents that do not fit together.
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// A configuration record violates one of its invariants. The message names the field.
class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Malformed or mismatching weight/dataset file.
class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ConsistencyError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

}  // namespace helena
