#pragma once

#include <stdexcept>
#include <string>

namespace composer {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes or dimensions do not agree.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A documented precondition was violated.
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// A token is not part of the closed vocabulary.
struct VocabError : ContractError {
  explicit VocabError(const std::string& msg) : ContractError(msg) {}
};

// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Division by a vanishing schedule coefficient.
struct SingularityError : NumericError {
  explicit SingularityError(const std::string& msg) : NumericError(msg) {}
};

// Stored data fails an integrity check.
struct CorruptionError : Error {
  explicit CorruptionError(const std::string& msg) : Error(msg) {}
};

// File could not be read/written or has a malformed layout.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace composer
