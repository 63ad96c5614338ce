#pragma once

#include <stdexcept>
#include <string>

namespace misuse {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied something that violates an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input file or payload does not follow the documented format.
class FormatError : public Error {
 public:
  using Error::Error;
};

// An operation needs an artifact (ensemble, trained models) that does not exist yet.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

// Numerical procedure failed (divergence, non-convergence).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace misuse
