#pragma once

#include <stdexcept>
#include <string>

namespace ranlab {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (shape, range, arity).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared in a forward value or a gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Normalizing a zero-norm vector, or any cosine involving one.
class DegenerateEmbedding : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given labels (e.g. AUC with one class).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Network failure talking to an external endpoint.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts)
      : Error(what), attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

/// An external response was received but rejected.
class ValidationError : public Error {
 public:
  using Error::Error;
};

namespace detail {
[[noreturn]] inline void contract_fail(const std::string& msg) { throw ContractViolation(msg); }
}  // namespace detail

#define RANLAB_REQUIRE(cond, msg)                        \
  do {                                                   \
    if (!(cond)) ::ranlab::detail::contract_fail(msg);   \
  } while (0)

}  // namespace ranlab
