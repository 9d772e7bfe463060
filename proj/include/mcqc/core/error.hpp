#pragma once

#include <stdexcept>
#include <string>

namespace mcqc {

// Base for every error the toolkit raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvalidItem : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Violated operation precondition (bad argument, not bad data).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Model endpoint unreachable, non-retryable HTTP failure, or replay-cache miss.
class BackendError : public Error {
 public:
  using Error::Error;
};

// A generation-style call whose output never validated within the retry budget.
class GenerationFailure : public Error {
 public:
  GenerationFailure(const std::string& what, std::string last_response, int attempts)
      : Error(what), last_response_(std::move(last_response)), attempts_(attempts) {}

  const std::string& last_response() const noexcept { return last_response_; }
  int attempts() const noexcept { return attempts_; }

 private:
  std::string last_response_;
  int attempts_;
};

}  // namespace mcqc
