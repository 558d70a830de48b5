#pragma once

#include <stdexcept>
#include <string>

namespace icl {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidModel : public Error {
 public:
  using Error::Error;
};

class SupportMismatch : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class UnknownConcept : public Error {
 public:
  using Error::Error;
};

class EnumerationCapExceeded : public Error {
 public:
  using Error::Error;
};

class NonMixingChain : public Error {
 public:
  using Error::Error;
};

class ImpossibleObservation : public Error {
 public:
  using Error::Error;
};

class UnboundedRegret : public Error {
 public:
  using Error::Error;
};

class NonFiniteInput : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

class BoundMismatch : public Error {
 public:
  using Error::Error;
};

class KinkError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Configuration key not in the schema, or a value of the wrong type.
class SchemaError : public Error {
 public:
  SchemaError(std::string key_path, const std::string& what)
      : Error(key_path + ": " + what), key_path_(std::move(key_path)) {}
  const std::string& key_path() const noexcept { return key_path_; }

 private:
  std::string key_path_;
};

}  // namespace icl
