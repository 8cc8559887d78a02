#pragma once

#include <stdexcept>
#include <string>

namespace crest {

// Base for every error this library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed scenario file; message carries file, line and field context.
class ParseError : public Error {
 public:
  using Error::Error;
};

// A model invariant does not hold; message names the offending entity.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A time series required by the model is absent or incomplete.
class MissingSeriesError : public Error {
 public:
  using Error::Error;
};

class OutOfRangeError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Power flow did not converge where the caller requires a solution.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// A sensitivity matrix was used at an operating point other than its own.
class StaleSensitivityError : public Error {
 public:
  using Error::Error;
};

// A setpoint lies outside a device's capability.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class UnknownEndpointError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

}  // namespace crest
