// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace lorasafe {

// Every failure raised by the library derives from Error. The category is
// what the CLI maps onto exit codes.
enum class ErrorKind {
  kDimension,
  kFormat,
  kIo,
  kPairing,
  kMissingKey,
  kPolicy,
  kMode,
  kValidation,
  kNumeric,
  kDegenerateSubspace,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define LORASAFE_DEFINE_ERROR(Name, Kind)                               \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

LORASAFE_DEFINE_ERROR(DimensionError, kDimension)
LORASAFE_DEFINE_ERROR(FormatError, kFormat)
LORASAFE_DEFINE_ERROR(IoError, kIo)
LORASAFE_DEFINE_ERROR(PairingError, kPairing)
LORASAFE_DEFINE_ERROR(MissingKeyError, kMissingKey)
LORASAFE_DEFINE_ERROR(PolicyError, kPolicy)
LORASAFE_DEFINE_ERROR(ModeError, kMode)
LORASAFE_DEFINE_ERROR(ValidationError, kValidation)
LORASAFE_DEFINE_ERROR(NumericError, kNumeric)
LORASAFE_DEFINE_ERROR(DegenerateSubspaceError, kDegenerateSubspace)

#undef LORASAFE_DEFINE_ERROR

}  // namespace lorasafe
