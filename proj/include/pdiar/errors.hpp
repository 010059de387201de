#pragma once

#include <stdexcept>
#include <string>

namespace pdiar {

/// Broad failure class, used by the command-line tool to pick an exit code.
enum class ErrorKind { Data, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define PDIAR_DEFINE_ERROR(Name, Kind)                                      \
  class Name : public Error {                                               \
   public:                                                                  \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

PDIAR_DEFINE_ERROR(SizeError, Data)
PDIAR_DEFINE_ERROR(ShapeError, Data)
PDIAR_DEFINE_ERROR(DomainError, Data)
PDIAR_DEFINE_ERROR(DataError, Data)
PDIAR_DEFINE_ERROR(ParseError, Data)
PDIAR_DEFINE_ERROR(ScoringError, Data)
PDIAR_DEFINE_ERROR(DecompositionError, Numeric)
PDIAR_DEFINE_ERROR(CalibrationError, Numeric)
PDIAR_DEFINE_ERROR(InternalError, Numeric)

#undef PDIAR_DEFINE_ERROR

}  // namespace pdiar
