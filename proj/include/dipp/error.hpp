#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dipp {

// Failure categories; the CLI prints these verbatim as the first token of its
// one-line error report.
enum class ErrorCategory {
  Shape,
  Numeric,
  Geometry,
  Config,
  Io,
  Infeasible,
  Argument,
};

constexpr std::string_view to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Shape: return "shape";
    case ErrorCategory::Numeric: return "numeric";
    case ErrorCategory::Geometry: return "geometry";
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Io: return "io";
    case ErrorCategory::Infeasible: return "infeasible";
    case ErrorCategory::Argument: return "argument";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorCategory::Shape, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCategory::Numeric, w) {}
};
enum class GeometryFault { BehindCamera, InvalidDepth, OutOfImage, OutOfRange };

struct GeometryError : Error {
  GeometryError(GeometryFault fault, const std::string& w)
      : Error(ErrorCategory::Geometry, w), fault(fault) {}
  GeometryFault fault;
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorCategory::Config, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCategory::Io, w) {}
};
struct InfeasibleError : Error {
  explicit InfeasibleError(const std::string& w) : Error(ErrorCategory::Infeasible, w) {}
};
struct ArgumentError : Error {
  explicit ArgumentError(const std::string& w) : Error(ErrorCategory::Argument, w) {}
};

}  // namespace dipp
