#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace costcast {

enum class ErrorCode : std::uint8_t {
  MissingColumn,
  NonBinaryTreatment,
  NegativeCost,
  ControlCostNonzero,
  NoOverlap,
  PropensityOutOfRange,
  NonFiniteValue,
  MissingValue,
  MalformedInput,
  TooFewSamples,
  NonpositiveCost,
  NonpositiveBudget,
  LengthMismatch,
  DimensionMismatch,
  DegenerateNode,
  ConfigInvalid,
  ZeroDenominator,
  SingularMoment,
  FoldTooSmall,
  NoTreatedUnits,
  MissingPropensity,
  NuisanceRequired,
  BudgetOutOfRange,
  TooFewReps,
  EmptyInput,
  ModelFormat,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::NonBinaryTreatment: return "NonBinaryTreatment";
    case ErrorCode::NegativeCost: return "NegativeCost";
    case ErrorCode::ControlCostNonzero: return "ControlCostNonzero";
    case ErrorCode::NoOverlap: return "NoOverlap";
    case ErrorCode::PropensityOutOfRange: return "PropensityOutOfRange";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::MissingValue: return "MissingValue";
    case ErrorCode::MalformedInput: return "MalformedInput";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::NonpositiveCost: return "NonpositiveCost";
    case ErrorCode::NonpositiveBudget: return "NonpositiveBudget";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DegenerateNode: return "DegenerateNode";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::ZeroDenominator: return "ZeroDenominator";
    case ErrorCode::SingularMoment: return "SingularMoment";
    case ErrorCode::FoldTooSmall: return "FoldTooSmall";
    case ErrorCode::NoTreatedUnits: return "NoTreatedUnits";
    case ErrorCode::MissingPropensity: return "MissingPropensity";
    case ErrorCode::NuisanceRequired: return "NuisanceRequired";
    case ErrorCode::BudgetOutOfRange: return "BudgetOutOfRange";
    case ErrorCode::TooFewReps: return "TooFewReps";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ModelFormat: return "ModelFormat";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

// Every library failure is reported through this type. `row()` carries the
// zero-based data row for validation failures.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> row = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message +
                           (row ? " (row " + std::to_string(*row) + ")" : "")),
        code_(code),
        row_(row) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> row() const noexcept { return row_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> row_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message,
                              std::optional<std::size_t> row = std::nullopt) {
  throw Error(code, message, row);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace costcast
