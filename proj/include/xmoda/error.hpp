#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xmoda {

enum class Errc {
  InvalidArgument,
  MissingFile,
  CorruptHeader,
  NonFiniteData,
  InvalidSpacing,
  CropTooLarge,
  MissingSlice,
  DuplicateSlice,
  MixedParents,
  ShapeTooSmall,
  IoFailure,
  ShapeMismatch,
  NonFiniteInput,
  KOutOfRange,
  TooFewNegatives,
  EmptyDataset,
  DivergenceDetected,
  IncompatibleCheckpoint,
  EmptyEnsemble,
  EmptyLabeledSet,
  EmptyMask,
  LengthMismatch,
  ZeroVariance,
  TooFewSamples,
  ConfigInvalid,
  HashMismatch,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::MissingFile: return "MissingFile";
    case Errc::CorruptHeader: return "CorruptHeader";
    case Errc::NonFiniteData: return "NonFiniteData";
    case Errc::InvalidSpacing: return "InvalidSpacing";
    case Errc::CropTooLarge: return "CropTooLarge";
    case Errc::MissingSlice: return "MissingSlice";
    case Errc::DuplicateSlice: return "DuplicateSlice";
    case Errc::MixedParents: return "MixedParents";
    case Errc::ShapeTooSmall: return "ShapeTooSmall";
    case Errc::IoFailure: return "IoFailure";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::KOutOfRange: return "KOutOfRange";
    case Errc::TooFewNegatives: return "TooFewNegatives";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::DivergenceDetected: return "DivergenceDetected";
    case Errc::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case Errc::EmptyEnsemble: return "EmptyEnsemble";
    case Errc::EmptyLabeledSet: return "EmptyLabeledSet";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::ZeroVariance: return "ZeroVariance";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::HashMismatch: return "HashMismatch";
  }
  return "Unknown";
}

/// Every failure in the library surfaces as an Error carrying a code that
/// callers (and tests) can switch on.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace xmoda
