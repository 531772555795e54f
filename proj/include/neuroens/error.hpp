#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace neuroens {

// Every failure the core can raise. Mirrored one-to-one by ne_status in the C API.
enum class ErrorCode : int {
  InvalidArgument = 1,
  IoFailure,
  FileNotFound,
  MalformedHeader,
  UnsupportedDatatype,
  TruncatedData,
  InvalidVolume,
  IndexOutOfRange,
  MalformedRow,
  UnknownLabel,
  DuplicatePath,
  DegenerateInput,
  SingularTransform,
  NonPositiveIntensities,
  DimMismatch,
  AngleOutOfRange,
  EmptyClass,
  ShapeMismatch,
  CheckRequiresEvalMode,
  IncompatibleInput,
  ShapeFlowBroken,
  VersionMismatch,
  PayloadLengthMismatch,
  LengthMismatch,
  Empty,
  OneClassOnly,
  EmptyManifest,
  TooFewSubjects,
  NonFiniteLoss,
  SampleMismatch,
  InvalidConfig,
  NotARunDirectory,
  AlreadyExists,
  Internal,
};

std::string_view error_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // Pipeline stage the error surfaced in ("preprocess", "train", ...); empty when unstaged.
  const std::string& stage() const noexcept { return stage_; }
  Error& with_stage(std::string stage) {
    stage_ = std::move(stage);
    return *this;
  }

 private:
  ErrorCode code_;
  std::string stage_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

// {"error": "<Name>", "message": "...", "stage": "..."}
std::string error_json(const Error& e);

}  // namespace neuroens
