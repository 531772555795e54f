#include "neuroens/error.hpp"

#include "json.hpp"

namespace neuroens {

std::string_view error_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::FileNotFound: return "FileNotFound";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::TruncatedData: return "TruncatedData";
    case ErrorCode::InvalidVolume: return "InvalidVolume";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::MalformedRow: return "MalformedRow";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::DuplicatePath: return "DuplicatePath";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::SingularTransform: return "SingularTransform";
    case ErrorCode::NonPositiveIntensities: return "NonPositiveIntensities";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::AngleOutOfRange: return "AngleOutOfRange";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::CheckRequiresEvalMode: return "CheckRequiresEvalMode";
    case ErrorCode::IncompatibleInput: return "IncompatibleInput";
    case ErrorCode::ShapeFlowBroken: return "ShapeFlowBroken";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::PayloadLengthMismatch: return "PayloadLengthMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::Empty: return "Empty";
    case ErrorCode::OneClassOnly: return "OneClassOnly";
    case ErrorCode::EmptyManifest: return "EmptyManifest";
    case ErrorCode::TooFewSubjects: return "TooFewSubjects";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::SampleMismatch: return "SampleMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NotARunDirectory: return "NotARunDirectory";
    case ErrorCode::AlreadyExists: return "AlreadyExists";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

std::string error_json(const Error& e) {
  nlohmann::json j;
  j["error"] = std::string(error_name(e.code()));
  j["message"] = e.what();
  if (!e.stage().empty()) j["stage"] = e.stage();
  return j.dump();
}

}  // namespace neuroens
