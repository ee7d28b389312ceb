#include "slmprop/error.hpp"

namespace slmprop {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::SpecInvalid: return "SpecInvalid";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyMemory: return "EmptyMemory";
    case ErrorCode::MissingGrad: return "MissingGrad";
    case ErrorCode::EmptyBank: return "EmptyBank";
    case ErrorCode::BothBanksEmpty: return "BothBanksEmpty";
    case ErrorCode::InsufficientSlices: return "InsufficientSlices";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::NoTargetSlices: return "NoTargetSlices";
    case ErrorCode::ZeroBaseline: return "ZeroBaseline";
    case ErrorCode::TooFewValues: return "TooFewValues";
    case ErrorCode::ObjectAbsent: return "ObjectAbsent";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::BadCheckpoint: return "BadCheckpoint";
    }
    return "Unknown";
}

bool is_validation_error(ErrorCode code) {
    switch (code) {
    case ErrorCode::BadMagic:
    case ErrorCode::UnsupportedVersion:
    case ErrorCode::TruncatedFile:
    case ErrorCode::SpecInvalid:
    case ErrorCode::IndexOutOfRange:
    case ErrorCode::DimMismatch:
    case ErrorCode::ConfigInvalid:
    case ErrorCode::BadCheckpoint:
    case ErrorCode::ObjectAbsent:
    case ErrorCode::NoTargetSlices:
    case ErrorCode::ZeroBaseline:
    case ErrorCode::TooFewValues:
        return true;
    default:
        return false;
    }
}

} // namespace slmprop
