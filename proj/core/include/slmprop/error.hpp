#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace slmprop {

enum class ErrorCode {
    BadMagic,
    UnsupportedVersion,
    TruncatedFile,
    IoFailure,
    SpecInvalid,
    ShapeMismatch,
    EmptyMemory,
    MissingGrad,
    EmptyBank,
    BothBanksEmpty,
    InsufficientSlices,
    IndexOutOfRange,
    DimMismatch,
    NoTargetSlices,
    ZeroBaseline,
    TooFewValues,
    ObjectAbsent,
    ConfigInvalid,
    BadCheckpoint,
};

std::string_view to_string(ErrorCode code);

// Validation errors map to CLI exit code 2, everything else to 3.
bool is_validation_error(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace slmprop
