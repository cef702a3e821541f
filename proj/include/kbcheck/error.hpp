#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kbcheck {

enum class ErrorCode {
    Io,
    MalformedLine,
    UnknownLabel,
    EmptyTask,
    DuplicateId,
    EmptyDocument,
    EmptyKnowledgeBase,
    SnapshotFormat,
    RetrieverUnavailable,
    ScorerUnavailable,
    ClassifierUnavailable,
    ProtocolError,
    InvalidArgument,
    LengthMismatch,
    EmptyEvaluation,
    EmptyList,
    DegenerateVariance,
    TooFewPoints,
    Config,
};

inline std::string_view to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::Io: return "Io";
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::EmptyTask: return "EmptyTask";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::EmptyDocument: return "EmptyDocument";
    case ErrorCode::EmptyKnowledgeBase: return "EmptyKnowledgeBase";
    case ErrorCode::SnapshotFormat: return "SnapshotFormat";
    case ErrorCode::RetrieverUnavailable: return "RetrieverUnavailable";
    case ErrorCode::ScorerUnavailable: return "ScorerUnavailable";
    case ErrorCode::ClassifierUnavailable: return "ClassifierUnavailable";
    case ErrorCode::ProtocolError: return "ProtocolError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::EmptyList: return "EmptyList";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::Config: return "Config";
    }
    return "Unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code)
    {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Load errors that point at a specific input line (1-based).
class LineError : public Error {
public:
    LineError(ErrorCode code, std::size_t line, const std::string& what)
        : Error(code, "line " + std::to_string(line) + ": " + what), line_(line)
    {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

} // namespace kbcheck
