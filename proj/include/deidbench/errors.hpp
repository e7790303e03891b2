#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace deidbench {

/// Base class for all toolkit errors. Subclasses exist so callers can
/// distinguish input problems (exit 1) from runtime failures (exit 2).
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input data (bad record syntax, bad placeholder grammar, ...).
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + msg : msg),
          line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// Structurally valid input that violates a domain invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A gold span overlaps no token of its note.
class SpanTokenMismatch : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Bundled pool data failed checksum or content validation.
class PoolDataCorrupt : public Error {
public:
    using Error::Error;
};

/// Both the native and the fallback sub-pool for a category are empty.
class EmptyPool : public Error {
public:
    using Error::Error;
};

/// Overlapping spans handed to an operation that requires disjoint ones.
class OverlapError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// An external de-identifier did not answer within its configured timeout.
class AdapterTimeout : public Error {
public:
    AdapterTimeout(const std::string& msg, std::vector<std::string> note_ids)
        : Error(msg), note_ids_(std::move(note_ids)) {}
    const std::vector<std::string>& note_ids() const { return note_ids_; }

private:
    std::vector<std::string> note_ids_;
};

/// An external de-identifier produced output the harness cannot interpret.
class MalformedResponse : public Error {
public:
    MalformedResponse(const std::string& msg, std::string raw_payload = {})
        : Error(msg), raw_(std::move(raw_payload)) {}
    const std::string& raw_payload() const { return raw_; }

private:
    std::string raw_;
};

/// A subprocess de-identifier exited with a nonzero status.
class NonZeroExit : public Error {
public:
    NonZeroExit(const std::string& msg, int code) : Error(msg), code_(code) {}
    int code() const { return code_; }

private:
    int code_;
};

/// Gold and prediction sets do not cover the same note ids.
class IdMismatch : public Error {
public:
    IdMismatch(const std::string& msg, std::vector<std::string> unmatched)
        : Error(msg), unmatched_(std::move(unmatched)) {}
    const std::vector<std::string>& unmatched_ids() const { return unmatched_; }

private:
    std::vector<std::string> unmatched_;
};

/// Baseline recall of zero makes a relative drop undefined.
class DegenerateBaseline : public Error {
public:
    using Error::Error;
};

/// The CIRE judge endpoint cannot be reached.
class JudgeUnavailable : public Error {
public:
    using Error::Error;
};

/// The judge reply contained neither CHANGED nor UNCHANGED after a retry.
class UnparseableVerdict : public Error {
public:
    UnparseableVerdict(const std::string& msg, std::string raw_reply)
        : Error(msg), raw_(std::move(raw_reply)) {}
    const std::string& raw_reply() const { return raw_; }

private:
    std::string raw_;
};

/// Filesystem failure while reading or writing result files.
class IoError : public Error {
public:
    using Error::Error;
};

/// Invalid experiment or adapter configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace deidbench
