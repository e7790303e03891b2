#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "deidbench/corpus.hpp"
#include "deidbench/deid.hpp"

namespace deidbench {

/// How to reach an external de-identifier.
///
/// Subprocess protocol: the child prints the line "READY" once it can accept
/// work, then the harness writes one request per line {"id":..,"text":..} to
/// its stdin and reads one response per line {"id":..,"spans":[{"start":..,
/// "end":..,"category":..}]} from its stdout. Nonzero exit is failure.
///
/// Http protocol: POST of a JSON batch array to the endpoint; the response is
/// the parallel array; any status other than 200 is failure. An omitted span
/// category means Other.
struct AdapterConfig {
    enum class Kind { Subprocess, Http };

    Kind kind = Kind::Subprocess;
    std::string command;  // Subprocess: run via /bin/sh -c
    std::string endpoint; // Http: e.g. http://127.0.0.1:8080/deid
    int timeout_ms = 30000;
    std::size_t batch_size = 32;

    void validate() const; // throws ConfigError
};

struct AdapterRunInfo {
    double startup_seconds = 0.0;     // subprocess: time to the READY line
    std::size_t clipped_spans = 0;    // spans clipped, trimmed or dropped
    std::vector<std::string> warnings;
};

/// A live connection to one external de-identifier. For subprocess adapters
/// the child is spawned once and reused across predict() calls, so repeated
/// timing passes do not pay the start-up cost again. close() must be called
/// to observe the child's exit status; the destructor only reaps.
class AdapterSession {
public:
    explicit AdapterSession(const AdapterConfig& config);
    ~AdapterSession();
    AdapterSession(const AdapterSession&) = delete;
    AdapterSession& operator=(const AdapterSession&) = delete;

    /// One Prediction per note, in input order, spans clipped to bounds.
    /// A failed batch fails the run: AdapterTimeout, MalformedResponse or
    /// NonZeroExit — never a silent gap.
    std::vector<Prediction> predict(const std::vector<AnnotatedNote>& notes);

    /// Subprocess: closes stdin and reaps; throws NonZeroExit on a failure
    /// status. No-op for HTTP.
    void close();

    const AdapterRunInfo& info() const { return info_; }

private:
    struct Impl;
    AdapterConfig config_;
    AdapterRunInfo info_;
    std::unique_ptr<Impl> impl_;
};

/// Single-shot convenience wrapper: open, predict, close.
std::vector<Prediction> run_external(const AdapterConfig& config,
                                     const std::vector<AnnotatedNote>& notes,
                                     AdapterRunInfo* info = nullptr);

} // namespace deidbench
