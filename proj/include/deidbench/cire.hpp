#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deidbench/corpus.hpp"

namespace deidbench {

/// Rule-based sentence splitter: splits after '.', '!' or '?' followed by
/// whitespace or end of text, never inside a bracketed mask tag. Returns
/// trimmed, non-empty sentences.
std::vector<std::string> split_sentences(std::string_view text);

/// A judge answers one sentence-pair prompt with raw reply text. The harness
/// parses the verdict grammar (the reply must contain CHANGED or UNCHANGED)
/// and retries once before giving up. Implementations must be safe to call
/// from multiple threads when cire() runs with jobs > 1.
class Judge {
public:
    virtual ~Judge() = default;
    virtual std::string ask(const std::string& prompt) = 0;
};

/// Chat-style HTTP judge. Sends {"model":..,"messages":[{"role":"user",
/// "content": prompt}],"temperature":..} and reads
/// choices[0].message.content. The bearer token is taken from the
/// environment variable named by auth_env, if set.
class HttpJudge : public Judge {
public:
    struct Config {
        std::string endpoint; // http://host:port/path
        std::string model;
        std::string auth_env = "DEIDBENCH_JUDGE_TOKEN";
        double temperature = 0.0;
        int timeout_ms = 60000;
    };

    explicit HttpJudge(Config config);
    std::string ask(const std::string& prompt) override;

private:
    Config config_;
};

/// The default judge prompt. data/cire_prompt.txt ships the same text and is
/// user-replaceable; both use the slots {original_sentence} and
/// {masked_sentence}.
const std::string& default_cire_prompt();

struct CireOptions {
    std::string prompt_template; // empty -> default_cire_prompt()
    std::size_t jobs = 1;        // concurrent judge calls
};

struct CireSentence {
    std::string note_id;
    std::size_t index = 0;
    std::string original;
    std::string masked;
    std::string raw_reply; // empty when the fast path skipped the judge
    bool changed = false;
};

struct CireNote {
    std::string note_id;
    std::size_t sentence_total = 0;
    std::size_t sentence_changed = 0;
    bool split_mismatch = false; // judged as one whole-note pair
};

struct CireReport {
    std::size_t sentence_total = 0;
    std::size_t sentence_changed = 0;
    double cire = 1.0; // 1 - changed/total; 1.0 for an empty corpus
    std::size_t judge_calls = 0;
    std::vector<CireNote> per_note;
    std::vector<CireSentence> transcript;
};

/// Clinical-information-retention score over parallel (original, masked)
/// texts. Identical pairs short-circuit to UNCHANGED without a judge call;
/// when the two sides split into different sentence counts the note is
/// judged as a single whole-note pair. Throws UnparseableVerdict after one
/// retry on a reply without a verdict token.
CireReport cire(const std::vector<AnnotatedNote>& originals,
                const std::vector<std::string>& masked, Judge& judge,
                const CireOptions& opts = {});

/// Writes the judge transcript as one JSON record per line for audit.
void write_cire_transcript(const CireReport& report, const std::string& path);

} // namespace deidbench
