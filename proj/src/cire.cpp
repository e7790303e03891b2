#include "deidbench/cire.hpp"

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>

#include <httplib.h>
#include <json.hpp>

#include "deidbench/parallel.hpp"

namespace deidbench {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Sentence splitting
// ---------------------------------------------------------------------------

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> sentences;
    std::size_t start = 0;
    int bracket_depth = 0;
    auto flush = [&](std::size_t end) {
        std::string_view raw = text.substr(start, end - start);
        std::size_t a = raw.find_first_not_of(" \t\n\r");
        std::size_t b = raw.find_last_not_of(" \t\n\r");
        if (a != std::string_view::npos)
            sentences.emplace_back(raw.substr(a, b - a + 1));
        start = end;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (c == '[') ++bracket_depth;
        else if (c == ']' && bracket_depth > 0) --bracket_depth;
        if ((c == '.' || c == '!' || c == '?') && bracket_depth == 0) {
            bool at_end = i + 1 == text.size();
            char next = at_end ? ' ' : text[i + 1];
            if (at_end || next == ' ' || next == '\t' || next == '\n' ||
                next == '\r')
                flush(i + 1);
        }
    }
    flush(text.size());
    return sentences;
}

// ---------------------------------------------------------------------------
// Judges
// ---------------------------------------------------------------------------

const std::string& default_cire_prompt() {
    static const std::string prompt =
        "You compare two versions of one clinical sentence. In the second "
        "version, identifiers such as names, dates, phone numbers and "
        "addresses may have been masked or replaced.\n"
        "Reply with exactly one word: UNCHANGED if every piece of clinically "
        "relevant information (symptoms, diagnoses, medications, dosages, "
        "findings, plans) is intact, or CHANGED if any clinically relevant "
        "information was removed or altered.\n"
        "\n"
        "Original sentence: {original_sentence}\n"
        "Processed sentence: {masked_sentence}\n"
        "Answer:";
    return prompt;
}

HttpJudge::HttpJudge(Config config) : config_(std::move(config)) {
    if (config_.endpoint.empty())
        throw ConfigError("judge endpoint must not be empty");
}

std::string HttpJudge::ask(const std::string& prompt) {
    const std::string prefix = "http://";
    if (config_.endpoint.rfind(prefix, 0) != 0)
        throw ConfigError("judge endpoint must start with http://");
    std::string rest = config_.endpoint.substr(prefix.size());
    std::size_t slash = rest.find('/');
    std::string hostport =
        slash == std::string::npos ? rest : rest.substr(0, slash);
    std::string path = slash == std::string::npos ? "/" : rest.substr(slash);
    std::string host = hostport;
    int port = 80;
    if (std::size_t colon = hostport.rfind(':'); colon != std::string::npos) {
        host = hostport.substr(0, colon);
        port = std::stoi(hostport.substr(colon + 1));
    }

    // A client per call keeps ask() safe under concurrent judging.
    httplib::Client client(host, port);
    client.set_read_timeout(config_.timeout_ms / 1000,
                            (config_.timeout_ms % 1000) * 1000);
    httplib::Headers headers;
    if (!config_.auth_env.empty()) {
        if (const char* token = std::getenv(config_.auth_env.c_str());
            token && *token)
            headers.emplace("Authorization", std::string("Bearer ") + token);
    }
    json body = {{"model", config_.model},
                 {"messages", json::array({{{"role", "user"},
                                            {"content", prompt}}})},
                 {"temperature", config_.temperature}};
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res)
        throw JudgeUnavailable("judge endpoint unreachable: " +
                               httplib::to_string(res.error()));
    if (res->status != 200)
        throw JudgeUnavailable("judge returned status " +
                               std::to_string(res->status));
    try {
        json j = json::parse(res->body);
        return j.at("choices").at(0).at("message").at("content")
            .get<std::string>();
    } catch (const json::exception& e) {
        throw JudgeUnavailable(std::string("judge reply not understood: ") +
                               e.what());
    }
}

// ---------------------------------------------------------------------------
// CIRE
// ---------------------------------------------------------------------------

namespace {

std::string fill_slots(const std::string& tpl, const std::string& original,
                       const std::string& masked) {
    std::string out = tpl;
    auto replace_all = [&](const std::string& slot, const std::string& value) {
        std::size_t pos = 0;
        while ((pos = out.find(slot, pos)) != std::string::npos) {
            out.replace(pos, slot.size(), value);
            pos += value.size();
        }
    };
    replace_all("{original_sentence}", original);
    replace_all("{masked_sentence}", masked);
    return out;
}

/// UNCHANGED must be checked first: the token CHANGED is a substring of it.
bool parse_verdict(const std::string& reply, bool& changed) {
    if (reply.find("UNCHANGED") != std::string::npos) {
        changed = false;
        return true;
    }
    if (reply.find("CHANGED") != std::string::npos) {
        changed = true;
        return true;
    }
    return false;
}

} // namespace

CireReport cire(const std::vector<AnnotatedNote>& originals,
                const std::vector<std::string>& masked, Judge& judge,
                const CireOptions& opts) {
    if (originals.size() != masked.size())
        throw ValidationError("originals and masked texts are not parallel");
    const std::string& prompt_tpl =
        opts.prompt_template.empty() ? default_cire_prompt()
                                     : opts.prompt_template;

    CireReport report;
    std::vector<std::size_t> pending; // transcript indices needing a judge
    for (std::size_t n = 0; n < originals.size(); ++n) {
        const AnnotatedNote& note = originals[n];
        CireNote per_note;
        per_note.note_id = note.id;

        if (masked[n] == note.text) {
            // Identical output: every sentence is trivially unchanged.
            per_note.sentence_total = split_sentences(note.text).size();
            report.sentence_total += per_note.sentence_total;
            report.per_note.push_back(std::move(per_note));
            continue;
        }

        std::vector<std::string> orig_sents = split_sentences(note.text);
        std::vector<std::string> mask_sents = split_sentences(masked[n]);
        if (orig_sents.size() != mask_sents.size()) {
            per_note.split_mismatch = true;
            orig_sents = {note.text};
            mask_sents = {masked[n]};
        }
        per_note.sentence_total = orig_sents.size();
        report.sentence_total += orig_sents.size();
        for (std::size_t s = 0; s < orig_sents.size(); ++s) {
            CireSentence entry;
            entry.note_id = note.id;
            entry.index = s;
            entry.original = orig_sents[s];
            entry.masked = mask_sents[s];
            if (entry.original == entry.masked) {
                report.transcript.push_back(std::move(entry));
                continue;
            }
            pending.push_back(report.transcript.size());
            report.transcript.push_back(std::move(entry));
        }
        report.per_note.push_back(std::move(per_note));
    }

    std::atomic<std::size_t> calls{0};
    parallel_for(pending.size(), opts.jobs, [&](std::size_t i) {
        CireSentence& entry = report.transcript[pending[i]];
        const std::string prompt =
            fill_slots(prompt_tpl, entry.original, entry.masked);
        std::string reply = judge.ask(prompt);
        ++calls;
        bool changed = false;
        if (!parse_verdict(reply, changed)) {
            reply = judge.ask(prompt); // one retry
            ++calls;
            if (!parse_verdict(reply, changed))
                throw UnparseableVerdict(
                    "no verdict for note '" + entry.note_id + "' sentence " +
                        std::to_string(entry.index),
                    reply);
        }
        entry.raw_reply = reply;
        entry.changed = changed;
    });
    report.judge_calls = calls;

    std::map<std::string, std::size_t> changed_per_note;
    for (const CireSentence& e : report.transcript)
        if (e.changed) {
            ++report.sentence_changed;
            ++changed_per_note[e.note_id];
        }
    for (CireNote& n : report.per_note) {
        auto it = changed_per_note.find(n.note_id);
        n.sentence_changed = it == changed_per_note.end() ? 0 : it->second;
    }
    report.cire = report.sentence_total == 0
                      ? 1.0
                      : 1.0 - static_cast<double>(report.sentence_changed) /
                                  static_cast<double>(report.sentence_total);
    return report;
}

void write_cire_transcript(const CireReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write transcript '" + path + "'");
    for (const CireSentence& e : report.transcript) {
        json j = {{"note_id", e.note_id},   {"sentence", e.index},
                  {"original", e.original}, {"masked", e.masked},
                  {"reply", e.raw_reply},   {"changed", e.changed}};
        out << j.dump() << '\n';
    }
}

} // namespace deidbench
