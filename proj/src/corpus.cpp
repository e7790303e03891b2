#include "deidbench/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace deidbench {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Enum serialization
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<const char*, kCategoryCount> kCategoryNames = {
    "name",    "phone_fax", "hospital",   "city", "state", "address",
    "country", "company",   "university", "date", "email", "other",
};

constexpr std::array<const char*, kLocaleCount> kLocaleNames = {
    "en_US", "en_GB", "en_AU", "en_CA", "zh", "es", "hi", "fr", "bn",
};

} // namespace

std::string to_string(PiiCategory c) {
    return kCategoryNames[static_cast<std::size_t>(c)];
}

PiiCategory category_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kCategoryCount; ++i)
        if (s == kCategoryNames[i]) return static_cast<PiiCategory>(i);
    throw ParseError("unknown category '" + std::string(s) + "'");
}

std::string to_string(Gender g) {
    switch (g) {
    case Gender::Feminine: return "feminine";
    case Gender::Masculine: return "masculine";
    case Gender::Unspecified: return "unspecified";
    }
    return "unspecified";
}

Gender gender_from_string(std::string_view s) {
    if (s == "feminine" || s == "f") return Gender::Feminine;
    if (s == "masculine" || s == "m") return Gender::Masculine;
    if (s == "unspecified" || s.empty()) return Gender::Unspecified;
    throw ParseError("unknown gender '" + std::string(s) + "'");
}

std::string to_string(Locale l) {
    return kLocaleNames[static_cast<std::size_t>(l)];
}

Locale locale_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kLocaleCount; ++i)
        if (s == kLocaleNames[i]) return static_cast<Locale>(i);
    throw ParseError("unknown locale '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

namespace {

std::string span_repr(const Span& s) {
    std::ostringstream os;
    os << "span(" << s.start << "," << s.end << "," << to_string(s.category)
       << ")";
    return os.str();
}

} // namespace

void validate_note(const AnnotatedNote& note) {
    if (note.id.empty()) throw ValidationError("note id must be non-empty");
    std::size_t prev_end = 0;
    for (const Span& s : note.spans) {
        if (s.start >= s.end)
            throw ValidationError("note '" + note.id + "': " + span_repr(s) +
                                  " has end <= start");
        if (s.end > note.text.size())
            throw ValidationError("note '" + note.id + "': " + span_repr(s) +
                                  " exceeds text length " +
                                  std::to_string(note.text.size()));
        if (s.start < prev_end)
            throw ValidationError("note '" + note.id + "': " + span_repr(s) +
                                  " overlaps previous span or is unsorted");
        // Offsets must not split a multi-byte character: a UTF-8 continuation
        // byte has the two high bits 10.
        auto on_boundary = [&](std::size_t off) {
            return off == note.text.size() ||
                   (static_cast<unsigned char>(note.text[off]) & 0xC0) != 0x80;
        };
        if (!on_boundary(s.start) || !on_boundary(s.end))
            throw ValidationError("note '" + note.id + "': " + span_repr(s) +
                                  " cuts a multi-byte character");
        if (s.category != PiiCategory::Name && s.gender != Gender::Unspecified)
            throw ValidationError("note '" + note.id + "': " + span_repr(s) +
                                  " carries a gender on a non-name category");
        prev_end = s.end;
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

namespace {

inline bool is_sep(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
}

inline bool is_punct(unsigned char c) {
    return c < 0x80 && std::ispunct(c);
}

} // namespace

std::vector<Token> tokenize(std::string_view text) {
    std::vector<Token> tokens;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (is_sep(c)) {
            ++i;
            continue;
        }
        if (is_punct(c)) {
            tokens.push_back({text.substr(i, 1), i, i + 1});
            ++i;
            continue;
        }
        std::size_t start = i;
        while (i < n) {
            unsigned char d = static_cast<unsigned char>(text[i]);
            if (is_sep(d) || is_punct(d)) break;
            ++i;
        }
        tokens.push_back({text.substr(start, i - start), start, i});
    }
    return tokens;
}

std::size_t count_words(std::string_view text) {
    std::size_t words = 0;
    bool in_word = false;
    for (char ch : text) {
        bool sep = is_sep(static_cast<unsigned char>(ch));
        if (!sep && !in_word) ++words;
        in_word = !sep;
    }
    return words;
}

// ---------------------------------------------------------------------------
// Label projection
// ---------------------------------------------------------------------------

TokenLabels spans_to_labels(const AnnotatedNote& note,
                            const std::vector<Token>& tokens) {
    TokenLabels labels;
    labels.binary.assign(tokens.size(), false);
    labels.category.assign(tokens.size(), PiiCategory::Other);
    labels.gender.assign(tokens.size(), Gender::Unspecified);

    // Gold spans are sorted and disjoint, so one forward sweep suffices.
    std::vector<bool> span_hit(note.spans.size(), false);
    std::size_t si = 0;
    for (std::size_t ti = 0; ti < tokens.size(); ++ti) {
        const Token& tok = tokens[ti];
        while (si < note.spans.size() && note.spans[si].end <= tok.start) ++si;
        // The earliest span overlapping this token labels it.
        for (std::size_t sj = si; sj < note.spans.size(); ++sj) {
            const Span& sp = note.spans[sj];
            if (sp.start >= tok.end) break;
            if (!sp.overlaps(tok.start, tok.end)) continue;
            span_hit[sj] = true;
            if (!labels.binary[ti]) {
                labels.binary[ti] = true;
                labels.category[ti] = sp.category;
                labels.gender[ti] = sp.gender;
            }
        }
    }
    for (std::size_t sj = 0; sj < note.spans.size(); ++sj) {
        if (!span_hit[sj])
            throw SpanTokenMismatch("note '" + note.id + "': " +
                                    span_repr(note.spans[sj]) +
                                    " overlaps no token");
    }
    return labels;
}

// ---------------------------------------------------------------------------
// Corpus records
// ---------------------------------------------------------------------------

namespace {

void reject_unknown_fields(const json& obj,
                           std::initializer_list<const char*> allowed,
                           const char* what) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* a : allowed)
            if (it.key() == a) { known = true; break; }
        if (!known)
            throw ParseError(std::string(what) + " has unknown field '" +
                             it.key() + "'");
    }
}

Span span_from_json(const json& j) {
    if (!j.is_object()) throw ParseError("span must be an object");
    reject_unknown_fields(j, {"start", "end", "category", "gender"}, "span");
    Span s;
    if (!j.contains("start") || !j.contains("end") || !j.contains("category"))
        throw ParseError("span requires start, end and category");
    s.start = j.at("start").get<std::uint64_t>();
    s.end = j.at("end").get<std::uint64_t>();
    s.category = category_from_string(j.at("category").get<std::string>());
    if (j.contains("gender"))
        s.gender = gender_from_string(j.at("gender").get<std::string>());
    return s;
}

AnnotatedNote note_from_json(const json& j) {
    if (!j.is_object()) throw ParseError("corpus record must be an object");
    reject_unknown_fields(j, {"id", "text", "locale", "spans", "provenance"},
                          "corpus record");
    if (!j.contains("id") || !j.contains("text") || !j.contains("locale") ||
        !j.contains("spans"))
        throw ParseError("corpus record requires id, text, locale and spans");
    AnnotatedNote note;
    note.id = j.at("id").get<std::string>();
    note.text = j.at("text").get<std::string>();
    note.locale = locale_from_string(j.at("locale").get<std::string>());
    for (const json& js : j.at("spans")) note.spans.push_back(span_from_json(js));
    if (j.contains("provenance")) {
        const json& p = j.at("provenance");
        reject_unknown_fields(p, {"template_id", "seed"}, "provenance");
        Provenance prov;
        prov.template_id = p.at("template_id").get<std::string>();
        prov.seed = p.at("seed").get<std::uint64_t>();
        note.provenance = prov;
    }
    return note;
}

json note_to_json(const AnnotatedNote& note) {
    json spans = json::array();
    for (const Span& s : note.spans) {
        spans.push_back({{"start", s.start},
                         {"end", s.end},
                         {"category", to_string(s.category)},
                         {"gender", to_string(s.gender)}});
    }
    json j = {{"id", note.id},
              {"text", note.text},
              {"locale", to_string(note.locale)},
              {"spans", std::move(spans)}};
    if (note.provenance) {
        j["provenance"] = {{"template_id", note.provenance->template_id},
                           {"seed", note.provenance->seed}};
    }
    return j;
}

} // namespace

std::vector<AnnotatedNote> parse_corpus(std::istream& source) {
    std::vector<AnnotatedNote> notes;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid record: ") + e.what(),
                             line_no);
        }
        AnnotatedNote note;
        try {
            note = note_from_json(j);
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid record: ") + e.what(),
                             line_no);
        } catch (const ParseError& e) {
            throw ParseError(e.what(), line_no);
        }
        validate_note(note);
        if (!seen_ids.insert(note.id).second)
            throw ValidationError("duplicate note id '" + note.id + "'");
        notes.push_back(std::move(note));
    }
    return notes;
}

std::vector<AnnotatedNote> parse_corpus_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file '" + path + "'");
    return parse_corpus(in);
}

std::string serialize_note(const AnnotatedNote& note) {
    return note_to_json(note).dump();
}

void serialize_corpus(const std::vector<AnnotatedNote>& notes,
                      std::ostream& out) {
    for (const AnnotatedNote& n : notes) out << serialize_note(n) << '\n';
}

void write_corpus_file(const std::vector<AnnotatedNote>& notes,
                       const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write corpus file '" + path + "'");
    serialize_corpus(notes, out);
    if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

std::vector<Placeholder> parse_placeholders(std::string_view body) {
    std::vector<Placeholder> result;
    std::size_t pos = 0;
    while (true) {
        std::size_t open = body.find("{{", pos);
        if (open == std::string_view::npos) break;
        std::size_t close = body.find("}}", open + 2);
        if (close == std::string_view::npos)
            throw ParseError("unterminated placeholder at offset " +
                             std::to_string(open));
        std::string_view inner = body.substr(open + 2, close - open - 2);
        std::string repr = "{{" + std::string(inner) + "}}";

        std::vector<std::string_view> parts;
        std::size_t p = 0;
        while (true) {
            std::size_t colon = inner.find(':', p);
            if (colon == std::string_view::npos) {
                parts.push_back(inner.substr(p));
                break;
            }
            parts.push_back(inner.substr(p, colon - p));
            p = colon + 1;
        }
        if (parts.size() < 2 || parts.size() > 3)
            throw ParseError("placeholder '" + repr + "' at offset " +
                             std::to_string(open) +
                             ": expected {{category:key}} or {{name:key:f|m}}");
        Placeholder ph;
        try {
            ph.category = category_from_string(parts[0]);
        } catch (const ParseError&) {
            throw ParseError("placeholder '" + repr + "' at offset " +
                             std::to_string(open) + ": unknown category '" +
                             std::string(parts[0]) + "'");
        }
        if (parts[1].empty())
            throw ParseError("placeholder '" + repr + "' at offset " +
                             std::to_string(open) + ": empty key");
        ph.key = std::string(parts[1]);
        if (parts.size() == 3) {
            if (ph.category != PiiCategory::Name)
                throw ParseError("placeholder '" + repr + "' at offset " +
                                 std::to_string(open) +
                                 ": only name placeholders take a gender");
            if (parts[2] == "f") ph.gender = Gender::Feminine;
            else if (parts[2] == "m") ph.gender = Gender::Masculine;
            else
                throw ParseError("placeholder '" + repr + "' at offset " +
                                 std::to_string(open) + ": gender must be f or m");
        }
        ph.body_start = open;
        ph.body_end = close + 2;
        result.push_back(std::move(ph));
        pos = close + 2;
    }
    return result;
}

std::vector<NoteTemplate> parse_templates(std::istream& source) {
    std::vector<NoteTemplate> templates;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid record: ") + e.what(),
                             line_no);
        }
        NoteTemplate tpl;
        try {
            if (!j.is_object()) throw ParseError("template must be an object");
            reject_unknown_fields(j, {"id", "body"}, "template record");
            if (!j.contains("id") || !j.contains("body"))
                throw ParseError("template record requires id and body");
            tpl.id = j.at("id").get<std::string>();
            tpl.body = j.at("body").get<std::string>();
            tpl.placeholders = parse_placeholders(tpl.body);
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid record: ") + e.what(),
                             line_no);
        } catch (const ParseError& e) {
            throw ParseError(e.what(), line_no);
        }
        if (tpl.id.empty()) throw ValidationError("template id must be non-empty");
        if (!seen_ids.insert(tpl.id).second)
            throw ValidationError("duplicate template id '" + tpl.id + "'");
        templates.push_back(std::move(tpl));
    }
    return templates;
}

std::vector<NoteTemplate> parse_templates_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open template file '" + path + "'");
    return parse_templates(in);
}

std::string serialize_template(const NoteTemplate& tpl) {
    return json{{"id", tpl.id}, {"body", tpl.body}}.dump();
}

} // namespace deidbench
