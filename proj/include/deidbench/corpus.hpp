#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deidbench/errors.hpp"

namespace deidbench {

// ---------------------------------------------------------------------------
// Category taxonomy
// ---------------------------------------------------------------------------

/// The closed set of identifier categories. "Other" absorbs MRN and account
/// numbers; there is no finer split.
enum class PiiCategory {
    Name,
    PhoneFax,
    Hospital,
    City,
    State,
    Address,
    Country,
    Company,
    University,
    Date,
    Email,
    Other,
};

inline constexpr PiiCategory kAllCategories[] = {
    PiiCategory::Name,    PiiCategory::PhoneFax, PiiCategory::Hospital,
    PiiCategory::City,    PiiCategory::State,    PiiCategory::Address,
    PiiCategory::Country, PiiCategory::Company,  PiiCategory::University,
    PiiCategory::Date,    PiiCategory::Email,    PiiCategory::Other,
};
inline constexpr std::size_t kCategoryCount = 12;

/// Stable lowercase snake-case serialization ("phone_fax", ...).
std::string to_string(PiiCategory c);
/// Inverse of to_string. Throws ParseError on an unknown name.
PiiCategory category_from_string(std::string_view s);

/// Only Name spans may carry Feminine or Masculine.
enum class Gender { Feminine, Masculine, Unspecified };

std::string to_string(Gender g);
Gender gender_from_string(std::string_view s);

/// Locale of the identifier pool a note was generated against.
enum class Locale { en_US, en_GB, en_AU, en_CA, zh, es, hi, fr, bn };

inline constexpr Locale kAllLocales[] = {
    Locale::en_US, Locale::en_GB, Locale::en_AU, Locale::en_CA, Locale::zh,
    Locale::es,    Locale::hi,    Locale::fr,    Locale::bn,
};
inline constexpr std::size_t kLocaleCount = 9;

std::string to_string(Locale l);
Locale locale_from_string(std::string_view s);

// ---------------------------------------------------------------------------
// Data model
// ---------------------------------------------------------------------------

/// Half-open byte range [start, end) over a note's text.
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;
    PiiCategory category = PiiCategory::Other;
    Gender gender = Gender::Unspecified;

    bool operator==(const Span&) const = default;
    std::size_t length() const { return end - start; }
    bool overlaps(std::size_t tok_start, std::size_t tok_end) const {
        return start < tok_end && tok_start < end;
    }
};

struct Provenance {
    std::string template_id;
    std::uint64_t seed = 0;
    bool operator==(const Provenance&) const = default;
};

/// One annotated note: text plus gold spans, sorted and non-overlapping.
struct AnnotatedNote {
    std::string id;
    std::string text;
    std::vector<Span> spans;
    Locale locale = Locale::en_US;
    std::optional<Provenance> provenance;

    bool operator==(const AnnotatedNote&) const = default;
};

/// Throws ValidationError / SpanTokenMismatch naming the offending span.
void validate_note(const AnnotatedNote& note);

/// Placeholder parsed out of a template body: {{category:key}} or
/// {{name:key:f|m}}.
struct Placeholder {
    PiiCategory category = PiiCategory::Other;
    std::string key;
    Gender gender = Gender::Unspecified;
    std::size_t body_start = 0; // offset of "{{" in the body
    std::size_t body_end = 0;   // offset one past "}}"

    bool operator==(const Placeholder&) const = default;
};

struct NoteTemplate {
    std::string id;
    std::string body;
    std::vector<Placeholder> placeholders; // in body order

    bool operator==(const NoteTemplate&) const = default;
};

/// Non-empty slice of the original text; offsets are byte offsets.
struct Token {
    std::string_view text;
    std::size_t start = 0;
    std::size_t end = 0;
};

/// Per-token labels projected from gold spans.
struct TokenLabels {
    std::vector<bool> binary;                // token is PII
    std::vector<PiiCategory> category;       // meaningful iff binary[i]
    std::vector<Gender> gender;              // meaningful iff binary[i]

    std::size_t size() const { return binary.size(); }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Splits text into tokens: maximal runs of non-whitespace, split further so
/// that each ASCII punctuation character is its own token. Bytes >= 0x80 are
/// word characters, so multi-byte scripts stay inside word tokens and byte
/// offsets always fall on character boundaries.
std::vector<Token> tokenize(std::string_view text);

/// Labels each token PII iff it overlaps a gold span by at least one byte.
/// When a token straddles two spans the earlier span wins. Throws
/// SpanTokenMismatch if a span overlaps no token.
TokenLabels spans_to_labels(const AnnotatedNote& note,
                            const std::vector<Token>& tokens);

/// Line-delimited JSON corpus I/O. Records are validated; unknown fields are
/// rejected. Order is preserved.
std::vector<AnnotatedNote> parse_corpus(std::istream& source);
std::vector<AnnotatedNote> parse_corpus_file(const std::string& path);
std::string serialize_note(const AnnotatedNote& note);
void serialize_corpus(const std::vector<AnnotatedNote>& notes,
                      std::ostream& out);
void write_corpus_file(const std::vector<AnnotatedNote>& notes,
                       const std::string& path);

/// Parses the placeholder grammar of every template body eagerly, so grammar
/// violations surface here with placeholder text and offset.
std::vector<Placeholder> parse_placeholders(std::string_view body);
std::vector<NoteTemplate> parse_templates(std::istream& source);
std::vector<NoteTemplate> parse_templates_file(const std::string& path);
std::string serialize_template(const NoteTemplate& tpl);

/// Number of maximal whitespace-delimited runs.
std::size_t count_words(std::string_view text);

} // namespace deidbench
