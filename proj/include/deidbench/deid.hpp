#pragma once

#include <memory>
#include <regex>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "deidbench/corpus.hpp"
#include "deidbench/pool.hpp"

namespace deidbench {

/// One de-identifier's output for one note. Spans are sorted and
/// non-overlapping after normalization; predictors that do not report a
/// category map to Other.
struct Prediction {
    std::string note_id;
    std::vector<Span> spans;

    bool operator==(const Prediction&) const = default;
};

/// Sorts, clips to [0, text_len], merges overlapping same-category spans and
/// trims cross-category overlaps in favour of the earlier span. Returns the
/// number of spans that were clipped, trimmed or dropped.
std::size_t normalize_prediction_spans(std::vector<Span>& spans,
                                       std::size_t text_len);

// ---------------------------------------------------------------------------
// Rule engine
// ---------------------------------------------------------------------------

struct PatternRule {
    std::string name;
    std::string pattern; // source text, kept for documentation output
    PiiCategory category = PiiCategory::Other;
    int priority = 0;    // higher wins on overlap
    bool icase = false;
    std::regex compiled;
};

/// Regex patterns plus token dictionaries and an exclusion list of clinical
/// terms that must never be masked (drug names colliding with surnames).
class RuleSet {
public:
    /// Compiles and registers a rule. Throws ConfigError on a duplicate
    /// priority or a pattern that does not compile.
    void add_rule(std::string name, std::string pattern, PiiCategory category,
                  int priority, bool icase = false);

    /// Single-token, capitalization-sensitive person-name words.
    void add_name(std::string word);
    /// Multi-token phrase mapped to a place-like category.
    void add_place(std::string phrase, PiiCategory category);
    /// Stored lowercase; any candidate whose normalized text equals an
    /// entry is dropped.
    void add_exclusion(std::string term);

    const std::vector<PatternRule>& rules() const { return rules_; }
    const std::unordered_set<std::string>& names() const { return names_; }
    const std::unordered_set<std::string>& exclusions() const {
        return exclusions_;
    }
    bool empty() const;

    int name_dictionary_priority = 120;
    int place_dictionary_priority = 125;

    /// The documented default rule inventory: numeric and month-name dates,
    /// North-American and +CC international phone forms, an RFC-lite email
    /// pattern, labeled MRN/account digit runs, US/Canadian/UK postal codes,
    /// street addresses, and dictionaries built from the en_US pool.
    static RuleSet defaults(const std::string& pool_dir = {});

    /// Defaults without the pool-backed dictionaries.
    static RuleSet default_patterns();

    struct PlacePhrase {
        std::vector<std::string> tokens;
        PiiCategory category;
    };
    const std::unordered_map<std::string, std::vector<PlacePhrase>>&
    places_by_first_token() const {
        return places_;
    }

private:
    std::vector<PatternRule> rules_;
    std::unordered_set<int> priorities_;
    std::unordered_set<std::string> names_;
    std::unordered_map<std::string, std::vector<PlacePhrase>> places_;
    std::unordered_set<std::string> exclusions_;
};

/// Runs every pattern and dictionary over the text. Overlapping candidates
/// are resolved by higher priority, then longer match, then earlier start;
/// excluded candidates are dropped before resolution. Adjacent same-category
/// hits separated only by whitespace are merged.
std::vector<Span> deid_rules(std::string_view text, const RuleSet& rules);

/// Convenience wrapper producing a Prediction for one note.
Prediction predict_rules(const AnnotatedNote& note, const RuleSet& rules);

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

struct MaskPolicy {
    enum class Kind { CategoryTag, FixedToken, Surrogate };

    Kind kind = Kind::CategoryTag;
    std::shared_ptr<const IdentifierPool> pool; // Surrogate only
    std::uint64_t seed = 0;

    static MaskPolicy category_tag() { return {Kind::CategoryTag, nullptr, 0}; }
    static MaskPolicy fixed_token() { return {Kind::FixedToken, nullptr, 0}; }
    static MaskPolicy surrogate(std::shared_ptr<const IdentifierPool> pool,
                                std::uint64_t seed);
};

/// Replaces each span right-to-left: CategoryTag -> "[NAME]" etc.,
/// FixedToken -> "[REDACTED]", Surrogate -> a drawn replacement. Text outside
/// the spans is byte-identical. Throws OverlapError on overlapping input.
std::string mask(std::string_view text, const std::vector<Span>& spans,
                 const MaskPolicy& policy);

} // namespace deidbench
