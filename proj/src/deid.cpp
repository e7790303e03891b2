#include "deidbench/deid.hpp"

#include <algorithm>
#include <cctype>

namespace deidbench {

// ---------------------------------------------------------------------------
// Prediction normalization
// ---------------------------------------------------------------------------

std::size_t normalize_prediction_spans(std::vector<Span>& spans,
                                       std::size_t text_len) {
    std::size_t touched = 0;
    std::vector<Span> clipped;
    clipped.reserve(spans.size());
    for (Span s : spans) {
        Span orig = s;
        s.start = std::min(s.start, text_len);
        s.end = std::min(s.end, text_len);
        if (s.start != orig.start || s.end != orig.end) ++touched;
        if (s.start < s.end) clipped.push_back(s);
    }
    std::stable_sort(clipped.begin(), clipped.end(),
                     [](const Span& a, const Span& b) {
                         if (a.start != b.start) return a.start < b.start;
                         return a.end > b.end; // longer first on same start
                     });
    std::vector<Span> out;
    for (Span s : clipped) {
        if (!out.empty() && s.start < out.back().end) {
            if (s.category == out.back().category) {
                out.back().end = std::max(out.back().end, s.end);
                ++touched;
                continue;
            }
            s.start = out.back().end; // earlier span wins the overlap
            ++touched;
            if (s.start >= s.end) continue;
        }
        out.push_back(s);
    }
    spans = std::move(out);
    return touched;
}

// ---------------------------------------------------------------------------
// RuleSet
// ---------------------------------------------------------------------------

namespace {

std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out)
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

} // namespace

void RuleSet::add_rule(std::string name, std::string pattern,
                       PiiCategory category, int priority, bool icase) {
    if (!priorities_.insert(priority).second)
        throw ConfigError("duplicate rule priority " + std::to_string(priority) +
                          " for rule '" + name + "'");
    PatternRule rule;
    rule.name = std::move(name);
    rule.pattern = std::move(pattern);
    rule.category = category;
    rule.priority = priority;
    rule.icase = icase;
    auto flags = std::regex::ECMAScript | std::regex::optimize;
    if (icase) flags |= std::regex::icase;
    try {
        rule.compiled = std::regex(rule.pattern, flags);
    } catch (const std::regex_error& e) {
        throw ConfigError("rule '" + rule.name + "': pattern does not compile: " +
                          e.what());
    }
    rules_.push_back(std::move(rule));
}

void RuleSet::add_name(std::string word) {
    if (!word.empty()) names_.insert(std::move(word));
}

void RuleSet::add_place(std::string phrase, PiiCategory category) {
    std::vector<Token> toks = tokenize(phrase);
    if (toks.empty()) return;
    PlacePhrase pp;
    pp.category = category;
    for (const Token& t : toks) pp.tokens.emplace_back(t.text);
    places_[pp.tokens.front()].push_back(std::move(pp));
}

void RuleSet::add_exclusion(std::string term) {
    exclusions_.insert(ascii_lower(term));
}

bool RuleSet::empty() const {
    return rules_.empty() && names_.empty() && places_.empty();
}

RuleSet RuleSet::default_patterns() {
    RuleSet rs;
    // Dates: numeric, ISO, and month-name forms.
    rs.add_rule("date_numeric", R"(\b\d{1,2}/\d{1,2}/\d{2,4}\b)",
                PiiCategory::Date, 140);
    rs.add_rule("date_iso", R"(\b\d{4}-\d{2}-\d{2}\b)", PiiCategory::Date, 139);
    const std::string months =
        "(?:January|February|March|April|May|June|July|August|September|"
        "October|November|December|Jan|Feb|Mar|Apr|Jun|Jul|Aug|Sep|Sept|Oct|"
        "Nov|Dec)";
    rs.add_rule("date_month_first",
                "\\b" + months + R"(\.?\s+\d{1,2}(?:st|nd|rd|th)?,?\s+\d{4}\b)",
                PiiCategory::Date, 138);
    rs.add_rule("date_day_first",
                R"(\b\d{1,2}(?:st|nd|rd|th)?\s+(?:of\s+)?)" + months +
                    R"(\.?,?\s+\d{4}\b)",
                PiiCategory::Date, 137);
    // Phone/fax: North-American and international +CC forms.
    rs.add_rule("phone_na_paren", R"(\(\d{3}\)\s?\d{3}[- ]\d{4}\b)",
                PiiCategory::PhoneFax, 150);
    rs.add_rule("phone_na_dash", R"(\b\d{3}[-.]\d{3}[-.]\d{4}\b)",
                PiiCategory::PhoneFax, 149);
    rs.add_rule("phone_intl", R"(\+\d{1,3}[ -]?\d(?:[\d ()\-]{5,16}\d)?)",
                PiiCategory::PhoneFax, 148);
    // Email, RFC-lite.
    rs.add_rule("email", R"([A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,})",
                PiiCategory::Email, 160);
    // Labeled record/account digit runs.
    rs.add_rule("mrn", R"(\bMRN[:#\s]*\d{5,12}\b)", PiiCategory::Other, 155,
                /*icase=*/true);
    rs.add_rule("account",
                R"(\b(?:Account|Acct)[.:#\s]*(?:No[.:]?\s*)?\d{5,12}\b)",
                PiiCategory::Other, 154, /*icase=*/true);
    // Street addresses and postal codes.
    rs.add_rule("street_address",
                R"(\b\d{1,5}\s+[A-Z][A-Za-z]+(?:\s[A-Z][A-Za-z]+)?\s+(?:Street|St|Avenue|Ave|Road|Rd|Boulevard|Blvd|Lane|Ln|Drive|Dr|Court|Ct|Place|Pl|Way|Terrace|Crescent)\b)",
                PiiCategory::Address, 130);
    rs.add_rule("zip_uk", R"(\b[A-Z]{1,2}\d[A-Z\d]?\s?\d[A-Z]{2}\b)",
                PiiCategory::Address, 112);
    rs.add_rule("zip_ca", R"(\b[A-Z]\d[A-Z]\s?\d[A-Z]\d\b)",
                PiiCategory::Address, 111);
    rs.add_rule("zip_us", R"(\b\d{5}(?:-\d{4})?\b)", PiiCategory::Address, 110);
    // Clinical terms that collide with surnames or given names.
    for (const char* term :
         {"coumadin", "lovenox", "haldol", "benadryl", "keppra", "protonix",
          "ativan", "tylenol", "motrin", "lipitor", "zofran", "white", "brown",
          "young", "gray", "stone", "park", "bill", "mark", "may", "june",
          "april", "rose", "grace", "virginia", "august"})
        rs.add_exclusion(term);
    return rs;
}

RuleSet RuleSet::defaults(const std::string& pool_dir) {
    RuleSet rs = default_patterns();
    // Dictionaries come from the bundled US pool, the same way rule-based
    // scrubbers ship census name lists.
    IdentifierPool pool = load_pool(Locale::en_US, pool_dir);
    for (const std::string& full : pool.name_feminine.entries)
        for (const Token& t : tokenize(full)) rs.add_name(std::string(t.text));
    for (const std::string& full : pool.name_masculine.entries)
        for (const Token& t : tokenize(full)) rs.add_name(std::string(t.text));
    for (auto cat : {PiiCategory::Hospital, PiiCategory::City,
                     PiiCategory::State, PiiCategory::University}) {
        auto it = pool.lists.find(cat);
        if (it == pool.lists.end()) continue;
        for (const std::string& phrase : it->second.entries)
            rs.add_place(phrase, cat);
    }
    return rs;
}

// ---------------------------------------------------------------------------
// Rule application
// ---------------------------------------------------------------------------

namespace {

struct Candidate {
    std::size_t start;
    std::size_t end;
    PiiCategory category;
    int priority;
};

bool only_whitespace(std::string_view text, std::size_t from, std::size_t to) {
    for (std::size_t i = from; i < to; ++i) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (c != ' ' && c != '\t' && c != '\n' && c != '\r') return false;
    }
    return true;
}

} // namespace

std::vector<Span> deid_rules(std::string_view text, const RuleSet& rules) {
    std::vector<Candidate> candidates;
    const auto& exclusions = rules.exclusions();
    auto excluded = [&](std::size_t start, std::size_t end) {
        if (exclusions.empty()) return false;
        return exclusions.count(
                   ascii_lower(text.substr(start, end - start))) > 0;
    };

    for (const PatternRule& rule : rules.rules()) {
        auto begin = std::cregex_iterator(text.data(), text.data() + text.size(),
                                          rule.compiled);
        for (auto it = begin; it != std::cregex_iterator(); ++it) {
            std::size_t start = static_cast<std::size_t>(it->position(0));
            std::size_t end = start + static_cast<std::size_t>(it->length(0));
            if (start == end || excluded(start, end)) continue;
            candidates.push_back({start, end, rule.category, rule.priority});
        }
    }

    const std::vector<Token> tokens = tokenize(text);
    if (!rules.names().empty()) {
        for (const Token& tok : tokens) {
            if (!rules.names().count(std::string(tok.text))) continue;
            if (excluded(tok.start, tok.end)) continue;
            candidates.push_back({tok.start, tok.end, PiiCategory::Name,
                                  rules.name_dictionary_priority});
        }
    }
    if (!rules.places_by_first_token().empty()) {
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            auto it = rules.places_by_first_token().find(
                std::string(tokens[i].text));
            if (it == rules.places_by_first_token().end()) continue;
            for (const RuleSet::PlacePhrase& phrase : it->second) {
                if (i + phrase.tokens.size() > tokens.size()) continue;
                bool match = true;
                for (std::size_t k = 1; k < phrase.tokens.size(); ++k) {
                    if (tokens[i + k].text != phrase.tokens[k]) {
                        match = false;
                        break;
                    }
                }
                if (!match) continue;
                std::size_t start = tokens[i].start;
                std::size_t end = tokens[i + phrase.tokens.size() - 1].end;
                if (excluded(start, end)) continue;
                candidates.push_back({start, end, phrase.category,
                                      rules.place_dictionary_priority});
            }
        }
    }

    // Higher priority, then longer match, then earlier start.
    std::sort(candidates.begin(), candidates.end(),
              [](const Candidate& a, const Candidate& b) {
                  if (a.priority != b.priority) return a.priority > b.priority;
                  std::size_t la = a.end - a.start, lb = b.end - b.start;
                  if (la != lb) return la > lb;
                  if (a.start != b.start) return a.start < b.start;
                  return a.end < b.end;
              });

    std::vector<Candidate> accepted;
    for (const Candidate& c : candidates) {
        bool clash = false;
        for (const Candidate& a : accepted) {
            if (c.start < a.end && a.start < c.end) {
                clash = true;
                break;
            }
        }
        if (!clash) accepted.push_back(c);
    }
    std::sort(accepted.begin(), accepted.end(),
              [](const Candidate& a, const Candidate& b) {
                  return a.start < b.start;
              });

    std::vector<Span> spans;
    for (const Candidate& c : accepted) {
        if (!spans.empty() && spans.back().category == c.category &&
            only_whitespace(text, spans.back().end, c.start)) {
            spans.back().end = c.end;
            continue;
        }
        spans.push_back({c.start, c.end, c.category, Gender::Unspecified});
    }
    return spans;
}

Prediction predict_rules(const AnnotatedNote& note, const RuleSet& rules) {
    return {note.id, deid_rules(note.text, rules)};
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

MaskPolicy MaskPolicy::surrogate(std::shared_ptr<const IdentifierPool> pool,
                                 std::uint64_t seed) {
    if (!pool)
        throw ConfigError("surrogate mask policy requires a loaded pool");
    return {Kind::Surrogate, std::move(pool), seed};
}

namespace {

std::string category_tag(PiiCategory c) {
    std::string tag = to_string(c);
    for (char& ch : tag)
        ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return "[" + tag + "]";
}

} // namespace

std::string mask(std::string_view text, const std::vector<Span>& spans,
                 const MaskPolicy& policy) {
    if (policy.kind == MaskPolicy::Kind::Surrogate && !policy.pool)
        throw ConfigError("surrogate mask policy requires a loaded pool");

    std::vector<Span> sorted = spans;
    std::sort(sorted.begin(), sorted.end(),
              [](const Span& a, const Span& b) { return a.start < b.start; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i].end > text.size() || sorted[i].start >= sorted[i].end)
            throw ValidationError("mask: span out of bounds or empty");
        if (i > 0 && sorted[i].start < sorted[i - 1].end)
            throw OverlapError("mask: overlapping spans at byte " +
                               std::to_string(sorted[i].start));
    }

    Rng rng(policy.seed);
    std::string out(text);
    // Right-to-left so earlier offsets stay valid.
    for (auto it = sorted.rbegin(); it != sorted.rend(); ++it) {
        std::string replacement;
        switch (policy.kind) {
        case MaskPolicy::Kind::CategoryTag:
            replacement = category_tag(it->category);
            break;
        case MaskPolicy::Kind::FixedToken:
            replacement = "[REDACTED]";
            break;
        case MaskPolicy::Kind::Surrogate:
            replacement = draw(*policy.pool, it->category, it->gender, rng);
            break;
        }
        out.replace(it->start, it->end - it->start, replacement);
    }
    return out;
}

} // namespace deidbench
