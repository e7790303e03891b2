#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deidbench/corpus.hpp"
#include "deidbench/pool.hpp"

namespace deidbench {

/// Emitted when a draw had to use a fallback sub-pool instead of native data.
struct FallbackWarning {
    Locale locale;
    PiiCategory category;
    Gender gender = Gender::Unspecified;

    bool operator==(const FallbackWarning&) const = default;
    std::string to_json() const;
};

struct SubstituteOptions {
    /// Same (category, key, gender) -> same surrogate within one note.
    /// Disable to redraw on every mention.
    bool consistent_mentions = true;
};

/// The resolved draws for one (template, locale, seed) triple. Identical
/// inputs yield an identical plan.
struct SubstitutionPlan {
    struct Binding {
        PiiCategory category;
        std::string key;
        Gender gender;
        std::string surrogate;
        bool operator==(const Binding&) const = default;
    };

    std::string template_id;
    Locale locale = Locale::en_US;
    std::uint64_t seed = 0;
    std::vector<Binding> bindings;           // distinct keys, first-seen order
    std::vector<std::string> mention_values; // one per placeholder occurrence

    bool operator==(const SubstitutionPlan&) const = default;
};

SubstitutionPlan plan_substitution(const NoteTemplate& tpl,
                                   const IdentifierPool& pool,
                                   std::uint64_t seed,
                                   const SubstituteOptions& opts = {},
                                   std::vector<FallbackWarning>* warnings = nullptr);

/// Materializes a plan into an annotated note with exact span offsets and
/// provenance {template_id, seed}.
AnnotatedNote realize_plan(const NoteTemplate& tpl, const SubstitutionPlan& plan,
                           const std::string& note_id);

/// plan + realize with note id "{template_id}#{locale}#0".
AnnotatedNote substitute(const NoteTemplate& tpl, const IdentifierPool& pool,
                         std::uint64_t seed, const SubstituteOptions& opts = {},
                         std::vector<FallbackWarning>* warnings = nullptr);

struct BuildOptions {
    SubstituteOptions substitute;
    std::size_t jobs = 1;
};

/// For each template, per_template notes with derived seeds seed + i
/// (wrapping) and ids "{template_id}#{locale}#{i}". Deterministic for any
/// jobs value. Fallback warnings are deduplicated per (category, gender).
std::vector<AnnotatedNote> build_corpus(const std::vector<NoteTemplate>& templates,
                                        const IdentifierPool& pool,
                                        std::uint64_t seed,
                                        std::size_t per_template,
                                        const BuildOptions& opts = {},
                                        std::vector<FallbackWarning>* warnings = nullptr);

} // namespace deidbench
