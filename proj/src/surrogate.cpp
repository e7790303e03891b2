#include "deidbench/surrogate.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <set>

#include <json.hpp>

#include "deidbench/parallel.hpp"

namespace deidbench {

std::string FallbackWarning::to_json() const {
    nlohmann::json j = {{"warning", "fallback_pool"},
                        {"locale", to_string(locale)},
                        {"category", to_string(category)}};
    if (category == PiiCategory::Name && gender != Gender::Unspecified)
        j["gender"] = to_string(gender);
    return j.dump();
}

namespace {

bool draw_is_fallback(const IdentifierPool& pool, const Placeholder& ph) {
    if (ph.category == PiiCategory::Name)
        return !pool.is_native_name(ph.gender);
    return !pool.is_native(ph.category);
}

} // namespace

SubstitutionPlan plan_substitution(const NoteTemplate& tpl,
                                   const IdentifierPool& pool,
                                   std::uint64_t seed,
                                   const SubstituteOptions& opts,
                                   std::vector<FallbackWarning>* warnings) {
    SubstitutionPlan plan;
    plan.template_id = tpl.id;
    plan.locale = pool.locale;
    plan.seed = seed;

    Rng rng(seed);
    // Binding lookup key: category/key/gender triple.
    std::map<std::tuple<PiiCategory, std::string, Gender>, std::size_t> index;
    std::set<std::pair<PiiCategory, Gender>> warned;

    for (const Placeholder& ph : tpl.placeholders) {
        auto lookup = std::make_tuple(ph.category, ph.key, ph.gender);
        auto it = index.find(lookup);
        if (opts.consistent_mentions && it != index.end()) {
            plan.mention_values.push_back(plan.bindings[it->second].surrogate);
            continue;
        }
        if (warnings && draw_is_fallback(pool, ph) &&
            warned.insert({ph.category, ph.gender}).second)
            warnings->push_back({pool.locale, ph.category, ph.gender});
        std::string value = draw(pool, ph.category, ph.gender, rng);
        if (it == index.end()) {
            index.emplace(lookup, plan.bindings.size());
            plan.bindings.push_back({ph.category, ph.key, ph.gender, value});
        }
        plan.mention_values.push_back(std::move(value));
    }
    return plan;
}

AnnotatedNote realize_plan(const NoteTemplate& tpl, const SubstitutionPlan& plan,
                           const std::string& note_id) {
    AnnotatedNote note;
    note.id = note_id;
    note.locale = plan.locale;
    note.provenance = Provenance{plan.template_id, plan.seed};
    note.text.reserve(tpl.body.size());

    std::size_t cursor = 0;
    for (std::size_t i = 0; i < tpl.placeholders.size(); ++i) {
        const Placeholder& ph = tpl.placeholders[i];
        note.text.append(tpl.body, cursor, ph.body_start - cursor);
        const std::string& value = plan.mention_values.at(i);
        Span span;
        span.start = note.text.size();
        note.text += value;
        span.end = note.text.size();
        span.category = ph.category;
        span.gender = ph.category == PiiCategory::Name ? ph.gender
                                                       : Gender::Unspecified;
        note.spans.push_back(span);
        cursor = ph.body_end;
    }
    note.text.append(tpl.body, cursor, tpl.body.size() - cursor);
    return note;
}

AnnotatedNote substitute(const NoteTemplate& tpl, const IdentifierPool& pool,
                         std::uint64_t seed, const SubstituteOptions& opts,
                         std::vector<FallbackWarning>* warnings) {
    SubstitutionPlan plan = plan_substitution(tpl, pool, seed, opts, warnings);
    return realize_plan(tpl, plan,
                        tpl.id + "#" + to_string(pool.locale) + "#0");
}

std::vector<AnnotatedNote> build_corpus(const std::vector<NoteTemplate>& templates,
                                        const IdentifierPool& pool,
                                        std::uint64_t seed,
                                        std::size_t per_template,
                                        const BuildOptions& opts,
                                        std::vector<FallbackWarning>* warnings) {
    if (per_template < 1)
        throw ValidationError("per_template must be >= 1");

    const std::string locale_code = to_string(pool.locale);
    std::vector<AnnotatedNote> notes(templates.size() * per_template);

    std::mutex warn_mutex;
    std::set<std::pair<PiiCategory, Gender>> warned;

    parallel_for(notes.size(), opts.jobs, [&](std::size_t n) {
        const std::size_t t = n / per_template;
        const std::size_t i = n % per_template;
        const NoteTemplate& tpl = templates[t];
        // Derived seed wraps mod 2^64 by unsigned arithmetic.
        const std::uint64_t note_seed = seed + static_cast<std::uint64_t>(i);
        std::vector<FallbackWarning> local;
        SubstitutionPlan plan = plan_substitution(
            tpl, pool, note_seed, opts.substitute, warnings ? &local : nullptr);
        notes[n] = realize_plan(
            tpl, plan, tpl.id + "#" + locale_code + "#" + std::to_string(i));
        if (warnings && !local.empty()) {
            std::lock_guard<std::mutex> lock(warn_mutex);
            for (const FallbackWarning& w : local)
                if (warned.insert({w.category, w.gender}).second)
                    warnings->push_back(w);
        }
    });
    return notes;
}

} // namespace deidbench
