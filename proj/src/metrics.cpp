#include "deidbench/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <unordered_map>

#include "deidbench/parallel.hpp"

namespace deidbench {

namespace {

struct NoteCounts {
    ConfusionCounts overall;
    ConfusionCounts binary_overall;
    std::map<PiiCategory, ConfusionCounts> per_category;
    std::map<Gender, ConfusionCounts> per_gender;
    std::size_t tokens = 0;
};

/// Per-token predicted label: whether any predicted span overlaps, and the
/// category of the earliest overlapping span.
struct PredLabel {
    bool pii = false;
    PiiCategory category = PiiCategory::Other;
};

std::vector<PredLabel> project_prediction(const std::vector<Token>& tokens,
                                          std::vector<Span> spans) {
    std::sort(spans.begin(), spans.end(),
              [](const Span& a, const Span& b) { return a.start < b.start; });
    std::vector<PredLabel> labels(tokens.size());
    std::size_t si = 0;
    for (std::size_t ti = 0; ti < tokens.size(); ++ti) {
        const Token& tok = tokens[ti];
        while (si < spans.size() && spans[si].end <= tok.start) ++si;
        for (std::size_t sj = si; sj < spans.size(); ++sj) {
            if (spans[sj].start >= tok.end) break;
            if (!spans[sj].overlaps(tok.start, tok.end)) continue;
            if (!labels[ti].pii) {
                labels[ti].pii = true;
                labels[ti].category = spans[sj].category;
            }
        }
    }
    return labels;
}

NoteCounts score_note(const AnnotatedNote& note, const Prediction& pred,
                      ScoreMode mode) {
    const std::vector<Token> tokens = tokenize(note.text);
    const TokenLabels gold = spans_to_labels(note, tokens);
    const std::vector<PredLabel> predicted =
        project_prediction(tokens, pred.spans);

    NoteCounts counts;
    counts.tokens = tokens.size();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const bool gp = gold.binary[i];
        const bool pp = predicted[i].pii;
        const bool cat_ok = pp && predicted[i].category == gold.category[i];
        const bool credit =
            mode == ScoreMode::Binary ? pp : (gp ? cat_ok : pp);

        if (gp) {
            if (pp) ++counts.binary_overall.tp; else ++counts.binary_overall.fn;
            ConfusionCounts& cat = counts.per_category[gold.category[i]];
            if (credit) {
                ++counts.overall.tp;
                ++cat.tp;
            } else {
                ++counts.overall.fn;
                ++cat.fn;
            }
            if (gold.category[i] == PiiCategory::Name) {
                ConfusionCounts& g = counts.per_gender[gold.gender[i]];
                if (credit) ++g.tp; else ++g.fn;
            }
        } else {
            if (pp) {
                ++counts.binary_overall.fp;
                ++counts.overall.fp;
                ++counts.per_category[predicted[i].category].fp;
            } else {
                ++counts.binary_overall.tn;
                ++counts.overall.tn;
            }
        }
    }
    return counts;
}

} // namespace

EvalReport score(const std::vector<AnnotatedNote>& gold,
                 const std::vector<Prediction>& predictions, ScoreMode mode,
                 std::size_t jobs) {
    std::unordered_map<std::string, const Prediction*> by_id;
    for (const Prediction& p : predictions) {
        if (!by_id.emplace(p.note_id, &p).second)
            throw ValidationError("duplicate prediction for note '" +
                                  p.note_id + "'");
    }
    std::vector<std::string> unmatched;
    for (const AnnotatedNote& n : gold)
        if (!by_id.count(n.id)) unmatched.push_back(n.id);
    if (by_id.size() != gold.size() || !unmatched.empty()) {
        std::unordered_map<std::string, bool> gold_ids;
        for (const AnnotatedNote& n : gold) gold_ids[n.id] = true;
        for (const Prediction& p : predictions)
            if (!gold_ids.count(p.note_id)) unmatched.push_back(p.note_id);
        if (!unmatched.empty() || by_id.size() != gold.size())
            throw IdMismatch("gold and prediction id sets differ", unmatched);
    }

    std::vector<NoteCounts> per_note(gold.size());
    parallel_for(gold.size(), jobs, [&](std::size_t i) {
        per_note[i] = score_note(gold[i], *by_id.at(gold[i].id), mode);
    });

    EvalReport report;
    report.mode = mode;
    report.note_count = gold.size();
    for (const NoteCounts& c : per_note) {
        report.overall += c.overall;
        report.binary_overall += c.binary_overall;
        for (const auto& [cat, counts] : c.per_category)
            report.per_category[cat] += counts;
        for (const auto& [g, counts] : c.per_gender)
            report.per_gender[g] += counts;
        report.token_count += c.tokens;
    }
    return report;
}

GenderRecall recall_by_gender(const EvalReport& report) {
    GenderRecall out;
    auto slice = [&](Gender g) -> std::optional<double> {
        auto it = report.per_gender.find(g);
        if (it == report.per_gender.end() || it->second.tp + it->second.fn == 0)
            return std::nullopt;
        return it->second.recall();
    };
    out.r_f = slice(Gender::Feminine);
    out.r_m = slice(Gender::Masculine);
    return out;
}

double relative_recall_drop(double r_base, double r_variant) {
    if (r_base == 0.0)
        throw DegenerateBaseline("baseline recall of 0 has no relative drop");
    if (r_base < 0.0 || r_base > 1.0 || r_variant < 0.0 || r_variant > 1.0)
        throw ValidationError("recalls must lie in [0, 1]");
    return (r_base - r_variant) / r_base;
}

// ---------------------------------------------------------------------------
// Throughput
// ---------------------------------------------------------------------------

ThroughputReport measure_throughput(const DeidFn& deid,
                                    const std::vector<AnnotatedNote>& notes,
                                    std::size_t repeats) {
    if (repeats < 1) throw ValidationError("repeats must be >= 1");
    if (notes.empty()) throw ValidationError("throughput needs a non-empty corpus");

    ThroughputReport report;
    for (const AnnotatedNote& n : notes)
        report.total_words += count_words(n.text);

    deid(notes); // warm-up, unmeasured

    using Clock = std::chrono::steady_clock;
    report.runs = repeats;
    report.seconds_per_run.reserve(repeats);
    for (std::size_t r = 0; r < repeats; ++r) {
        auto t0 = Clock::now();
        deid(notes);
        report.seconds_per_run.push_back(
            std::chrono::duration<double>(Clock::now() - t0).count());
    }

    for (double s : report.seconds_per_run) report.total_seconds += s;
    report.mean_seconds = report.total_seconds / repeats;
    double var = 0.0;
    for (double s : report.seconds_per_run) {
        double d = s - report.mean_seconds;
        var += d * d;
    }
    report.std_seconds = std::sqrt(var / repeats); // population std
    report.words_per_sec =
        report.mean_seconds > 0.0
            ? static_cast<double>(report.total_words) / report.mean_seconds
            : 0.0;
    return report;
}

} // namespace deidbench
