#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deidbench/corpus.hpp"
#include "deidbench/deid.hpp"

namespace deidbench {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    /// 1.0 when nothing was predicted; empty notes are vacuously perfect.
    double precision() const {
        return tp + fp == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp);
    }
    /// 1.0 when there was nothing to find.
    double recall() const {
        return tp + fn == 0 ? 1.0 : static_cast<double>(tp) / (tp + fn);
    }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    bool operator==(const ConfusionCounts&) const = default;
};

enum class ScoreMode { Binary, Multiclass };

/// Token-level confusion counts, sliceable by category and gender.
/// `overall` uses the requested mode's credit rule; `binary_overall` always
/// gives category-agnostic credit. Per-category and per-gender slices carry
/// tp/fp/fn only (a per-slice tn is not defined); per-gender counts cover
/// gold Name tokens exclusively.
struct EvalReport {
    ScoreMode mode = ScoreMode::Binary;
    ConfusionCounts overall;
    ConfusionCounts binary_overall;
    std::map<PiiCategory, ConfusionCounts> per_category;
    std::map<Gender, ConfusionCounts> per_gender;
    std::size_t note_count = 0;
    std::size_t token_count = 0;

    double precision() const { return overall.precision(); }
    double recall() const { return overall.recall(); }
};

/// Scores predictions against gold notes. Predictions are projected to token
/// labels with the same any-overlap rule as spans_to_labels. Binary mode
/// credits a gold-PII token when any predicted span overlaps it; multiclass
/// mode additionally requires category equality. Throws IdMismatch when the
/// two id sets differ.
EvalReport score(const std::vector<AnnotatedNote>& gold,
                 const std::vector<Prediction>& predictions,
                 ScoreMode mode = ScoreMode::Binary, std::size_t jobs = 1);

struct GenderRecall {
    std::optional<double> r_f; // absent when no feminine gold Name tokens
    std::optional<double> r_m;
};

/// Recall over Feminine and Masculine gold Name tokens. A gender with zero
/// gold tokens is reported absent, not 0.
GenderRecall recall_by_gender(const EvalReport& report);

/// (r_base - r_variant) / r_base. Improvement is a negative drop. Throws
/// DegenerateBaseline when r_base == 0.
double relative_recall_drop(double r_base, double r_variant);

// ---------------------------------------------------------------------------
// Throughput
// ---------------------------------------------------------------------------

struct ThroughputReport {
    std::size_t runs = 0;
    std::vector<double> seconds_per_run;
    double mean_seconds = 0.0;
    double std_seconds = 0.0; // population standard deviation
    double total_seconds = 0.0;
    std::size_t total_words = 0;
    double words_per_sec = 0.0; // total_words / mean_seconds
};

using DeidFn = std::function<void(const std::vector<AnnotatedNote>&)>;

/// Wall-clock time for full passes over `notes`, repeated `repeats` times
/// after one unmeasured warm-up pass. total_words is counted once with
/// count_words. Failures inside the de-identifier abort measurement.
ThroughputReport measure_throughput(const DeidFn& deid,
                                    const std::vector<AnnotatedNote>& notes,
                                    std::size_t repeats);

} // namespace deidbench
