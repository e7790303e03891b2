#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deidbench/adapter.hpp"
#include "deidbench/cire.hpp"
#include "deidbench/corpus.hpp"
#include "deidbench/metrics.hpp"
#include "deidbench/surrogate.hpp"

namespace deidbench {

inline constexpr const char* kToolVersion = "0.1.0";

/// In-process predictor hook, used by tests to script exact behaviours.
using PredictFn =
    std::function<std::vector<Prediction>(const std::vector<AnnotatedNote>&)>;

/// One system under evaluation: the builtin rule engine, an external adapter,
/// or an injected in-process predictor.
struct SystemConfig {
    enum class Kind { BuiltinRules, Subprocess, Http, Custom };

    std::string name;
    Kind kind = Kind::BuiltinRules;
    std::string command;  // Subprocess
    std::string endpoint; // Http
    int timeout_ms = 30000;
    std::size_t batch_size = 32;
    PredictFn custom; // Custom only; not serializable

    AdapterConfig adapter_config() const;
};

struct ExperimentConfig {
    enum class Kind {
        Efficiency,
        Multicultural,
        Gender,
        GeneralizationGap,
        ExportTraining,
    };

    Kind kind = Kind::Efficiency;
    std::vector<std::string> template_paths;
    std::vector<Locale> locales;
    std::uint64_t seed = 0;
    std::vector<std::size_t> train_sizes = {250, 500, 1000, 2000};
    std::size_t test_size = 1000;      // main evaluation corpus
    std::size_t per_locale_test = 500; // multicultural / gender corpora
    std::size_t timing_notes = 100;    // throughput corpus
    std::size_t repeats = 10;          // throughput runs
    double gender_gap_threshold = 0.05;
    double minimal_gap_threshold = 0.01;
    ScoreMode mode = ScoreMode::Binary;
    std::size_t jobs = 1;
    std::string pool_dir;
    std::string out_dir = ".";
    std::vector<SystemConfig> systems;

    bool run_cire = false;
    HttpJudge::Config judge;
    std::string cire_prompt_path;

    // GeneralizationGap inputs: prediction files from the external trainer.
    std::string gap_all_predictions;
    std::map<std::string, std::string> gap_all_minus_predictions; // locale ->

    static ExperimentConfig from_json_file(const std::string& path);
    static ExperimentConfig from_json(const std::string& text);
    std::string to_json() const;
    void validate() const;
    static Kind kind_from_string(std::string_view s);
    static std::string kind_to_string(Kind k);
};

/// Embeds config snapshot, tool version and pool checksums so a run can be
/// reproduced bit for bit; timestamps live only here.
struct RunManifest {
    std::string run_id; // fnv1a64 of (experiment kind + config snapshot)
    std::string tool_version = kToolVersion;
    std::string experiment;
    std::string config_snapshot; // JSON text
    std::map<std::string, std::string> pool_checksums;
    std::string started_at;
    std::string finished_at;
    std::vector<std::string> result_files;
};

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct EfficiencyRow {
    std::string system;
    std::string test_set; // template-set label; several for cross-format runs
    bool failed = false;
    std::string error;
    EvalReport eval;
    ThroughputReport throughput;
    double adapter_startup_seconds = 0.0;
    bool has_cire = false;
    CireReport cire_report;
};

struct EfficiencyResult {
    RunManifest manifest;
    std::vector<EfficiencyRow> rows;
};

struct MulticulturalCell {
    std::string system;
    Locale locale = Locale::en_US;
    bool failed = false;
    std::string error;
    EvalReport eval;
    double recall = 0.0;
    double drop = 0.0; // relative drop vs the system's en_US recall
};

struct MulticulturalResult {
    RunManifest manifest;
    std::vector<MulticulturalCell> cells;
};

struct GenderCell {
    std::string system;
    Locale locale = Locale::en_US;
    bool failed = false;
    std::string error;
    std::optional<double> r_f;
    std::optional<double> r_m;
    std::optional<double> gap; // |r_f - r_m| when both present
    bool highlight = false;    // gap exceeds the configured threshold
    std::string note;          // e.g. "no native gendered name pool"
};

struct GenderResult {
    RunManifest manifest;
    std::vector<GenderCell> cells;
};

struct GapResult {
    Locale locale = Locale::en_US;
    double r_all = 0.0;
    double r_all_minus = 0.0;
    double gap = 0.0; // r_all - r_all_minus
    double p_all = 0.0;
    double p_all_minus = 0.0;
    double p_gap = 0.0;
};

struct GapSummary {
    RunManifest manifest;
    std::vector<GapResult> results;
    double max_abs_gap = 0.0;
    bool minimal = true; // max |recall gap| < minimal_gap_threshold
};

// ---------------------------------------------------------------------------
// Prediction files
// ---------------------------------------------------------------------------

/// Line-delimited prediction file: a header line {"system": name} followed by
/// one adapter-response record per line.
struct PredictionFile {
    std::string system;
    std::vector<Prediction> predictions;
};

PredictionFile read_prediction_file(const std::string& path);
void write_prediction_file(const PredictionFile& file, const std::string& path);

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Emits per-locale, mixed "all" (round-robin interleave) and "all minus L"
/// training corpora at every requested size. Returns the written paths.
std::vector<std::string> export_training_corpora(const ExperimentConfig& config);

EfficiencyResult run_efficiency(const ExperimentConfig& config);

MulticulturalResult run_multicultural(const ExperimentConfig& config);

GenderResult run_gender(const ExperimentConfig& config);

/// Scores "all" vs "all-minus-L" prediction sets on the per-locale test
/// corpora derived from (templates, locale, seed).
GapSummary run_generalization_gap(const ExperimentConfig& config,
                                  const std::vector<Prediction>& all_predictions,
                                  const std::map<Locale, std::vector<Prediction>>&
                                      all_minus_predictions);

/// File-based wrapper reading the configured prediction paths.
GapSummary run_generalization_gap(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class ReportFormat { TableText, Csv, Json };

/// Writes the result in the requested format plus plot-data files and the
/// run manifest; returns all written paths. Field ordering is deterministic
/// and csv/json keep full precision.
std::vector<std::string> emit_report(EfficiencyResult& result,
                                     const std::string& out_dir,
                                     ReportFormat format);
std::vector<std::string> emit_report(MulticulturalResult& result,
                                     const std::string& out_dir,
                                     ReportFormat format);
std::vector<std::string> emit_report(GenderResult& result,
                                     const std::string& out_dir,
                                     ReportFormat format);
std::vector<std::string> emit_report(GapSummary& result,
                                     const std::string& out_dir,
                                     ReportFormat format);

/// Published reference rows for rule-based and off-the-shelf systems,
/// rendered next to measured rows for side-by-side comparison.
struct ReferenceRow {
    const char* system;
    double precision;
    double recall;
    double cire;
    double seconds;
    double std_seconds;
    double words_per_sec;
};
extern const ReferenceRow kPublishedReferenceRows[3];

} // namespace deidbench
