#include "deidbench/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "deidbench/parallel.hpp"
#include "deidbench/pool.hpp"

namespace deidbench {

using nlohmann::json;
namespace fs = std::filesystem;

const ReferenceRow kPublishedReferenceRows[3] = {
    {"pyDeid (published)", 0.67, 0.68, 0.99, 31.0, 0.2, 4490.0},
    {"obi-deid-bert (published)", 0.91, 0.94, 0.99, 41.0, 1.4, 3333.0},
    {"Presidio (published)", 0.61, 0.91, 0.89, 28.0, 0.1, 4931.0},
};

// ---------------------------------------------------------------------------
// SystemConfig / ExperimentConfig
// ---------------------------------------------------------------------------

AdapterConfig SystemConfig::adapter_config() const {
    AdapterConfig ac;
    switch (kind) {
    case Kind::Subprocess:
        ac.kind = AdapterConfig::Kind::Subprocess;
        ac.command = command;
        break;
    case Kind::Http:
        ac.kind = AdapterConfig::Kind::Http;
        ac.endpoint = endpoint;
        break;
    default:
        throw ConfigError("system '" + name + "' is not an external adapter");
    }
    ac.timeout_ms = timeout_ms;
    ac.batch_size = batch_size;
    return ac;
}

ExperimentConfig::Kind ExperimentConfig::kind_from_string(std::string_view s) {
    if (s == "efficiency") return Kind::Efficiency;
    if (s == "multicultural") return Kind::Multicultural;
    if (s == "gender") return Kind::Gender;
    if (s == "generalization_gap") return Kind::GeneralizationGap;
    if (s == "export_training") return Kind::ExportTraining;
    throw ConfigError("unknown experiment kind '" + std::string(s) + "'");
}

std::string ExperimentConfig::kind_to_string(Kind k) {
    switch (k) {
    case Kind::Efficiency: return "efficiency";
    case Kind::Multicultural: return "multicultural";
    case Kind::Gender: return "gender";
    case Kind::GeneralizationGap: return "generalization_gap";
    case Kind::ExportTraining: return "export_training";
    }
    return "efficiency";
}

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed,
                    const char* what) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* a : allowed)
            if (it.key() == a) { known = true; break; }
        if (!known)
            throw ConfigError(std::string(what) + " has unknown field '" +
                              it.key() + "'");
    }
}

SystemConfig system_from_json(const json& j) {
    reject_unknown(j, {"name", "kind", "command", "endpoint", "timeout_ms",
                       "batch_size"},
                   "system");
    SystemConfig sc;
    sc.name = j.at("name").get<std::string>();
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "builtin") sc.kind = SystemConfig::Kind::BuiltinRules;
    else if (kind == "subprocess") sc.kind = SystemConfig::Kind::Subprocess;
    else if (kind == "http") sc.kind = SystemConfig::Kind::Http;
    else throw ConfigError("system '" + sc.name + "': unknown kind '" + kind + "'");
    if (j.contains("command")) sc.command = j.at("command").get<std::string>();
    if (j.contains("endpoint")) sc.endpoint = j.at("endpoint").get<std::string>();
    if (j.contains("timeout_ms")) sc.timeout_ms = j.at("timeout_ms").get<int>();
    if (j.contains("batch_size"))
        sc.batch_size = j.at("batch_size").get<std::size_t>();
    return sc;
}

json system_to_json(const SystemConfig& sc) {
    json j = {{"name", sc.name}};
    switch (sc.kind) {
    case SystemConfig::Kind::BuiltinRules: j["kind"] = "builtin"; break;
    case SystemConfig::Kind::Subprocess:
        j["kind"] = "subprocess";
        j["command"] = sc.command;
        break;
    case SystemConfig::Kind::Http:
        j["kind"] = "http";
        j["endpoint"] = sc.endpoint;
        break;
    case SystemConfig::Kind::Custom: j["kind"] = "custom"; break;
    }
    j["timeout_ms"] = sc.timeout_ms;
    j["batch_size"] = sc.batch_size;
    return j;
}

} // namespace

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown(j,
                   {"experiment", "templates", "locales", "seed", "train_sizes",
                    "test_size", "per_locale_test", "timing_notes", "repeats",
                    "gender_gap_threshold", "minimal_gap_threshold", "mode",
                    "jobs", "pool_dir", "out_dir", "systems", "cire",
                    "gap_predictions"},
                   "config");
    ExperimentConfig c;
    try {
        c.kind = kind_from_string(j.at("experiment").get<std::string>());
        for (const json& t : j.at("templates"))
            c.template_paths.push_back(t.get<std::string>());
        if (j.contains("locales"))
            for (const json& l : j.at("locales"))
                c.locales.push_back(locale_from_string(l.get<std::string>()));
        c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("train_sizes")) {
            c.train_sizes.clear();
            for (const json& s : j.at("train_sizes"))
                c.train_sizes.push_back(s.get<std::size_t>());
        }
        if (j.contains("test_size")) c.test_size = j.at("test_size").get<std::size_t>();
        if (j.contains("per_locale_test"))
            c.per_locale_test = j.at("per_locale_test").get<std::size_t>();
        if (j.contains("timing_notes"))
            c.timing_notes = j.at("timing_notes").get<std::size_t>();
        if (j.contains("repeats")) c.repeats = j.at("repeats").get<std::size_t>();
        if (j.contains("gender_gap_threshold"))
            c.gender_gap_threshold = j.at("gender_gap_threshold").get<double>();
        if (j.contains("minimal_gap_threshold"))
            c.minimal_gap_threshold = j.at("minimal_gap_threshold").get<double>();
        if (j.contains("mode")) {
            const std::string m = j.at("mode").get<std::string>();
            if (m == "binary") c.mode = ScoreMode::Binary;
            else if (m == "multiclass") c.mode = ScoreMode::Multiclass;
            else throw ConfigError("unknown mode '" + m + "'");
        }
        if (j.contains("jobs")) c.jobs = j.at("jobs").get<std::size_t>();
        if (j.contains("pool_dir")) c.pool_dir = j.at("pool_dir").get<std::string>();
        if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
        if (j.contains("systems"))
            for (const json& s : j.at("systems"))
                c.systems.push_back(system_from_json(s));
        if (j.contains("cire")) {
            const json& cj = j.at("cire");
            reject_unknown(cj,
                           {"enabled", "endpoint", "model", "auth_env",
                            "temperature", "timeout_ms", "prompt_file"},
                           "cire");
            c.run_cire = cj.value("enabled", true);
            if (cj.contains("endpoint"))
                c.judge.endpoint = cj.at("endpoint").get<std::string>();
            if (cj.contains("model")) c.judge.model = cj.at("model").get<std::string>();
            if (cj.contains("auth_env"))
                c.judge.auth_env = cj.at("auth_env").get<std::string>();
            if (cj.contains("temperature"))
                c.judge.temperature = cj.at("temperature").get<double>();
            if (cj.contains("timeout_ms"))
                c.judge.timeout_ms = cj.at("timeout_ms").get<int>();
            if (cj.contains("prompt_file"))
                c.cire_prompt_path = cj.at("prompt_file").get<std::string>();
        }
        if (j.contains("gap_predictions")) {
            const json& gj = j.at("gap_predictions");
            reject_unknown(gj, {"all", "all_minus"}, "gap_predictions");
            if (gj.contains("all"))
                c.gap_all_predictions = gj.at("all").get<std::string>();
            if (gj.contains("all_minus"))
                for (auto it = gj.at("all_minus").begin();
                     it != gj.at("all_minus").end(); ++it)
                    c.gap_all_minus_predictions[it.key()] =
                        it.value().get<std::string>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config: ") + e.what());
    }
    return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["experiment"] = kind_to_string(kind);
    j["templates"] = template_paths;
    json locs = json::array();
    for (Locale l : locales) locs.push_back(to_string(l));
    j["locales"] = std::move(locs);
    j["seed"] = seed;
    j["train_sizes"] = train_sizes;
    j["test_size"] = test_size;
    j["per_locale_test"] = per_locale_test;
    j["timing_notes"] = timing_notes;
    j["repeats"] = repeats;
    j["gender_gap_threshold"] = gender_gap_threshold;
    j["minimal_gap_threshold"] = minimal_gap_threshold;
    j["mode"] = mode == ScoreMode::Binary ? "binary" : "multiclass";
    j["jobs"] = jobs;
    j["pool_dir"] = pool_dir;
    j["out_dir"] = out_dir;
    json systems_json = json::array();
    for (const SystemConfig& s : systems) systems_json.push_back(system_to_json(s));
    j["systems"] = std::move(systems_json);
    if (run_cire) {
        j["cire"] = {{"enabled", true},
                     {"endpoint", judge.endpoint},
                     {"model", judge.model},
                     {"auth_env", judge.auth_env},
                     {"temperature", judge.temperature},
                     {"timeout_ms", judge.timeout_ms},
                     {"prompt_file", cire_prompt_path}};
    }
    if (!gap_all_predictions.empty() || !gap_all_minus_predictions.empty()) {
        json gj;
        gj["all"] = gap_all_predictions;
        gj["all_minus"] = gap_all_minus_predictions;
        j["gap_predictions"] = std::move(gj);
    }
    return j.dump(2);
}

void ExperimentConfig::validate() const {
    if (template_paths.empty())
        throw ConfigError("config needs at least one template set");
    const bool needs_systems = kind == Kind::Efficiency ||
                               kind == Kind::Multicultural ||
                               kind == Kind::Gender;
    if (needs_systems && systems.empty())
        throw ConfigError("config needs at least one system");
    if (kind == Kind::ExportTraining) {
        if (locales.empty())
            throw ConfigError("export_training needs explicit locales");
        if (train_sizes.empty())
            throw ConfigError("export_training needs train_sizes");
        for (std::size_t s : train_sizes)
            if (s < 1) throw ConfigError("train sizes must be >= 1");
    }
    if ((kind == Kind::Multicultural || kind == Kind::Gender ||
         kind == Kind::GeneralizationGap) &&
        locales.empty())
        throw ConfigError(kind_to_string(kind) + " needs explicit locales");
    if (test_size < 1 || per_locale_test < 1 || timing_notes < 1 || repeats < 1)
        throw ConfigError("note counts and repeats must be >= 1");
    if (run_cire && judge.endpoint.empty())
        throw ConfigError("cire is enabled but no judge endpoint is configured");
    for (const SystemConfig& s : systems) {
        if (s.name.empty()) throw ConfigError("system name must be non-empty");
        if (s.kind == SystemConfig::Kind::Subprocess && s.command.empty())
            throw ConfigError("system '" + s.name + "' needs a command");
        if (s.kind == SystemConfig::Kind::Http && s.endpoint.empty())
            throw ConfigError("system '" + s.name + "' needs an endpoint");
        if (s.kind == SystemConfig::Kind::Custom && !s.custom)
            throw ConfigError("system '" + s.name + "' has no predictor");
    }
}

// ---------------------------------------------------------------------------
// Manifest helpers
// ---------------------------------------------------------------------------

namespace {

std::string now_iso8601() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

RunManifest make_manifest(const ExperimentConfig& config) {
    RunManifest m;
    m.experiment = ExperimentConfig::kind_to_string(config.kind);
    m.config_snapshot = config.to_json();
    m.run_id = fnv1a64_hex(m.experiment + "\n" + m.config_snapshot);
    m.started_at = now_iso8601();
    try {
        PoolManifest pm = load_manifest(config.pool_dir);
        for (const auto& [code, entry] : pm.pools)
            m.pool_checksums[code] = entry.checksum;
    } catch (const Error&) {
        // Pool data may be absent for purely file-based experiments.
    }
    return m;
}

void write_manifest(RunManifest& manifest, const std::string& out_dir) {
    manifest.finished_at = now_iso8601();
    json j = {{"run_id", manifest.run_id},
              {"tool_version", manifest.tool_version},
              {"experiment", manifest.experiment},
              {"config", json::parse(manifest.config_snapshot)},
              {"pool_checksums", manifest.pool_checksums},
              {"started_at", manifest.started_at},
              {"finished_at", manifest.finished_at},
              {"result_files", manifest.result_files}};
    const std::string path = out_dir + "/run_manifest.json";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest '" + path + "'");
    out << j.dump(2) << '\n';
}

std::string full_precision(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    return out;
}

// ---------------------------------------------------------------------------
// Corpus construction
// ---------------------------------------------------------------------------

/// Builds `size` notes, cycling template-first so truncation stays balanced
/// across templates.
std::vector<AnnotatedNote> build_sized_corpus(
    const std::vector<NoteTemplate>& templates, const IdentifierPool& pool,
    std::uint64_t seed, std::size_t size, std::size_t jobs,
    std::vector<FallbackWarning>* warnings = nullptr) {
    if (templates.empty()) throw ValidationError("no templates to build from");
    const std::size_t t_count = templates.size();
    const std::size_t per_template = (size + t_count - 1) / t_count;
    BuildOptions opts;
    opts.jobs = jobs;
    std::vector<AnnotatedNote> grouped =
        build_corpus(templates, pool, seed, per_template, opts, warnings);
    std::vector<AnnotatedNote> out;
    out.reserve(size);
    for (std::size_t i = 0; i < per_template && out.size() < size; ++i)
        for (std::size_t t = 0; t < t_count && out.size() < size; ++t)
            out.push_back(std::move(grouped[t * per_template + i]));
    return out;
}

/// Round-robin interleave across per-locale corpora; locale counts in any
/// prefix differ by at most one.
std::vector<AnnotatedNote> interleave_locales(
    std::vector<std::vector<AnnotatedNote>>& per_locale, std::size_t size) {
    std::vector<AnnotatedNote> out;
    out.reserve(size);
    for (std::size_t i = 0; out.size() < size; ++i) {
        bool any = false;
        for (std::vector<AnnotatedNote>& stream : per_locale) {
            if (i < stream.size()) {
                any = true;
                out.push_back(stream[i]);
                if (out.size() == size) break;
            }
        }
        if (!any) break;
    }
    return out;
}

std::vector<NoteTemplate> load_templates(const ExperimentConfig& config) {
    return parse_templates_file(config.template_paths.at(0));
}

// ---------------------------------------------------------------------------
// System sessions
// ---------------------------------------------------------------------------

class SystemSession {
public:
    SystemSession(const SystemConfig& config, const std::string& pool_dir)
        : config_(config) {
        switch (config.kind) {
        case SystemConfig::Kind::BuiltinRules:
            rules_ = RuleSet::defaults(pool_dir);
            break;
        case SystemConfig::Kind::Custom:
            if (!config.custom)
                throw ConfigError("system '" + config.name +
                                  "' has no predictor");
            break;
        default:
            adapter_ = std::make_unique<AdapterSession>(config.adapter_config());
            break;
        }
    }

    std::vector<Prediction> predict(const std::vector<AnnotatedNote>& notes,
                                    std::size_t jobs) {
        if (adapter_) return adapter_->predict(notes);
        if (config_.kind == SystemConfig::Kind::Custom)
            return config_.custom(notes);
        std::vector<Prediction> preds(notes.size());
        parallel_for(notes.size(), jobs, [&](std::size_t i) {
            preds[i] = predict_rules(notes[i], rules_);
        });
        return preds;
    }

    void close() {
        if (adapter_) {
            adapter_->close();
            adapter_.reset();
        }
    }

    double startup_seconds() const {
        return adapter_ ? adapter_->info().startup_seconds : 0.0;
    }

private:
    SystemConfig config_;
    RuleSet rules_;
    std::unique_ptr<AdapterSession> adapter_;
};

std::string load_prompt(const ExperimentConfig& config) {
    if (config.cire_prompt_path.empty()) return {};
    std::ifstream in(config.cire_prompt_path, std::ios::binary);
    if (!in)
        throw IoError("cannot open prompt file '" + config.cire_prompt_path +
                      "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

} // namespace

// ---------------------------------------------------------------------------
// Prediction files
// ---------------------------------------------------------------------------

PredictionFile read_prediction_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open prediction file '" + path + "'");
    PredictionFile file;
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid prediction record: ") +
                                 e.what(),
                             line_no);
        }
        try {
            if (!have_header) {
                if (!j.is_object() || !j.contains("system"))
                    throw ParseError(
                        "prediction file must start with a header line "
                        "{\"system\": ...}",
                        line_no);
                file.system = j.at("system").get<std::string>();
                have_header = true;
                continue;
            }
            Prediction p;
            p.note_id = j.at("id").get<std::string>();
            for (const json& js : j.at("spans")) {
                Span s;
                s.start = js.at("start").get<std::uint64_t>();
                s.end = js.at("end").get<std::uint64_t>();
                s.category =
                    js.contains("category")
                        ? category_from_string(
                              js.at("category").get<std::string>())
                        : PiiCategory::Other;
                p.spans.push_back(s);
            }
            file.predictions.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid prediction record: ") +
                                 e.what(),
                             line_no);
        }
    }
    if (!have_header)
        throw ParseError("prediction file has no header line", 0);
    return file;
}

void write_prediction_file(const PredictionFile& file, const std::string& path) {
    std::ofstream out = open_out(path);
    out << json{{"system", file.system}}.dump() << '\n';
    for (const Prediction& p : file.predictions) {
        json spans = json::array();
        for (const Span& s : p.spans)
            spans.push_back({{"start", s.start},
                             {"end", s.end},
                             {"category", to_string(s.category)}});
        out << json{{"id", p.note_id}, {"spans", std::move(spans)}}.dump()
            << '\n';
    }
}

// ---------------------------------------------------------------------------
// export_training_corpora
// ---------------------------------------------------------------------------

std::vector<std::string> export_training_corpora(const ExperimentConfig& config) {
    config.validate();
    const std::vector<NoteTemplate> templates = load_templates(config);
    fs::create_directories(config.out_dir);

    std::vector<std::string> written;
    auto emit = [&](const std::vector<AnnotatedNote>& notes,
                    const std::string& stem) {
        const std::string path = config.out_dir + "/" + stem + ".jsonl";
        write_corpus_file(notes, path);
        written.push_back(path);
    };

    for (std::size_t size : config.train_sizes) {
        std::vector<std::vector<AnnotatedNote>> per_locale;
        for (Locale locale : config.locales) {
            IdentifierPool pool = load_pool(locale, config.pool_dir);
            per_locale.push_back(build_sized_corpus(templates, pool, config.seed,
                                                    size, config.jobs));
            emit(per_locale.back(),
                 "train_" + to_string(locale) + "_" + std::to_string(size));
        }
        emit(interleave_locales(per_locale, size),
             "train_all_" + std::to_string(size));
        for (std::size_t skip = 0; skip < config.locales.size(); ++skip) {
            std::vector<std::vector<AnnotatedNote>> rest;
            for (std::size_t i = 0; i < per_locale.size(); ++i)
                if (i != skip) rest.push_back(per_locale[i]);
            emit(interleave_locales(rest, size),
                 "train_all_minus_" + to_string(config.locales[skip]) + "_" +
                     std::to_string(size));
        }
    }
    return written;
}

// ---------------------------------------------------------------------------
// run_efficiency
// ---------------------------------------------------------------------------

EfficiencyResult run_efficiency(const ExperimentConfig& config) {
    config.validate();
    EfficiencyResult result;
    result.manifest = make_manifest(config);

    const Locale locale =
        config.locales.empty() ? Locale::en_US : config.locales.front();
    IdentifierPool pool = load_pool(locale, config.pool_dir);

    struct TestSet {
        std::string label;
        std::vector<AnnotatedNote> notes;
    };
    std::vector<TestSet> test_sets;
    for (const std::string& path : config.template_paths) {
        TestSet ts;
        ts.label = fs::path(path).stem().string();
        ts.notes = build_sized_corpus(parse_templates_file(path), pool,
                                      config.seed, config.test_size,
                                      config.jobs);
        test_sets.push_back(std::move(ts));
    }
    const std::string prompt = load_prompt(config);

    for (const SystemConfig& system : config.systems) {
        std::unique_ptr<SystemSession> session;
        try {
            session = std::make_unique<SystemSession>(system, config.pool_dir);
        } catch (const Error& e) {
            EfficiencyRow row;
            row.system = system.name;
            row.test_set = test_sets.front().label;
            row.failed = true;
            row.error = e.what();
            result.rows.push_back(std::move(row));
            continue;
        }
        bool system_dead = false;
        for (const TestSet& ts : test_sets) {
            EfficiencyRow row;
            row.system = system.name;
            row.test_set = ts.label;
            if (system_dead) {
                row.failed = true;
                row.error = "skipped: system failed on an earlier test set";
                result.rows.push_back(std::move(row));
                continue;
            }
            try {
                std::vector<Prediction> preds =
                    session->predict(ts.notes, config.jobs);
                row.eval = score(ts.notes, preds, config.mode, config.jobs);
                row.adapter_startup_seconds = session->startup_seconds();

                std::vector<AnnotatedNote> timing(
                    ts.notes.begin(),
                    ts.notes.begin() +
                        std::min(config.timing_notes, ts.notes.size()));
                // Throughput passes run the system serially (concurrency 1).
                row.throughput = measure_throughput(
                    [&](const std::vector<AnnotatedNote>& batch) {
                        session->predict(batch, 1);
                    },
                    timing, config.repeats);

                if (config.run_cire) {
                    std::vector<std::string> masked;
                    masked.reserve(ts.notes.size());
                    for (std::size_t i = 0; i < ts.notes.size(); ++i)
                        masked.push_back(mask(ts.notes[i].text, preds[i].spans,
                                              MaskPolicy::category_tag()));
                    HttpJudge judge(config.judge);
                    CireOptions copts;
                    copts.prompt_template = prompt;
                    copts.jobs = config.jobs;
                    row.cire_report = cire(ts.notes, masked, judge, copts);
                    row.has_cire = true;
                }
            } catch (const Error& e) {
                row.failed = true;
                row.error = e.what();
                system_dead = true;
            }
            result.rows.push_back(std::move(row));
        }
        try {
            session->close();
        } catch (const Error& e) {
            if (!result.rows.empty() && !system_dead) {
                result.rows.back().failed = true;
                result.rows.back().error = e.what();
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// run_multicultural
// ---------------------------------------------------------------------------

MulticulturalResult run_multicultural(const ExperimentConfig& config) {
    config.validate();
    MulticulturalResult result;
    result.manifest = make_manifest(config);

    std::vector<Locale> locales = config.locales;
    if (std::find(locales.begin(), locales.end(), Locale::en_US) ==
        locales.end())
        locales.insert(locales.begin(), Locale::en_US);

    const std::vector<NoteTemplate> templates = load_templates(config);
    std::map<Locale, std::vector<AnnotatedNote>> corpora;
    for (Locale locale : locales) {
        IdentifierPool pool = load_pool(locale, config.pool_dir);
        corpora[locale] = build_sized_corpus(
            templates, pool, config.seed, config.per_locale_test, config.jobs);
    }

    for (const SystemConfig& system : config.systems) {
        std::vector<MulticulturalCell> cells;
        std::unique_ptr<SystemSession> session;
        bool system_dead = false;
        std::string death_note;
        try {
            session = std::make_unique<SystemSession>(system, config.pool_dir);
        } catch (const Error& e) {
            system_dead = true;
            death_note = e.what();
        }
        double base_recall = -1.0;
        for (Locale locale : locales) {
            MulticulturalCell cell;
            cell.system = system.name;
            cell.locale = locale;
            if (system_dead) {
                cell.failed = true;
                cell.error = death_note;
                cells.push_back(std::move(cell));
                continue;
            }
            try {
                std::vector<Prediction> preds =
                    session->predict(corpora.at(locale), config.jobs);
                cell.eval =
                    score(corpora.at(locale), preds, config.mode, config.jobs);
                cell.recall = cell.eval.recall();
                if (locale == Locale::en_US) base_recall = cell.recall;
            } catch (const Error& e) {
                cell.failed = true;
                cell.error = e.what();
                system_dead = true;
                death_note = "skipped: system failed on an earlier locale";
            }
            cells.push_back(std::move(cell));
        }
        for (MulticulturalCell& cell : cells) {
            if (cell.failed) continue;
            if (base_recall <= 0.0) {
                cell.failed = true;
                cell.error = base_recall < 0.0
                                 ? "no en_US baseline recall available"
                                 : "degenerate en_US baseline (recall 0)";
                continue;
            }
            cell.drop = relative_recall_drop(base_recall, cell.recall);
        }
        if (session) {
            try {
                session->close();
            } catch (const Error& e) {
                for (MulticulturalCell& cell : cells)
                    if (!cell.failed) {
                        cell.failed = true;
                        cell.error = e.what();
                    }
            }
        }
        for (MulticulturalCell& cell : cells)
            result.cells.push_back(std::move(cell));
    }
    return result;
}

// ---------------------------------------------------------------------------
// run_gender
// ---------------------------------------------------------------------------

GenderResult run_gender(const ExperimentConfig& config) {
    config.validate();
    GenderResult result;
    result.manifest = make_manifest(config);

    const std::vector<NoteTemplate> templates = load_templates(config);

    for (const SystemConfig& system : config.systems) {
        std::unique_ptr<SystemSession> session;
        bool system_dead = false;
        std::string death_note;
        try {
            session = std::make_unique<SystemSession>(system, config.pool_dir);
        } catch (const Error& e) {
            system_dead = true;
            death_note = e.what();
        }
        for (Locale locale : config.locales) {
            GenderCell cell;
            cell.system = system.name;
            cell.locale = locale;
            if (system_dead) {
                cell.failed = true;
                cell.error = death_note;
                result.cells.push_back(std::move(cell));
                continue;
            }
            try {
                IdentifierPool pool = load_pool(locale, config.pool_dir);
                if (!pool.is_native_name(Gender::Feminine) ||
                    !pool.is_native_name(Gender::Masculine)) {
                    // The locale has no gendered name data of its own, so a
                    // per-gender recall would measure fallback names instead.
                    cell.note = "no native gendered name pool";
                    result.cells.push_back(std::move(cell));
                    continue;
                }
                std::vector<AnnotatedNote> corpus =
                    build_sized_corpus(templates, pool, config.seed,
                                       config.per_locale_test, config.jobs);
                std::vector<Prediction> preds =
                    session->predict(corpus, config.jobs);
                EvalReport eval = score(corpus, preds, config.mode, config.jobs);
                GenderRecall gr = recall_by_gender(eval);
                cell.r_f = gr.r_f;
                cell.r_m = gr.r_m;
                if (gr.r_f && gr.r_m) {
                    cell.gap = std::fabs(*gr.r_f - *gr.r_m);
                    cell.highlight = *cell.gap > config.gender_gap_threshold;
                }
                if (!gr.r_f && !gr.r_m) cell.note = "no gendered gold tokens";
            } catch (const Error& e) {
                cell.failed = true;
                cell.error = e.what();
                system_dead = true;
                death_note = "skipped: system failed on an earlier locale";
            }
            result.cells.push_back(std::move(cell));
        }
        if (session) {
            try {
                session->close();
            } catch (const Error&) {
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// run_generalization_gap
// ---------------------------------------------------------------------------

namespace {

std::vector<Prediction> select_predictions(
    const std::vector<Prediction>& pool,
    const std::vector<AnnotatedNote>& corpus, const std::string& which) {
    std::map<std::string, const Prediction*> by_id;
    for (const Prediction& p : pool) by_id[p.note_id] = &p;
    std::vector<Prediction> out;
    std::vector<std::string> missing;
    out.reserve(corpus.size());
    for (const AnnotatedNote& n : corpus) {
        auto it = by_id.find(n.id);
        if (it == by_id.end()) missing.push_back(n.id);
        else out.push_back(*it->second);
    }
    if (!missing.empty())
        throw IdMismatch("prediction set '" + which + "' is missing " +
                             std::to_string(missing.size()) + " note ids",
                         missing);
    return out;
}

} // namespace

GapSummary run_generalization_gap(
    const ExperimentConfig& config,
    const std::vector<Prediction>& all_predictions,
    const std::map<Locale, std::vector<Prediction>>& all_minus_predictions) {
    config.validate();
    GapSummary summary;
    summary.manifest = make_manifest(config);

    const std::vector<NoteTemplate> templates = load_templates(config);
    for (Locale locale : config.locales) {
        IdentifierPool pool = load_pool(locale, config.pool_dir);
        std::vector<AnnotatedNote> corpus = build_sized_corpus(
            templates, pool, config.seed, config.per_locale_test, config.jobs);

        auto minus_it = all_minus_predictions.find(locale);
        if (minus_it == all_minus_predictions.end())
            throw ConfigError("no all-minus predictions for locale " +
                              to_string(locale));

        EvalReport all_eval =
            score(corpus, select_predictions(all_predictions, corpus, "all"),
                  config.mode, config.jobs);
        EvalReport minus_eval =
            score(corpus,
                  select_predictions(minus_it->second, corpus,
                                     "all_minus_" + to_string(locale)),
                  config.mode, config.jobs);

        GapResult gr;
        gr.locale = locale;
        gr.r_all = all_eval.recall();
        gr.r_all_minus = minus_eval.recall();
        gr.gap = gr.r_all - gr.r_all_minus;
        gr.p_all = all_eval.precision();
        gr.p_all_minus = minus_eval.precision();
        gr.p_gap = gr.p_all - gr.p_all_minus;
        summary.max_abs_gap = std::max(summary.max_abs_gap, std::fabs(gr.gap));
        summary.results.push_back(gr);
    }
    summary.minimal = summary.max_abs_gap < config.minimal_gap_threshold;
    return summary;
}

GapSummary run_generalization_gap(const ExperimentConfig& config) {
    if (config.gap_all_predictions.empty())
        throw ConfigError("generalization_gap needs gap_predictions.all");
    PredictionFile all = read_prediction_file(config.gap_all_predictions);
    std::map<Locale, std::vector<Prediction>> minus;
    for (const auto& [code, path] : config.gap_all_minus_predictions)
        minus[locale_from_string(code)] = read_prediction_file(path).predictions;
    return run_generalization_gap(config, all.predictions, minus);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

struct TableWriter {
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }

    void write(std::ostream& out) const {
        std::vector<std::size_t> widths;
        for (const auto& row : rows) {
            if (widths.size() < row.size()) widths.resize(row.size(), 0);
            for (std::size_t i = 0; i < row.size(); ++i)
                widths[i] = std::max(widths[i], row[i].size());
        }
        for (const auto& row : rows) {
            for (std::size_t i = 0; i < row.size(); ++i) {
                out << row[i];
                if (i + 1 < row.size())
                    out << std::string(widths[i] - row[i].size() + 2, ' ');
            }
            out << '\n';
        }
    }
};

std::string opt2(const std::optional<double>& v) {
    return v ? fixed2(*v) : "n/a";
}

std::string optfull(const std::optional<double>& v) {
    return v ? full_precision(*v) : "";
}

json eval_to_json(const EvalReport& e) {
    json per_cat = json::object();
    for (const auto& [cat, c] : e.per_category)
        per_cat[to_string(cat)] = {{"tp", c.tp},
                                   {"fp", c.fp},
                                   {"fn", c.fn},
                                   {"precision", c.precision()},
                                   {"recall", c.recall()}};
    json per_gender = json::object();
    for (const auto& [g, c] : e.per_gender)
        per_gender[to_string(g)] = {{"tp", c.tp},
                                    {"fn", c.fn},
                                    {"recall", c.recall()}};
    return {{"mode", e.mode == ScoreMode::Binary ? "binary" : "multiclass"},
            {"precision", e.precision()},
            {"recall", e.recall()},
            {"overall",
             {{"tp", e.overall.tp},
              {"fp", e.overall.fp},
              {"fn", e.overall.fn},
              {"tn", e.overall.tn}}},
            {"binary_overall",
             {{"tp", e.binary_overall.tp},
              {"fp", e.binary_overall.fp},
              {"fn", e.binary_overall.fn},
              {"tn", e.binary_overall.tn}}},
            {"per_category", std::move(per_cat)},
            {"per_gender", std::move(per_gender)},
            {"note_count", e.note_count},
            {"token_count", e.token_count}};
}

} // namespace

std::vector<std::string> emit_report(EfficiencyResult& result,
                                     const std::string& out_dir,
                                     ReportFormat format) {
    fs::create_directories(out_dir);
    std::vector<std::string> files;
    const std::string& run_id = result.manifest.run_id;

    if (format == ReportFormat::TableText) {
        const std::string path = out_dir + "/efficiency_table.txt";
        std::ofstream out = open_out(path);
        TableWriter tw;
        tw.add({"system", "test_set", "P", "R", "CIRE", "time_s", "std_s",
                "words_per_sec"});
        for (const EfficiencyRow& row : result.rows) {
            if (row.failed) {
                tw.add({row.system, row.test_set, "FAILED", row.error});
                continue;
            }
            tw.add({row.system, row.test_set, fixed2(row.eval.precision()),
                    fixed2(row.eval.recall()),
                    row.has_cire ? fixed2(row.cire_report.cire) : "-",
                    fixed2(row.throughput.mean_seconds),
                    fixed2(row.throughput.std_seconds),
                    fixed2(row.throughput.words_per_sec)});
        }
        tw.add({"--"});
        for (const ReferenceRow& ref : kPublishedReferenceRows)
            tw.add({ref.system, "-", fixed2(ref.precision), fixed2(ref.recall),
                    fixed2(ref.cire), fixed2(ref.seconds),
                    fixed2(ref.std_seconds), fixed2(ref.words_per_sec)});
        tw.write(out);
        out << "# run_id=" << run_id << '\n';
        files.push_back(path);
    } else if (format == ReportFormat::Csv) {
        const std::string path = out_dir + "/efficiency_results.csv";
        std::ofstream out = open_out(path);
        out << "# run_id=" << run_id << '\n';
        out << "system,test_set,failed,precision,recall,cire,mean_seconds,"
               "std_seconds,total_seconds,words_per_sec,total_words,runs,"
               "startup_seconds,note_count,token_count\n";
        for (const EfficiencyRow& row : result.rows) {
            out << row.system << ',' << row.test_set << ','
                << (row.failed ? "true" : "false") << ',';
            if (row.failed) {
                out << ",,,,,,,,,,\n";
                continue;
            }
            out << full_precision(row.eval.precision()) << ','
                << full_precision(row.eval.recall()) << ','
                << (row.has_cire ? full_precision(row.cire_report.cire) : "")
                << ',' << full_precision(row.throughput.mean_seconds) << ','
                << full_precision(row.throughput.std_seconds) << ','
                << full_precision(row.throughput.total_seconds) << ','
                << full_precision(row.throughput.words_per_sec) << ','
                << row.throughput.total_words << ',' << row.throughput.runs
                << ',' << full_precision(row.adapter_startup_seconds) << ','
                << row.eval.note_count << ',' << row.eval.token_count << '\n';
        }
        files.push_back(path);
    } else {
        const std::string path = out_dir + "/efficiency_results.json";
        std::ofstream out = open_out(path);
        json rows = json::array();
        for (const EfficiencyRow& row : result.rows) {
            json j = {{"system", row.system},
                      {"test_set", row.test_set},
                      {"failed", row.failed}};
            if (row.failed) {
                j["error"] = row.error;
            } else {
                j["eval"] = eval_to_json(row.eval);
                j["throughput"] = {
                    {"runs", row.throughput.runs},
                    {"seconds_per_run", row.throughput.seconds_per_run},
                    {"mean_seconds", row.throughput.mean_seconds},
                    {"std_seconds", row.throughput.std_seconds},
                    {"total_seconds", row.throughput.total_seconds},
                    {"total_words", row.throughput.total_words},
                    {"words_per_sec", row.throughput.words_per_sec},
                    {"concurrency", 1}};
                j["startup_seconds"] = row.adapter_startup_seconds;
                if (row.has_cire)
                    j["cire"] = {{"cire", row.cire_report.cire},
                                 {"sentence_total",
                                  row.cire_report.sentence_total},
                                 {"sentence_changed",
                                  row.cire_report.sentence_changed},
                                 {"judge_calls", row.cire_report.judge_calls}};
            }
            rows.push_back(std::move(j));
        }
        out << json{{"run_id", run_id}, {"rows", std::move(rows)}}.dump(2)
            << '\n';
        files.push_back(path);
    }

    // Plot data: one (recall, words_per_sec) point per successful row.
    const std::string scatter = out_dir + "/recall_vs_words_per_sec.csv";
    {
        std::ofstream out = open_out(scatter);
        out << "# run_id=" << run_id << '\n';
        out << "system,test_set,recall,words_per_sec\n";
        for (const EfficiencyRow& row : result.rows) {
            if (row.failed) continue;
            out << row.system << ',' << row.test_set << ','
                << full_precision(row.eval.recall()) << ','
                << full_precision(row.throughput.words_per_sec) << '\n';
        }
    }
    files.push_back(scatter);

    result.manifest.result_files = files;
    write_manifest(result.manifest, out_dir);
    files.push_back(out_dir + "/run_manifest.json");
    return files;
}

std::vector<std::string> emit_report(MulticulturalResult& result,
                                     const std::string& out_dir,
                                     ReportFormat format) {
    fs::create_directories(out_dir);
    std::vector<std::string> files;
    const std::string& run_id = result.manifest.run_id;

    if (format == ReportFormat::TableText) {
        const std::string path = out_dir + "/multicultural_table.txt";
        std::ofstream out = open_out(path);
        TableWriter tw;
        tw.add({"system", "locale", "P", "R", "drop_vs_en_US"});
        for (const MulticulturalCell& cell : result.cells) {
            if (cell.failed) {
                tw.add({cell.system, to_string(cell.locale), "FAILED",
                        cell.error});
                continue;
            }
            tw.add({cell.system, to_string(cell.locale),
                    fixed2(cell.eval.precision()), fixed2(cell.recall),
                    fixed2(cell.drop)});
        }
        tw.write(out);
        out << "# run_id=" << run_id << '\n';
        files.push_back(path);
    } else if (format == ReportFormat::Csv) {
        const std::string path = out_dir + "/multicultural_results.csv";
        std::ofstream out = open_out(path);
        out << "# run_id=" << run_id << '\n';
        out << "system,locale,failed,precision,recall,drop\n";
        for (const MulticulturalCell& cell : result.cells) {
            out << cell.system << ',' << to_string(cell.locale) << ','
                << (cell.failed ? "true" : "false") << ',';
            if (cell.failed) out << ",,\n";
            else
                out << full_precision(cell.eval.precision()) << ','
                    << full_precision(cell.recall) << ','
                    << full_precision(cell.drop) << '\n';
        }
        files.push_back(path);
    } else {
        const std::string path = out_dir + "/multicultural_results.json";
        std::ofstream out = open_out(path);
        json rows = json::array();
        for (const MulticulturalCell& cell : result.cells) {
            json j = {{"system", cell.system},
                      {"locale", to_string(cell.locale)},
                      {"failed", cell.failed}};
            if (cell.failed) j["error"] = cell.error;
            else {
                j["eval"] = eval_to_json(cell.eval);
                j["recall"] = cell.recall;
                j["drop"] = cell.drop;
            }
            rows.push_back(std::move(j));
        }
        out << json{{"run_id", run_id}, {"rows", std::move(rows)}}.dump(2)
            << '\n';
        files.push_back(path);
    }

    const std::string bars = out_dir + "/locale_drop_bars.csv";
    {
        std::ofstream out = open_out(bars);
        out << "# run_id=" << run_id << '\n';
        out << "system,locale,recall,drop\n";
        for (const MulticulturalCell& cell : result.cells) {
            if (cell.failed) continue;
            out << cell.system << ',' << to_string(cell.locale) << ','
                << full_precision(cell.recall) << ','
                << full_precision(cell.drop) << '\n';
        }
    }
    files.push_back(bars);

    result.manifest.result_files = files;
    write_manifest(result.manifest, out_dir);
    files.push_back(out_dir + "/run_manifest.json");
    return files;
}

std::vector<std::string> emit_report(GenderResult& result,
                                     const std::string& out_dir,
                                     ReportFormat format) {
    fs::create_directories(out_dir);
    std::vector<std::string> files;
    const std::string& run_id = result.manifest.run_id;

    if (format == ReportFormat::TableText) {
        const std::string path = out_dir + "/gender_table.txt";
        std::ofstream out = open_out(path);
        TableWriter tw;
        tw.add({"system", "locale", "R_f", "R_m", "gap", "flag"});
        for (const GenderCell& cell : result.cells) {
            if (cell.failed) {
                tw.add({cell.system, to_string(cell.locale), "FAILED",
                        cell.error});
                continue;
            }
            tw.add({cell.system, to_string(cell.locale), opt2(cell.r_f),
                    opt2(cell.r_m), opt2(cell.gap),
                    cell.highlight ? "*" : ""});
        }
        tw.write(out);
        out << "# run_id=" << run_id << '\n';
        files.push_back(path);
    } else if (format == ReportFormat::Csv) {
        const std::string path = out_dir + "/gender_results.csv";
        std::ofstream out = open_out(path);
        out << "# run_id=" << run_id << '\n';
        out << "system,locale,failed,r_f,r_m,gap,highlight,note\n";
        for (const GenderCell& cell : result.cells) {
            out << cell.system << ',' << to_string(cell.locale) << ','
                << (cell.failed ? "true" : "false") << ',' << optfull(cell.r_f)
                << ',' << optfull(cell.r_m) << ',' << optfull(cell.gap) << ','
                << (cell.highlight ? "true" : "false") << ',' << cell.note
                << '\n';
        }
        files.push_back(path);
    } else {
        const std::string path = out_dir + "/gender_results.json";
        std::ofstream out = open_out(path);
        json rows = json::array();
        for (const GenderCell& cell : result.cells) {
            json j = {{"system", cell.system},
                      {"locale", to_string(cell.locale)},
                      {"failed", cell.failed},
                      {"highlight", cell.highlight}};
            if (cell.failed) j["error"] = cell.error;
            if (cell.r_f) j["r_f"] = *cell.r_f;
            if (cell.r_m) j["r_m"] = *cell.r_m;
            if (cell.gap) j["gap"] = *cell.gap;
            if (!cell.note.empty()) j["note"] = cell.note;
            rows.push_back(std::move(j));
        }
        out << json{{"run_id", run_id}, {"rows", std::move(rows)}}.dump(2)
            << '\n';
        files.push_back(path);
    }

    result.manifest.result_files = files;
    write_manifest(result.manifest, out_dir);
    files.push_back(out_dir + "/run_manifest.json");
    return files;
}

std::vector<std::string> emit_report(GapSummary& result,
                                     const std::string& out_dir,
                                     ReportFormat format) {
    fs::create_directories(out_dir);
    std::vector<std::string> files;
    const std::string& run_id = result.manifest.run_id;

    if (format == ReportFormat::TableText) {
        const std::string path = out_dir + "/generalization_gap_table.txt";
        std::ofstream out = open_out(path);
        TableWriter tw;
        tw.add({"locale", "P_all", "R_all", "P_all_minus", "R_all_minus",
                "gap_R", "gap_P"});
        for (const GapResult& g : result.results)
            tw.add({to_string(g.locale), fixed2(g.p_all), fixed2(g.r_all),
                    fixed2(g.p_all_minus), fixed2(g.r_all_minus),
                    fixed2(g.gap), fixed2(g.p_gap)});
        tw.write(out);
        out << "max_abs_gap=" << fixed2(result.max_abs_gap)
            << " minimal=" << (result.minimal ? "true" : "false") << '\n';
        out << "# run_id=" << run_id << '\n';
        files.push_back(path);
    } else if (format == ReportFormat::Csv) {
        const std::string path = out_dir + "/generalization_gap_results.csv";
        std::ofstream out = open_out(path);
        out << "# run_id=" << run_id << '\n';
        out << "locale,p_all,r_all,p_all_minus,r_all_minus,gap_r,gap_p\n";
        for (const GapResult& g : result.results)
            out << to_string(g.locale) << ',' << full_precision(g.p_all) << ','
                << full_precision(g.r_all) << ','
                << full_precision(g.p_all_minus) << ','
                << full_precision(g.r_all_minus) << ','
                << full_precision(g.gap) << ',' << full_precision(g.p_gap)
                << '\n';
        files.push_back(path);
    } else {
        const std::string path = out_dir + "/generalization_gap_results.json";
        std::ofstream out = open_out(path);
        json rows = json::array();
        for (const GapResult& g : result.results)
            rows.push_back({{"locale", to_string(g.locale)},
                            {"p_all", g.p_all},
                            {"r_all", g.r_all},
                            {"p_all_minus", g.p_all_minus},
                            {"r_all_minus", g.r_all_minus},
                            {"gap_r", g.gap},
                            {"gap_p", g.p_gap}});
        out << json{{"run_id", run_id},
                    {"max_abs_gap", result.max_abs_gap},
                    {"minimal", result.minimal},
                    {"rows", std::move(rows)}}
                   .dump(2)
            << '\n';
        files.push_back(path);
    }

    result.manifest.result_files = files;
    write_manifest(result.manifest, out_dir);
    files.push_back(out_dir + "/run_manifest.json");
    return files;
}

} // namespace deidbench
