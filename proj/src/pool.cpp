#include "deidbench/pool.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace deidbench {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Checksums
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string fnv1a64_hex(std::string_view bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

// ---------------------------------------------------------------------------
// Directory resolution
// ---------------------------------------------------------------------------

std::string resolve_pool_dir(const std::string& hint) {
    if (!hint.empty()) return hint;
    if (const char* env = std::getenv("DEIDBENCH_POOL_DIR"); env && *env)
        return env;
    if (fs::exists("data/pools/manifest.json")) return "data/pools";
#ifdef DEIDBENCH_DATA_DIR
    return std::string(DEIDBENCH_DATA_DIR) + "/pools";
#else
    return "data/pools";
#endif
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

PoolManifest load_manifest(const std::string& pool_dir) {
    const std::string dir = resolve_pool_dir(pool_dir);
    const std::string path = dir + "/manifest.json";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PoolDataCorrupt("cannot open pool manifest '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw PoolDataCorrupt("pool manifest '" + path + "': " + e.what());
    }
    PoolManifest manifest;
    try {
        for (auto it = j.at("pools").begin(); it != j.at("pools").end(); ++it) {
            PoolManifestEntry e;
            e.file = it.value().at("file").get<std::string>();
            e.checksum = it.value().at("checksum").get<std::string>();
            for (auto c = it.value().at("counts").begin();
                 c != it.value().at("counts").end(); ++c)
                e.counts[c.key()] = c.value().get<std::size_t>();
            if (it.value().contains("fallbacks"))
                for (auto f = it.value().at("fallbacks").begin();
                     f != it.value().at("fallbacks").end(); ++f)
                    e.fallbacks[f.key()] = f.value().get<std::string>();
            manifest.pools[it.key()] = std::move(e);
        }
    } catch (const json::exception& e) {
        throw PoolDataCorrupt("pool manifest '" + path + "': " + e.what());
    }
    return manifest;
}

// ---------------------------------------------------------------------------
// Pool file parsing
// ---------------------------------------------------------------------------

namespace {

const char* kListSections[] = {"name_feminine", "name_masculine", "hospital",
                               "city",          "state",          "address",
                               "country",       "company",        "university"};
const char* kPatternSections[] = {"phone_fax", "date", "email", "other"};
const char* kAuxSections[] = {"email_user", "email_domain", "month_name"};

bool known_section(const std::string& name) {
    for (const char* s : kListSections) if (name == s) return true;
    for (const char* s : kPatternSections) if (name == s) return true;
    for (const char* s : kAuxSections) if (name == s) return true;
    return false;
}

PiiCategory list_section_category(const std::string& name) {
    return category_from_string(name); // hospital..university match 1:1
}

using SectionMap = std::map<std::string, std::vector<std::string>>;

SectionMap parse_pool_sections(const std::string& bytes,
                               const std::string& path) {
    SectionMap sections;
    std::istringstream in(bytes);
    std::string line;
    std::string current;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == ';') continue;
        if (line.front() == '[' && line.back() == ']') {
            current = line.substr(1, line.size() - 2);
            if (!known_section(current))
                throw PoolDataCorrupt(path + ":" + std::to_string(line_no) +
                                      ": unknown section [" + current + "]");
            sections[current]; // materialize even if empty
            continue;
        }
        if (current.empty())
            throw PoolDataCorrupt(path + ":" + std::to_string(line_no) +
                                  ": entry before any section header");
        if (line.find("{{") != std::string::npos ||
            line.find("}}") != std::string::npos)
            throw PoolDataCorrupt(path + ":" + std::to_string(line_no) +
                                  ": entry contains placeholder syntax");
        sections[current].push_back(line);
    }
    return sections;
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PoolDataCorrupt("cannot open pool file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

SectionMap load_verified_sections(const std::string& dir,
                                  const PoolManifestEntry& entry) {
    const std::string path = dir + "/" + entry.file;
    const std::string bytes = read_file_bytes(path);
    if (fnv1a64_hex(bytes) != entry.checksum)
        throw PoolDataCorrupt("checksum mismatch for '" + path +
                              "' (expected " + entry.checksum + ", got " +
                              fnv1a64_hex(bytes) + ")");
    SectionMap sections = parse_pool_sections(bytes, path);
    for (const auto& [name, count] : entry.counts) {
        auto it = sections.find(name);
        std::size_t actual = it == sections.end() ? 0 : it->second.size();
        if (actual != count)
            throw PoolDataCorrupt(path + ": section [" + name + "] has " +
                                  std::to_string(actual) +
                                  " entries, manifest says " +
                                  std::to_string(count));
    }
    for (const auto& [name, entries] : sections) {
        if (!entry.counts.count(name))
            throw PoolDataCorrupt(path + ": section [" + name +
                                  "] missing from manifest counts");
        (void)entries;
    }
    return sections;
}

void validate_pattern(const IdentifierPool& pool, const std::string& pattern,
                      const std::string& context) {
    std::size_t i = 0;
    while (i < pattern.size()) {
        if (pattern[i] != '{') { ++i; continue; }
        std::size_t close = pattern.find('}', i);
        if (close == std::string::npos)
            throw PoolDataCorrupt(context + ": unterminated '{' in pattern '" +
                                  pattern + "'");
        std::string tok = pattern.substr(i + 1, close - i - 1);
        bool needs_list = false;
        const std::vector<std::string>* list = nullptr;
        if (tok == "MONTH") { needs_list = true; list = &pool.month_name; }
        else if (tok == "EUSER") { needs_list = true; list = &pool.email_user; }
        else if (tok == "EDOMAIN") { needs_list = true; list = &pool.email_domain; }
        else if (tok != "MM" && tok != "M" && tok != "DD" && tok != "D" &&
                 tok != "YYYY" && tok != "YY")
            throw PoolDataCorrupt(context + ": unknown token {" + tok +
                                  "} in pattern '" + pattern + "'");
        if (needs_list && list->empty())
            throw PoolDataCorrupt(context + ": pattern '" + pattern +
                                  "' references an empty word list");
        i = close + 1;
    }
}

} // namespace

bool IdentifierPool::pattern_backed(PiiCategory c) {
    return c == PiiCategory::PhoneFax || c == PiiCategory::Date ||
           c == PiiCategory::Email || c == PiiCategory::Other;
}

bool IdentifierPool::is_native(PiiCategory c) const {
    if (c == PiiCategory::Name)
        return name_feminine.native && name_masculine.native;
    if (pattern_backed(c)) {
        auto it = patterns.find(c);
        return it != patterns.end() && it->second.native;
    }
    auto it = lists.find(c);
    return it != lists.end() && it->second.native;
}

bool IdentifierPool::is_native_name(Gender g) const {
    switch (g) {
    case Gender::Feminine: return name_feminine.native;
    case Gender::Masculine: return name_masculine.native;
    case Gender::Unspecified:
        return name_feminine.native && name_masculine.native;
    }
    return false;
}

IdentifierPool load_pool(Locale locale, const std::string& pool_dir) {
    const std::string dir = resolve_pool_dir(pool_dir);
    const PoolManifest manifest = load_manifest(dir);
    const std::string code = to_string(locale);
    auto mit = manifest.pools.find(code);
    if (mit == manifest.pools.end())
        throw PoolDataCorrupt("no manifest entry for locale '" + code + "'");
    const PoolManifestEntry& entry = mit->second;

    SectionMap sections = load_verified_sections(dir, entry);

    // Pull fallback sections from their source locales.
    std::map<std::string, bool> native_flag;
    for (const auto& [section, source_code] : entry.fallbacks) {
        if (!known_section(section))
            throw PoolDataCorrupt(code + ": fallback for unknown section [" +
                                  section + "]");
        if (!sections[section].empty())
            throw PoolDataCorrupt(code + ": section [" + section +
                                  "] declares a fallback but has native entries");
        auto sit = manifest.pools.find(source_code);
        if (sit == manifest.pools.end())
            throw PoolDataCorrupt(code + ": fallback source locale '" +
                                  source_code + "' not in manifest");
        SectionMap source = load_verified_sections(dir, sit->second);
        sections[section] = source[section];
        native_flag[section] = false;
        if (sections[section].empty())
            throw PoolDataCorrupt(code + ": fallback source '" + source_code +
                                  "' has no entries for [" + section + "]");
    }

    IdentifierPool pool;
    pool.locale = locale;
    pool.checksum = entry.checksum;

    auto take = [&](const char* name) -> PoolSection {
        PoolSection s;
        auto it = sections.find(name);
        if (it != sections.end()) s.entries = it->second;
        auto nf = native_flag.find(name);
        s.native = nf == native_flag.end() ? true : nf->second;
        return s;
    };

    pool.name_feminine = take("name_feminine");
    pool.name_masculine = take("name_masculine");
    for (const char* name :
         {"hospital", "city", "state", "address", "country", "company",
          "university"})
        pool.lists[list_section_category(name)] = take(name);
    for (const char* name : {"phone_fax", "date", "email", "other"})
        pool.patterns[category_from_string(name)] = take(name);
    pool.email_user = take("email_user").entries;
    pool.email_domain = take("email_domain").entries;
    pool.month_name = take("month_name").entries;

    // Gendered sub-pools must not share entries.
    std::unordered_set<std::string> fem(pool.name_feminine.entries.begin(),
                                        pool.name_feminine.entries.end());
    for (const std::string& m : pool.name_masculine.entries)
        if (fem.count(m))
            throw PoolDataCorrupt(code + ": name '" + m +
                                  "' appears in both gendered sub-pools");

    for (const auto& [cat, sec] : pool.patterns)
        for (const std::string& p : sec.entries)
            validate_pattern(pool, p, code + "/" + to_string(cat));

    return pool;
}

// ---------------------------------------------------------------------------
// Drawing
// ---------------------------------------------------------------------------

std::string expand_pattern(const IdentifierPool& pool,
                           std::string_view pattern, Rng& rng) {
    std::string out;
    out.reserve(pattern.size() + 8);
    std::size_t i = 0;
    auto pick = [&](const std::vector<std::string>& list,
                    const char* what) -> const std::string& {
        if (list.empty())
            throw EmptyPool(std::string("pattern references empty list ") + what);
        return list[rng.bounded(list.size())];
    };
    auto pad2 = [&](std::size_t v) {
        if (v < 10) out += '0';
        out += std::to_string(v);
    };
    while (i < pattern.size()) {
        char c = pattern[i];
        if (c == '#') {
            out += static_cast<char>('0' + rng.bounded(10));
            ++i;
            continue;
        }
        if (c != '{') {
            out += c;
            ++i;
            continue;
        }
        std::size_t close = pattern.find('}', i);
        std::string tok(pattern.substr(i + 1, close - i - 1));
        if (tok == "MM") pad2(1 + rng.bounded(12));
        else if (tok == "M") out += std::to_string(1 + rng.bounded(12));
        else if (tok == "DD") pad2(1 + rng.bounded(28));
        else if (tok == "D") out += std::to_string(1 + rng.bounded(28));
        else if (tok == "YYYY") out += std::to_string(1950 + rng.bounded(75));
        else if (tok == "YY") pad2(rng.bounded(100));
        else if (tok == "MONTH") out += pick(pool.month_name, "month_name");
        else if (tok == "EUSER") out += pick(pool.email_user, "email_user");
        else if (tok == "EDOMAIN") out += pick(pool.email_domain, "email_domain");
        else throw EmptyPool("unknown pattern token {" + tok + "}");
        i = close + 1;
    }
    return out;
}

std::string draw(const IdentifierPool& pool, PiiCategory category,
                 Gender gender, Rng& rng, DrawLog* log) {
    std::string value;
    if (IdentifierPool::pattern_backed(category)) {
        auto it = pool.patterns.find(category);
        if (it == pool.patterns.end() || it->second.entries.empty())
            throw EmptyPool("no patterns for category " + to_string(category) +
                            " in locale " + to_string(pool.locale));
        const auto& pats = it->second.entries;
        value = expand_pattern(pool, pats[rng.bounded(pats.size())], rng);
    } else if (category == PiiCategory::Name) {
        const std::vector<std::string>& fem = pool.name_feminine.entries;
        const std::vector<std::string>& masc = pool.name_masculine.entries;
        switch (gender) {
        case Gender::Feminine:
            if (fem.empty())
                throw EmptyPool("feminine name pool empty for locale " +
                                to_string(pool.locale));
            value = fem[rng.bounded(fem.size())];
            break;
        case Gender::Masculine:
            if (masc.empty())
                throw EmptyPool("masculine name pool empty for locale " +
                                to_string(pool.locale));
            value = masc[rng.bounded(masc.size())];
            break;
        case Gender::Unspecified: {
            const std::size_t total = fem.size() + masc.size();
            if (total == 0)
                throw EmptyPool("name pool empty for locale " +
                                to_string(pool.locale));
            std::size_t idx = rng.bounded(total);
            value = idx < fem.size() ? fem[idx] : masc[idx - fem.size()];
            break;
        }
        }
    } else {
        auto it = pool.lists.find(category);
        if (it == pool.lists.end() || it->second.entries.empty())
            throw EmptyPool("no entries for category " + to_string(category) +
                            " in locale " + to_string(pool.locale));
        const auto& entries = it->second.entries;
        value = entries[rng.bounded(entries.size())];
    }
    if (log) log->push_back({category, gender, value});
    return value;
}

} // namespace deidbench
