#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "deidbench/corpus.hpp"

namespace deidbench {

/// Deterministic generator for surrogate draws. Bounded draws use a
/// multiply-shift reduction so the value sequence depends only on the seed,
/// not on the standard library's distribution implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform index in [0, n). Requires n > 0.
    std::size_t bounded(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

private:
    std::mt19937_64 engine_;
};

/// One category's entries (or patterns) plus whether they are native to the
/// locale or declared as a fallback in the manifest.
struct PoolSection {
    std::vector<std::string> entries;
    bool native = true;
};

/// Per-locale surrogate material. List-backed categories hold literal
/// entries; PhoneFax, Date, Email and Other hold format patterns expanded at
/// draw time (see expand_pattern). Name entries are partitioned by gender.
struct IdentifierPool {
    Locale locale = Locale::en_US;
    PoolSection name_feminine;
    PoolSection name_masculine;
    std::map<PiiCategory, PoolSection> lists;    // hospital .. university
    std::map<PiiCategory, PoolSection> patterns; // phone_fax, date, email, other
    std::vector<std::string> email_user;
    std::vector<std::string> email_domain;
    std::vector<std::string> month_name;
    std::string checksum; // manifest checksum of the backing file

    /// True for PhoneFax, Date, Email, Other.
    static bool pattern_backed(PiiCategory c);

    /// Whether the locale ships its own data for the category (for Name,
    /// both gendered sub-pools must be native).
    bool is_native(PiiCategory c) const;
    bool is_native_name(Gender g) const;
};

struct PoolManifestEntry {
    std::string file;
    std::string checksum;
    std::map<std::string, std::size_t> counts;
    std::map<std::string, std::string> fallbacks; // section -> source locale
};

struct PoolManifest {
    std::map<std::string, PoolManifestEntry> pools; // key: locale code
};

/// FNV-1a 64-bit, the checksum used by the pool manifest and run ids.
std::uint64_t fnv1a64(std::string_view bytes);
std::string fnv1a64_hex(std::string_view bytes);

/// Resolution order for the pool data directory: explicit hint, then the
/// DEIDBENCH_POOL_DIR environment variable, then ./data/pools, then the
/// location the library was built against.
std::string resolve_pool_dir(const std::string& hint = {});

PoolManifest load_manifest(const std::string& pool_dir);

/// Loads and validates one locale's pool. Categories whose sections are
/// declared as fallbacks in the manifest are filled from the source locale
/// (normally en_US) with native = false. Throws PoolDataCorrupt on checksum,
/// count or content violations.
IdentifierPool load_pool(Locale locale, const std::string& pool_dir = {});

struct DrawRecord {
    PiiCategory category;
    Gender gender;
    std::string value;
};
using DrawLog = std::vector<DrawRecord>;

/// Draws one surrogate string. List-backed categories return a uniformly
/// drawn entry; pattern-backed ones expand a uniformly drawn pattern.
/// Throws EmptyPool when no entries exist even after fallback.
std::string draw(const IdentifierPool& pool, PiiCategory category,
                 Gender gender, Rng& rng, DrawLog* log = nullptr);

/// Expands one format pattern: '#' draws a digit, {MM} {M} {DD} {D} {YYYY}
/// {YY} draw calendar fields, {MONTH} {EUSER} {EDOMAIN} draw from the pool's
/// auxiliary word lists. Everything else is copied literally.
std::string expand_pattern(const IdentifierPool& pool,
                           std::string_view pattern, Rng& rng);

} // namespace deidbench
