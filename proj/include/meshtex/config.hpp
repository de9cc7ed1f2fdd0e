#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meshtex/common.hpp"

namespace meshtex::cfg {

// Flat key-value configuration in a TOML-style text format: [section] headers,
// key = value lines, '#' comments. Keys flatten to "section.key". Any key can
// be overridden from the environment as MESHTEX_<SECTION>_<KEY> (uppercased;
// the first underscore after the prefix separates the section).
class Config {
  public:
    static Config parse(const std::string& text);
    static Config load(const std::string& path);

    void apply_env_overrides(const char* prefix = "MESHTEX_");

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::string require_string(const std::string& key) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<std::int64_t> get_int_list(const std::string& key,
                                           std::vector<std::int64_t> fallback) const;

    std::string dump() const;
    void save(const std::string& path) const;

    const std::map<std::string, std::string>& values() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace meshtex::cfg
