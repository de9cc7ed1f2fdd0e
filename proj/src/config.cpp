#include "meshtex/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

extern "C" char** environ;

namespace meshtex::cfg {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::string strip_quotes(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

}  // namespace

Config Config::parse(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            MESHTEX_CHECK(line.back() == ']', ConfigError, "line ", lineno,
                          ": malformed section header '", line, "'");
            section = trim(line.substr(1, line.size() - 2));
            MESHTEX_CHECK(!section.empty(), ConfigError, "line ", lineno,
                          ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        MESHTEX_CHECK(eq != std::string::npos, ConfigError, "line ", lineno,
                      ": expected key = value, got '", line, "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = strip_quotes(trim(line.substr(eq + 1)));
        MESHTEX_CHECK(!key.empty(), ConfigError, "line ", lineno, ": empty key");
        cfg.values_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
}

Config Config::load(const std::string& path) {
    std::ifstream in(path);
    MESHTEX_CHECK(in.good(), IoError, "cannot read config ", path);
    std::ostringstream buf;
    buf << in.rdbuf();
    Config cfg = parse(buf.str());
    cfg.apply_env_overrides();
    return cfg;
}

void Config::apply_env_overrides(const char* prefix) {
    const std::string pref(prefix);
    for (char** env = environ; *env != nullptr; ++env) {
        const std::string entry(*env);
        if (entry.rfind(pref, 0) != 0) continue;
        const auto eq = entry.find('=');
        if (eq == std::string::npos) continue;
        std::string name = entry.substr(pref.size(), eq - pref.size());
        std::string value = entry.substr(eq + 1);
        std::string lowered;
        for (char c : name) lowered.push_back(static_cast<char>(std::tolower(c)));
        const auto us = lowered.find('_');
        const std::string key = us == std::string::npos
                                    ? lowered
                                    : lowered.substr(0, us) + "." + lowered.substr(us + 1);
        values_[key] = value;
    }
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::string Config::require_string(const std::string& key) const {
    auto it = values_.find(key);
    MESHTEX_CHECK(it != values_.end(), ConfigError, "missing required config key '", key,
                  "'");
    return it->second;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        std::size_t pos = 0;
        const std::int64_t v = std::stoll(it->second, &pos);
        MESHTEX_CHECK(pos == it->second.size(), ConfigError, "config key '", key,
                      "': '", it->second, "' is not an integer");
        return v;
    } catch (const std::invalid_argument&) {
        throw ConfigError(cat("config key '", key, "': '", it->second,
                              "' is not an integer"));
    }
}

double Config::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        std::size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        MESHTEX_CHECK(pos == it->second.size(), ConfigError, "config key '", key, "': '",
                      it->second, "' is not a number");
        return v;
    } catch (const std::invalid_argument&) {
        throw ConfigError(cat("config key '", key, "': '", it->second,
                              "' is not a number"));
    }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::string v = it->second;
    std::transform(v.begin(), v.end(), v.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(cat("config key '", key, "': '", it->second, "' is not a bool"));
}

std::vector<std::int64_t> Config::get_int_list(const std::string& key,
                                               std::vector<std::int64_t> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::string v = it->second;
    std::erase(v, '[');
    std::erase(v, ']');
    std::vector<std::int64_t> out;
    std::istringstream in(v);
    std::string token;
    while (std::getline(in, token, ',')) {
        token = trim(token);
        if (token.empty()) continue;
        try {
            out.push_back(std::stoll(token));
        } catch (const std::invalid_argument&) {
            throw ConfigError(cat("config key '", key, "': '", token,
                                  "' is not an integer"));
        }
    }
    return out;
}

std::string Config::dump() const {
    // group by section for readability
    std::map<std::string, std::map<std::string, std::string>> grouped;
    for (const auto& [key, value] : values_) {
        const auto dot = key.find('.');
        if (dot == std::string::npos)
            grouped[""][key] = value;
        else
            grouped[key.substr(0, dot)][key.substr(dot + 1)] = value;
    }
    std::ostringstream out;
    for (const auto& [section, kv] : grouped) {
        if (!section.empty()) out << "[" << section << "]\n";
        for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
        out << "\n";
    }
    return out.str();
}

void Config::save(const std::string& path) const {
    namespace fs = std::filesystem;
    const std::string tmp = path + ".tmp";
    std::ofstream out(tmp);
    MESHTEX_CHECK(out.good(), IoError, "cannot write ", path);
    out << dump();
    out.close();
    fs::rename(tmp, path);
}

}  // namespace meshtex::cfg
