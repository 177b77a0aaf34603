#include "gci/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gci/errors.hpp"

namespace gci {

namespace {

std::string trim(const std::string& s) {
    std::size_t lo = 0;
    std::size_t hi = s.size();
    while (lo < hi && std::isspace(static_cast<unsigned char>(s[lo]))) ++lo;
    while (hi > lo && std::isspace(static_cast<unsigned char>(s[hi - 1]))) --hi;
    return s.substr(lo, hi - lo);
}

const std::string& require_value(const ConfigFile& cfg, const std::string& key) {
    auto it = cfg.values.find(key);
    if (it == cfg.values.end()) {
        throw ConfigError("config: missing key '" + key + "'");
    }
    return it->second;
}

}  // namespace

ConfigFile parse_config_text(const std::string& text) {
    ConfigFile cfg;
    cfg.raw_text = text;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " is not of the form key=value: '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || key.find('.') == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " needs a dotted section.key name, got '" + key + "'");
        }
        if (value.empty()) {
            throw ConfigError("config: line " + std::to_string(line_no) + " has no value for '" +
                              key + "'");
        }
        if (!cfg.values.emplace(key, value).second) {
            throw ConfigError("config: duplicate key '" + key + "' at line " +
                              std::to_string(line_no));
        }
    }
    return cfg;
}

ConfigFile load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("config: cannot open '" + path + "' for reading");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_config_text(buf.str());
    } catch (const ConfigError& err) {
        throw ConfigError(std::string(err.what()) + " (in '" + path + "')");
    }
}

void require_known_keys(const ConfigFile& cfg, const std::set<std::string>& allowed) {
    for (const auto& [key, value] : cfg.values) {
        (void)value;
        if (allowed.count(key) == 0) {
            throw ConfigError("config: unknown key '" + key + "'");
        }
    }
}

double config_double(const ConfigFile& cfg, const std::string& key, double fallback) {
    if (!cfg.has(key)) return fallback;
    const std::string& raw = require_value(cfg, key);
    char* end = nullptr;
    const double v = std::strtod(raw.c_str(), &end);
    if (end == raw.c_str() || *end != '\0') {
        throw ConfigError("config: key '" + key + "' has non-numeric value '" + raw + "'");
    }
    return v;
}

std::size_t config_size(const ConfigFile& cfg, const std::string& key, std::size_t fallback) {
    return static_cast<std::size_t>(config_u64(cfg, key, fallback));
}

std::uint64_t config_u64(const ConfigFile& cfg, const std::string& key, std::uint64_t fallback) {
    if (!cfg.has(key)) return fallback;
    const std::string& raw = require_value(cfg, key);
    char* end = nullptr;
    const unsigned long long v = std::strtoull(raw.c_str(), &end, 10);
    if (end == raw.c_str() || *end != '\0' || raw[0] == '-') {
        throw ConfigError("config: key '" + key + "' has non-integer value '" + raw + "'");
    }
    return static_cast<std::uint64_t>(v);
}

bool config_bool(const ConfigFile& cfg, const std::string& key, bool fallback) {
    if (!cfg.has(key)) return fallback;
    const std::string& raw = require_value(cfg, key);
    if (raw == "true" || raw == "on" || raw == "1") return true;
    if (raw == "false" || raw == "off" || raw == "0") return false;
    throw ConfigError("config: key '" + key + "' has non-boolean value '" + raw + "'");
}

std::string config_string(const ConfigFile& cfg, const std::string& key,
                          const std::string& fallback) {
    if (!cfg.has(key)) return fallback;
    return require_value(cfg, key);
}

}  // namespace gci
