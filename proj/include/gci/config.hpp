#ifndef GCI_CONFIG_HPP_
#define GCI_CONFIG_HPP_

#include <cstdint>
#include <map>
#include <set>
#include <string>

namespace gci {

/// Flat key=value run configuration. Keys are dotted `section.key` names
/// (sections: model, dcdc, cil, data, train); `#` starts a comment and blank
/// lines are ignored. Duplicate keys are an error. The raw text is kept so a
/// run directory can receive a verbatim copy of what was parsed.
struct ConfigFile {
    std::map<std::string, std::string> values;
    std::string raw_text;

    bool has(const std::string& key) const { return values.count(key) != 0; }
};

ConfigFile parse_config_text(const std::string& text);
ConfigFile load_config_file(const std::string& path);

/// Rejects any key outside `allowed` with a ConfigError naming the key.
void require_known_keys(const ConfigFile& cfg, const std::set<std::string>& allowed);

double config_double(const ConfigFile& cfg, const std::string& key, double fallback);
std::size_t config_size(const ConfigFile& cfg, const std::string& key, std::size_t fallback);
std::uint64_t config_u64(const ConfigFile& cfg, const std::string& key, std::uint64_t fallback);
bool config_bool(const ConfigFile& cfg, const std::string& key, bool fallback);
std::string config_string(const ConfigFile& cfg, const std::string& key,
                          const std::string& fallback);

}  // namespace gci

#endif  // GCI_CONFIG_HPP_
