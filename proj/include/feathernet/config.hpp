#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

namespace feathernet {

using ConfigValues = std::map<std::string, std::string>;

// key=value lines; '#' starts a comment; blank lines ignored. A line without
// '=' or with an empty key is rejected, citing its line number.
ConfigValues parse_config_text(std::istream& in, const std::string& source = "config");
ConfigValues read_config_file(const std::filesystem::path& file);

// Fully resolved settings of one CLI run.
struct RunConfig {
    std::string subcommand;
    ConfigValues values;  // every option of the subcommand, including seed and out

    bool has(const std::string& key) const { return values.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    std::uint64_t seed() const { return get_u64("seed"); }
    std::filesystem::path out() const { return get("out"); }

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Precedence: flags over file over defaults. Keys outside defaults are rejected.
RunConfig resolve_config(const std::string& subcommand, const ConfigValues& defaults, const ConfigValues& file,
                         const ConfigValues& flags);

// "subcommand=<name>" followed by sorted key=value lines; parseable again.
std::string serialize(const RunConfig& config);
RunConfig parse_run_config(std::istream& in, const std::string& source = "config");

}  // namespace feathernet
