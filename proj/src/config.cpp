#include "feathernet/config.hpp"

#include <fstream>
#include <sstream>

#include "feathernet/error.hpp"

namespace feathernet {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

ConfigValues parse_config_text(std::istream& in, const std::string& source) {
    ConfigValues values;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = source + ":" + std::to_string(line_no);
        if (eq == std::string::npos) throw Error("config", where + ": expected key=value, got '" + line + "'");
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw Error("config", where + ": empty key");
        values[key] = trim(line.substr(eq + 1));
    }
    return values;
}

ConfigValues read_config_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error("config", "cannot open " + file.string());
    return parse_config_text(in, file.string());
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values.find(key);
    if (it == values.end()) throw Error("config", "missing value for '" + key + "'");
    return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    const auto& text = get(key);
    try {
        std::size_t used = 0;
        const auto v = std::stoll(text, &used);
        if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
    throw Error("config", key + ": not an integer '" + text + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    const auto& text = get(key);
    try {
        std::size_t used = 0;
        if (!text.empty() && text[0] != '-') {
            const auto v = std::stoull(text, &used);
            if (used == text.size()) return v;
        }
    } catch (const std::exception&) {
    }
    throw Error("config", key + ": not a non-negative integer '" + text + "'");
}

double RunConfig::get_double(const std::string& key) const {
    const auto& text = get(key);
    try {
        std::size_t used = 0;
        const auto v = std::stod(text, &used);
        if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
    throw Error("config", key + ": not a number '" + text + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
    const auto& text = get(key);
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw Error("config", key + ": expected true or false, got '" + text + "'");
}

RunConfig resolve_config(const std::string& subcommand, const ConfigValues& defaults, const ConfigValues& file,
                         const ConfigValues& flags) {
    RunConfig config;
    config.subcommand = subcommand;
    config.values = defaults;
    for (const auto* layer : {&file, &flags}) {
        for (const auto& [key, value] : *layer) {
            if (!defaults.count(key)) throw Error("config", "unknown option '" + key + "' for " + subcommand);
            config.values[key] = value;
        }
    }
    return config;
}

std::string serialize(const RunConfig& config) {
    std::ostringstream os;
    os << "subcommand=" << config.subcommand << "\n";
    for (const auto& [key, value] : config.values) os << key << "=" << value << "\n";
    return os.str();
}

RunConfig parse_run_config(std::istream& in, const std::string& source) {
    auto values = parse_config_text(in, source);
    RunConfig config;
    const auto it = values.find("subcommand");
    if (it == values.end()) throw Error("config", source + ": no subcommand line");
    config.subcommand = it->second;
    values.erase(it);
    config.values = std::move(values);
    return config;
}

}  // namespace feathernet
