#include "feathernet/fusion.hpp"

#include <algorithm>
#include <fstream>
#include <set>
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

double parse_number(const std::string& text, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw Error("fusion", where + ": not a number '" + text + "'");
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, sep)) out.push_back(trim(item));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

}  // namespace

void FusionConfig::validate() const {
    if (ensemble.empty()) throw Error("fusion", "ensemble has no members");
    std::set<std::string> names;
    for (const auto& m : ensemble) {
        if (m.name.empty()) throw Error("fusion", "empty member name");
        if (!(m.weight > 0.0)) throw Error("fusion", "member " + m.name + " needs a positive weight");
        if (!names.insert(m.name).second) throw Error("fusion", "duplicate member " + m.name);
    }
    if (!names.count(anchor)) throw Error("fusion", "anchor '" + anchor + "' is not an ensemble member");
    if (ir.empty()) throw Error("fusion", "ir model not set");
    if (names.count(ir)) throw Error("fusion", "ir model '" + ir + "' must not be an ensemble member");
    for (double t : {max_threshold, min_threshold, anchor_threshold, ir_threshold}) {
        if (!(t >= 0.0 && t <= 1.0)) throw Error("fusion", "thresholds must lie in [0, 1]");
    }
    if (!(min_threshold < max_threshold)) throw Error("fusion", "min_threshold must be below max_threshold");
}

std::vector<double> FusionConfig::normalized_weights() const {
    double total = 0.0;
    for (const auto& m : ensemble) total += m.weight;
    std::vector<double> w;
    for (const auto& m : ensemble) w.push_back(m.weight / total);
    return w;
}

FusionConfig parse_fusion_config(std::istream& in, const std::string& source) {
    FusionConfig config;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = source + ":" + std::to_string(line_no);
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("fusion", where + ": expected key=value, got '" + line + "'");
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        if (key == "max_threshold") {
            config.max_threshold = parse_number(value, where);
        } else if (key == "min_threshold") {
            config.min_threshold = parse_number(value, where);
        } else if (key == "anchor_threshold") {
            config.anchor_threshold = parse_number(value, where);
        } else if (key == "ir_threshold") {
            config.ir_threshold = parse_number(value, where);
        } else if (key == "anchor") {
            config.anchor = value;
        } else if (key == "ir") {
            config.ir = value;
        } else if (key == "members") {
            config.ensemble.clear();
            for (const auto& item : split(value, ',')) {
                const auto colon = item.find(':');
                FusionMember m;
                m.name = trim(item.substr(0, colon));
                if (colon != std::string::npos) m.weight = parse_number(trim(item.substr(colon + 1)), where);
                config.ensemble.push_back(m);
            }
        } else {
            throw Error("fusion", where + ": unknown key '" + key + "'");
        }
    }
    config.validate();
    return config;
}

FusionConfig read_fusion_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw FormatError("fusion", FormatErrorKind::Io, "cannot open " + file.string());
    return parse_fusion_config(in, file.string());
}

std::string serialize(const FusionConfig& config) {
    std::ostringstream os;
    os.precision(17);
    os << "max_threshold=" << config.max_threshold << "\n";
    os << "min_threshold=" << config.min_threshold << "\n";
    os << "anchor_threshold=" << config.anchor_threshold << "\n";
    os << "ir_threshold=" << config.ir_threshold << "\n";
    os << "members=";
    for (std::size_t i = 0; i < config.ensemble.size(); ++i) {
        os << (i ? "," : "") << config.ensemble[i].name << ":" << config.ensemble[i].weight;
    }
    os << "\nanchor=" << config.anchor << "\nir=" << config.ir << "\n";
    return os.str();
}

double ScoreRecord::score(const std::string& model) const {
    const auto it = scores.find(model);
    if (it == scores.end()) throw Error("fusion", "sample '" + sample_id + "' has no score for model '" + model + "'");
    return it->second;
}

Stage1Result stage1_ensemble(const ScoreRecord& record, const FusionConfig& config) {
    double weighted = 0.0, total = 0.0;
    for (const auto& m : config.ensemble) {
        weighted += m.weight * record.score(m.name);
        total += m.weight;
    }
    Stage1Result r;
    r.mean = weighted / total;
    if (r.mean > config.max_threshold) {
        r.decision = Stage1Decision::AcceptReal;
    } else if (r.mean < config.min_threshold) {
        r.decision = Stage1Decision::AcceptFake;
    } else {
        r.decision = Stage1Decision::Uncertain;
    }
    return r;
}

std::string to_string(FusionBranch branch) {
    switch (branch) {
        case FusionBranch::Ensemble: return "ensemble";
        case FusionBranch::Anchor: return "anchor";
        case FusionBranch::Ir: return "ir";
        case FusionBranch::Blend: return "blend";
    }
    return "?";
}

FusionResult cascade_decide(const ScoreRecord& record, const FusionConfig& config) {
    // Look everything up first so a missing score is reported whatever branch fires.
    const double anchor = record.score(config.anchor);
    const double ir = record.score(config.ir);
    const auto stage1 = stage1_ensemble(record, config);

    FusionResult r;
    r.mean = stage1.mean;
    std::ostringstream trace;
    trace.precision(6);
    trace << "mean=" << stage1.mean;
    if (stage1.decision != Stage1Decision::Uncertain) {
        r.branch = FusionBranch::Ensemble;
        r.final_score = stage1.mean;
        trace << (stage1.decision == Stage1Decision::AcceptReal ? " > max" : " < min");
    } else if (anchor < config.anchor_threshold) {
        r.branch = FusionBranch::Anchor;
        r.final_score = anchor;
        trace << " uncertain; " << config.anchor << "=" << anchor << " < " << config.anchor_threshold;
    } else if (ir < config.ir_threshold) {
        r.branch = FusionBranch::Ir;
        r.final_score = ir;
        trace << " uncertain; " << config.ir << "=" << ir << " < " << config.ir_threshold;
    } else {
        r.branch = FusionBranch::Blend;
        const auto k = static_cast<double>(config.ensemble.size());
        r.blended = (k * stage1.mean + anchor) / (k + 1.0);
        double lo = record.score(config.ensemble.front().name), hi = lo;
        for (const auto& m : config.ensemble) {
            lo = std::min(lo, record.score(m.name));
            hi = std::max(hi, record.score(m.name));
        }
        r.final_score = r.blended > 0.5 ? hi : lo;
        trace << " uncertain; blended=" << r.blended << (r.blended > 0.5 ? " > 0.5 -> max" : " <= 0.5 -> min");
    }
    r.trace = trace.str();
    return r;
}

std::vector<ScoreRecord> read_score_table(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw FormatError("fusion", FormatErrorKind::Io, "cannot open " + file.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError("fusion", FormatErrorKind::Truncated, file.string() + ": empty");
    const auto header = split(trim(line), ',');
    if (header.size() < 2 || header[0] != "sample_id") {
        throw FormatError("fusion", FormatErrorKind::BadMagic, file.string() + ": header must start with sample_id");
    }
    std::vector<ScoreRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = file.string() + ":" + std::to_string(line_no);
        const auto fields = split(line, ',');
        if (fields.size() != header.size()) {
            throw FormatError("fusion", FormatErrorKind::BadValue, where + ": expected " +
                                                                       std::to_string(header.size()) + " fields");
        }
        ScoreRecord rec;
        rec.sample_id = fields[0];
        for (std::size_t i = 1; i < fields.size(); ++i) {
            const double v = parse_number(fields[i], where);
            if (!(v >= 0.0 && v <= 1.0)) throw Error("fusion", where + ": score outside [0, 1]");
            rec.scores[header[i]] = v;
        }
        records.push_back(std::move(rec));
    }
    return records;
}

void write_fusion_results(const std::vector<ScoreRecord>& records, const std::vector<FusionResult>& results,
                          const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw FormatError("fusion", FormatErrorKind::Io, "cannot write " + file.string());
    out << "sample_id,final_score,branch\n";
    out.precision(9);
    for (std::size_t i = 0; i < records.size(); ++i) {
        out << records[i].sample_id << ',' << results[i].final_score << ',' << to_string(results[i].branch) << '\n';
    }
}

}  // namespace feathernet
