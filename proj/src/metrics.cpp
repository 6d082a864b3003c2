#include "feathernet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "feathernet/error.hpp"

namespace feathernet {

std::size_t ScoredSet::count(Label label) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

void ScoredSet::require_both_classes(const char* origin) const {
    if (scores.size() != labels.size()) throw Error(origin, "score and label counts differ");
    if (count(Label::Real) == 0 || count(Label::Fake) == 0) {
        throw Error(origin, "both real and fake samples are required");
    }
}

ErrorRates error_rates(const ScoredSet& set, double threshold) {
    set.require_both_classes("metrics");
    std::size_t fake_accepted = 0, real_rejected = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const bool predicted_real = set.scores[i] >= threshold;
        if (set.labels[i] == Label::Fake && predicted_real) ++fake_accepted;
        if (set.labels[i] == Label::Real && !predicted_real) ++real_rejected;
    }
    ErrorRates r;
    r.apcer = static_cast<double>(fake_accepted) / static_cast<double>(set.count(Label::Fake));
    r.npcer = static_cast<double>(real_rejected) / static_cast<double>(set.count(Label::Real));
    r.acer = (r.apcer + r.npcer) / 2.0;
    return r;
}

namespace {

struct CountPoint {
    std::size_t fp = 0;
    std::size_t tp = 0;
    double threshold = 0.0;
};

std::vector<CountPoint> roc_counts(const ScoredSet& set) {
    set.require_both_classes("metrics");
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return set.scores[a] > set.scores[b]; });

    std::vector<CountPoint> points;
    const double top = set.scores[order.front()];
    points.push_back({0, 0, std::nextafter(top, std::numeric_limits<double>::infinity())});
    std::size_t fp = 0, tp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = set.scores[order[i]];
        while (i < order.size() && set.scores[order[i]] == s) {
            (set.labels[order[i]] == Label::Real ? tp : fp) += 1;
            ++i;
        }
        points.push_back({fp, tp, s});
    }
    return points;
}

}  // namespace

std::vector<RocPoint> roc_points(const ScoredSet& set) {
    const auto counts = roc_counts(set);
    const double fakes = static_cast<double>(set.count(Label::Fake));
    const double reals = static_cast<double>(set.count(Label::Real));
    std::vector<RocPoint> curve;
    curve.reserve(counts.size());
    for (const auto& p : counts) {
        curve.push_back({static_cast<double>(p.fp) / fakes, static_cast<double>(p.tp) / reals, p.threshold});
    }
    return curve;
}

double roc_auc(const std::vector<RocPoint>& curve) {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
    }
    return area;
}

OperatingPoint tpr_at_fpr(const ScoredSet& set, double target_fpr) {
    const auto counts = roc_counts(set);
    const double fakes = static_cast<double>(set.count(Label::Fake));
    const double reals = static_cast<double>(set.count(Label::Real));
    // Integer comparison avoids fp/F rounding at exact targets such as 50/5000.
    const double allowed = target_fpr * fakes * (1.0 + 1e-12);
    const CountPoint* best = &counts.front();
    for (const auto& p : counts) {
        if (static_cast<double>(p.fp) <= allowed) best = &p;
    }
    return {static_cast<double>(best->tp) / reals, static_cast<double>(best->fp) / fakes, best->threshold};
}

MetricsReport evaluate(const ScoredSet& set, double threshold) {
    MetricsReport report;
    report.threshold = threshold;
    report.rates = error_rates(set, threshold);
    for (std::size_t i = 0; i < kFprTargets.size(); ++i) report.tpr_at_fpr[i] = tpr_at_fpr(set, kFprTargets[i]);
    report.n_real = set.count(Label::Real);
    report.n_fake = set.count(Label::Fake);
    return report;
}

double tune_threshold(const ScoredSet& validation) {
    double best_threshold = 0.5;
    double best_acer = std::numeric_limits<double>::infinity();
    for (const auto& p : roc_points(validation)) {
        const double acer = error_rates(validation, p.threshold).acer;
        if (acer < best_acer || (acer == best_acer && p.threshold > best_threshold)) {
            best_acer = acer;
            best_threshold = p.threshold;
        }
    }
    return best_threshold;
}

std::string to_json(const MetricsReport& report) {
    static const std::array<const char*, 3> keys{"1e-2", "1e-3", "1e-4"};
    nlohmann::ordered_json j;
    j["threshold"] = report.threshold;
    j["apcer"] = report.rates.apcer;
    j["npcer"] = report.rates.npcer;
    j["acer"] = report.rates.acer;
    nlohmann::ordered_json tpr;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        tpr[keys[i]] = {{"tpr", report.tpr_at_fpr[i].tpr},
                        {"fpr", report.tpr_at_fpr[i].fpr},
                        {"threshold", report.tpr_at_fpr[i].threshold}};
    }
    j["tpr_at_fpr"] = tpr;
    j["n_real"] = report.n_real;
    j["n_fake"] = report.n_fake;
    j["n_total"] = report.n_real + report.n_fake;
    return j.dump(2);
}

std::vector<ScoreRow> read_scores(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw FormatError("scores", FormatErrorKind::Io, "cannot open " + file.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("path,score,label", 0) != 0) {
        throw FormatError("scores", FormatErrorKind::BadMagic, file.string() + ": header must be path,score,label");
    }
    std::vector<ScoreRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = file.string() + ":" + std::to_string(line_no);
        const auto c2 = line.rfind(',');
        const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos : line.rfind(',', c2 - 1);
        if (c1 == std::string::npos) throw FormatError("scores", FormatErrorKind::BadValue, where + ": expected 3 fields");
        ScoreRow row;
        row.path = line.substr(0, c1);
        try {
            std::size_t used = 0;
            const std::string score = line.substr(c1 + 1, c2 - c1 - 1);
            row.score = std::stod(score, &used);
            if (used != score.size()) throw std::invalid_argument("trailing");
            row.label = label_from_int(std::stol(line.substr(c2 + 1)));
        } catch (const std::exception&) {
            throw FormatError("scores", FormatErrorKind::BadValue, where + ": bad score or label");
        }
        if (!(row.score >= 0.0 && row.score <= 1.0)) {
            throw FormatError("scores", FormatErrorKind::BadValue, where + ": score outside [0, 1]");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_scores(const std::vector<ScoreRow>& rows, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw FormatError("scores", FormatErrorKind::Io, "cannot write " + file.string());
    out << "path,score,label\n";
    out.precision(9);
    for (const auto& r : rows) out << r.path << ',' << r.score << ',' << to_int(r.label) << '\n';
}

ScoredSet to_scored_set(const std::vector<ScoreRow>& rows) {
    ScoredSet set;
    for (const auto& r : rows) set.add(r.score, r.label);
    return set;
}

}  // namespace feathernet
