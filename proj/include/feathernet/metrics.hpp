#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "feathernet/types.hpp"

namespace feathernet {

// Scores are probabilities of "real". Decision rule everywhere:
// predict real iff score >= threshold.
struct ScoredSet {
    std::vector<double> scores;
    std::vector<Label> labels;

    void add(double score, Label label) {
        scores.push_back(score);
        labels.push_back(label);
    }
    std::size_t size() const { return scores.size(); }
    std::size_t count(Label label) const;
    // Throws unless lengths agree and both classes are present.
    void require_both_classes(const char* origin) const;
};

struct ErrorRates {
    double apcer = 0.0;  // fakes accepted as real / fakes
    double npcer = 0.0;  // reals rejected as fake / reals
    double acer = 0.0;   // (apcer + npcer) / 2
};

ErrorRates error_rates(const ScoredSet& set, double threshold);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

// Step ROC: one point per distinct score plus a leading (0, 0) point whose
// threshold sits just above the highest score. fpr is nondecreasing.
std::vector<RocPoint> roc_points(const ScoredSet& set);
double roc_auc(const std::vector<RocPoint>& curve);

struct OperatingPoint {
    double tpr = 0.0;
    double fpr = 0.0;
    double threshold = 0.0;
};

// Highest TPR among thresholds whose FPR does not exceed target; no interpolation.
OperatingPoint tpr_at_fpr(const ScoredSet& set, double target_fpr);

inline constexpr std::array<double, 3> kFprTargets{1e-2, 1e-3, 1e-4};

struct MetricsReport {
    double threshold = 0.5;
    ErrorRates rates;
    std::array<OperatingPoint, kFprTargets.size()> tpr_at_fpr{};
    std::size_t n_real = 0;
    std::size_t n_fake = 0;
};

MetricsReport evaluate(const ScoredSet& set, double threshold = 0.5);

// Observed-score threshold with the lowest ACER; ties go to the larger threshold.
double tune_threshold(const ScoredSet& validation);

std::string to_json(const MetricsReport& report);

// Scores file: CSV "path,score,label".
struct ScoreRow {
    std::string path;
    double score = 0.0;
    Label label = Label::Fake;
};

std::vector<ScoreRow> read_scores(const std::filesystem::path& file);
void write_scores(const std::vector<ScoreRow>& rows, const std::filesystem::path& file);
ScoredSet to_scored_set(const std::vector<ScoreRow>& rows);

}  // namespace feathernet
