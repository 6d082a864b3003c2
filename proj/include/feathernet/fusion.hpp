#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace feathernet {

struct FusionMember {
    std::string name;
    double weight = 1.0;
};

// Two-stage fusion: a weighted ensemble of depth models decides confident
// samples; uncertain ones fall through to an anchor model and an IR model.
struct FusionConfig {
    std::vector<FusionMember> ensemble;
    std::string anchor;  // must be an ensemble member
    std::string ir;      // must not be an ensemble member
    double max_threshold = 0.9;
    double min_threshold = 0.1;
    double anchor_threshold = 0.5;
    double ir_threshold = 0.5;

    void validate() const;
    std::vector<double> normalized_weights() const;
};

// key=value text; '#' starts a comment. Keys: max_threshold, min_threshold,
// anchor_threshold, ir_threshold, members (name[:weight],...), anchor, ir.
FusionConfig parse_fusion_config(std::istream& in, const std::string& source = "fusion config");
FusionConfig read_fusion_config(const std::filesystem::path& file);
std::string serialize(const FusionConfig& config);

struct ScoreRecord {
    std::string sample_id;
    std::map<std::string, double> scores;

    double score(const std::string& model) const;  // throws naming a missing model
};

enum class Stage1Decision { AcceptReal, AcceptFake, Uncertain };

struct Stage1Result {
    double mean = 0.0;
    Stage1Decision decision = Stage1Decision::Uncertain;
};

Stage1Result stage1_ensemble(const ScoreRecord& record, const FusionConfig& config);

enum class FusionBranch {
    Ensemble,  // (i)   mean outside (min, max): final = mean
    Anchor,    // (ii)  anchor < anchor_threshold: final = anchor score
    Ir,        // (iii) IR < ir_threshold: final = IR score
    Blend,     // (iv)  blended = (k*mean + anchor)/(k+1); > 0.5 -> max else min of ensemble
};

std::string to_string(FusionBranch branch);

struct FusionResult {
    double final_score = 0.0;
    FusionBranch branch = FusionBranch::Ensemble;
    double mean = 0.0;
    double blended = 0.0;  // only meaningful for Blend
    std::string trace;
};

FusionResult cascade_decide(const ScoreRecord& record, const FusionConfig& config);

// Input CSV: header "sample_id,<model>,<model>,...".
std::vector<ScoreRecord> read_score_table(const std::filesystem::path& file);
// Output CSV: "sample_id,final_score,branch".
void write_fusion_results(const std::vector<ScoreRecord>& records, const std::vector<FusionResult>& results,
                          const std::filesystem::path& file);

}  // namespace feathernet
