// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <regex>
#include <sstream>

#include "../oracles.hpp"
#include "feathernet/cli.hpp"
#include "feathernet/data.hpp"
#include "feathernet/fusion.hpp"
#include "feathernet/gradcheck.hpp"
#include "feathernet/metrics.hpp"
#include "feathernet/model.hpp"
#include "feathernet/ops.hpp"
#include "feathernet/training.hpp"

using namespace feathernet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct CliRun {
    int code;
    std::string out;
    std::string err;
};

CliRun cli(std::vector<std::string> args) {
    args.insert(args.begin(), "feathernet");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("feathernet_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Every regular file under dir, relative path -> bytes.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        files[fs::relative(entry.path(), dir).string()] = {std::istreambuf_iterator<char>(in), {}};
    }
    return files;
}

std::uint64_t grab(const std::string& text, const std::string& key) {
    std::smatch m;
    if (!std::regex_search(text, m, std::regex(key + ":\\s*(\\d+)"))) return 0;
    return std::stoull(m[1]);
}

bool within(double value, double target, double band) { return std::abs(value - target) <= band * target; }

std::string fmt(double v, int precision = 3) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

// ------------------------------------------------------------------ criteria

Outcome cost_reproduction() {
    const auto dir = scratch("count");
    const auto b = cli({"count", "--variant", "B", "--input", "224", "--out", (dir / "b").string()});
    const auto a = cli({"count", "--variant", "A", "--input", "224", "--out", (dir / "a").string()});
    const auto pb = grab(b.out, "Params"), mb = grab(b.out, "MAdds");
    const auto pa = grab(a.out, "Params"), ma = grab(a.out, "MAdds");
    const bool convention = b.out.find("Convention") != std::string::npos;
    const bool ok = a.code == 0 && b.code == 0 && convention && within(pb, 350000, 0.1) &&
                    within(mb, 83050000, 0.1) && within(pa, 350000, 0.1) && within(ma, 79990000, 0.1);
    fs::remove_all(dir);
    return {ok, "B " + std::to_string(pb) + " params / " + std::to_string(mb) + " MAdds (" +
                    fmt(100.0 * (double(mb) / 83050000 - 1), 2) + "%); A " + std::to_string(pa) + " / " +
                    std::to_string(ma) + " (" + fmt(100.0 * (double(ma) / 79990000 - 1), 2) + "%)"};
}

Outcome embedding_shape() {
    const auto model = build_feathernet(Variant::B, HeadKind::None, 0);
    const auto y = model.forward(TensorF({1, 3, 224, 224}, 0.5f));
    const bool ok = y.shape() == Shape4{1, 1024, 1, 1};
    return {ok, "streaming output " + to_string(y.shape())};
}

Outcome gradient_suite() {
    GradCheckOptions options;
    options.configs = 5;
    const auto reports = gradcheck_suite<double>(options);
    bool ok = !reports.empty();
    double worst = 0.0;
    std::string worst_target, failed;
    for (const auto& r : reports) {
        ok = ok && r.passed() && r.configs >= 5;
        if (!r.passed()) failed += " " + r.target;
        if (r.max_rel_error > worst) {
            worst = r.max_rel_error;
            worst_target = r.target;
        }
    }
    for (const char* needed : {"block_a", "block_b", "block_c", "squeeze_excite", "streaming"}) {
        bool present = false;
        for (const auto& r : reports) present = present || r.target == needed;
        ok = ok && present;
    }
    return {ok, std::to_string(reports.size()) + " targets x 5 configs, worst rel err " + fmt(worst) + " (" +
                    worst_target + ")" + (failed.empty() ? "" : "; failed:" + failed)};
}

Outcome oracle_equivalence() {
    Rng rng(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t groups = 1 + rng.below(4), k = 1 + rng.below(4), s = 1 + rng.below(3), p = rng.below(2);
        const std::size_t in_c = groups * (1 + rng.below(4)), out_c = groups * (1 + rng.below(4));
        const std::size_t h = k + rng.below(10), w = k + rng.below(10), n = 1 + rng.below(3);
        TensorD x({n, in_c, h, w}), wt({out_c, in_c / groups, k, k});
        for (auto& v : x.span()) v = rng.normal();
        for (auto& v : wt.span()) v = rng.normal();
        std::size_t oh = 0, ow = 0;
        const auto want = oracle::conv({x.data(), x.data() + x.size()}, {n, in_c, h, w},
                                       {wt.data(), wt.data() + wt.size()}, out_c, k, s, p, groups, {}, oh, ow);
        const auto got = conv2d(x, wt, {}, ConvGeometry::square(k, s, p, groups));
        if (got.size() != want.size()) return {false, "shape mismatch at geometry " + std::to_string(trial)};
        double diff = 0, norm = 0;
        for (std::size_t i = 0; i < want.size(); ++i) {
            diff += (got[i] - want[i]) * (got[i] - want[i]);
            norm += want[i] * want[i];
        }
        worst = std::max(worst, std::sqrt(diff / std::max(norm, 1e-300)));
    }

    bool stream_exact = true;
    for (int trial = 0; trial < 20; ++trial) {
        StreamingConfig config;
        config.channels = 1 + rng.below(16);
        config.in_h = 2 + rng.below(10);
        config.in_w = 2 + rng.below(10);
        Streaming<float> stream(config);
        for (auto& v : stream.weight.span()) v = static_cast<float>(rng.normal());
        TensorF x({2, config.channels, config.in_h, config.in_w});
        for (auto& v : x.span()) v = static_cast<float>(rng.normal());
        const auto map = depthwise_conv2d(x, stream.weight, stream.config().geom);
        const auto vec = stream.forward(x);
        const auto& c = stream.config();
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t m = 0; m < c.channels; ++m)
                for (std::size_t y = 0; y < c.out_h(); ++y)
                    for (std::size_t xx = 0; xx < c.out_w(); ++xx)
                        stream_exact = stream_exact &&
                                       vec.at(b, stream_index(y, xx, m, c.out_h(), c.out_w(), c.channels), 0, 0) ==
                                           map.at(b, m, y, xx);
    }

    bool counters_exact = true;
    for (auto variant : {Variant::A, Variant::B})
        for (auto head : {HeadKind::Linear2, HeadKind::None, HeadKind::GapLinear2}) {
            const auto arch = feathernet_arch(variant, head);
            const auto model = build_model(arch, 0);
            const auto want = oracle::arch_cost(arch);
            counters_exact = counters_exact && count_params(model) == want.params &&
                             count_madds(model, {1, 3, 224, 224}) == want.madds;
        }

    const bool ok = worst < 1e-6 && stream_exact && counters_exact;
    return {ok, "conv worst rel " + fmt(worst) + " over 50 geometries; streaming order " +
                    (stream_exact ? "exact" : "MISMATCH") + "; counters " + (counters_exact ? "exact" : "MISMATCH")};
}

Outcome desk_scale_training() {
    // Same seeds as `synth --seed 11` (200 train) and `synth --seed 12` (100 val).
    const auto make = [](std::uint64_t seed, std::size_t per_class) {
        std::vector<LabeledSample> out;
        for (const auto label : {Label::Real, Label::Fake})
            for (std::size_t i = 0; i < per_class; ++i)
                out.push_back(synthesize_sample(label, Rng::derive(Rng::derive(seed, to_int(label)), i)));
        return out;
    };
    const auto train = make(11, 100);
    const auto val = make(12, 50);

    TrainConfig config;
    config.epochs = 20;
    config.seed = 3;
    config.lr0 = 0.001;
    auto model = build_feathernet(Variant::A, HeadKind::Linear2, config.seed);
    const auto result = fit(model, train, val, config, [](const EpochRecord& r) {
        std::cout << "    epoch " << r.epoch << " loss " << fmt(r.train_loss, 4) << " val ACER " << fmt(r.val_acer, 4)
                  << std::endl;
    });

    // Re-score the kept weights independently of fit's bookkeeping.
    ScoredSet scored;
    const auto scores = score_samples(result.best, val);
    for (std::size_t i = 0; i < val.size(); ++i) scored.add(scores[i], val[i].label);
    const double acer = error_rates(scored, 0.5).acer;
    return {acer <= 0.05 && result.log.size() <= 20,
            "FeatherNetA, 200/100 samples, lr 0.001: val ACER " + fmt(acer, 4) + " at 0.5 (best epoch " +
                std::to_string(result.best_epoch) + " of " + std::to_string(result.log.size()) + ")"};
}

Outcome focal_loss_values() {
    Rng rng(6);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double a = 5 * rng.normal(), b = 5 * rng.normal();
        const Label label = rng.below(2) ? Label::Real : Label::Fake;
        const double zt = label == Label::Real ? b : a;
        const double m = std::max(a, b);
        const double ce = -(zt - m - std::log(std::exp(a - m) + std::exp(b - m)));
        TensorD z({1, 2, 1, 1}, std::span<const double>(std::vector<double>{a, b}));
        worst = std::max(worst, std::abs(focal_loss(z, std::span<const Label>(&label, 1), 1.0, 0.0).loss - ce));
    }
    const Label real = Label::Real;
    const double half = focal_loss(TensorD({1, 2, 1, 1}, 0.0), std::span<const Label>(&real, 1), 1.0, 3.0).loss;
    const double gap = std::abs(half - 0.125 * std::numbers::ln2);
    return {worst < 1e-6 && gap < 1e-9,
            "gamma=0 vs CE max diff " + fmt(worst) + "; p_t=0.5 value off by " + fmt(gap)};
}

Outcome fusion_branches() {
    std::istringstream in("members=f1,f2,m1,m2,r1,r2\nanchor=f1\nir=ir\n");
    const auto config = parse_fusion_config(in);
    const auto rec = [](std::vector<double> s, double ir) {
        static const char* names[] = {"f1", "f2", "m1", "m2", "r1", "r2"};
        ScoreRecord r;
        for (std::size_t i = 0; i < 6; ++i) r.scores[names[i]] = s[i];
        r.scores["ir"] = ir;
        return r;
    };
    std::map<FusionBranch, bool> hit;
    const auto i = cascade_decide(rec(std::vector<double>(6, 0.95), 0.5), config);
    hit[i.branch] = i.branch == FusionBranch::Ensemble && std::abs(i.final_score - 0.95) < 1e-12;
    const auto ii = cascade_decide(rec({0.1, 0.58, 0.58, 0.58, 0.58, 0.58}, 0.9), config);
    hit[ii.branch] = ii.branch == FusionBranch::Anchor && ii.final_score == 0.1;
    const auto iii = cascade_decide(rec(std::vector<double>(6, 0.6), 0.2), config);
    hit[iii.branch] = iii.branch == FusionBranch::Ir && iii.final_score == 0.2;
    const auto iv = cascade_decide(rec({0.9, 0.4, 0.5, 0.6, 0.7, 0.5}, 0.9), config);
    hit[iv.branch] = iv.branch == FusionBranch::Blend && iv.final_score == 0.9;

    // Divisor check: /7 sends this record to the min, /6 would send it to the max.
    const double rest = (0.44 * 6 - 0.8) / 5;
    const auto seven = cascade_decide(rec({0.8, rest, rest, rest, rest, rest}, 0.9), config);
    const bool by_seven = seven.branch == FusionBranch::Blend && seven.blended == (6 * seven.mean + 0.8) / 7 &&
                          seven.blended < 0.5 && (6 * seven.mean + 0.8) / 6 > 0.5 && seven.final_score == rest;

    bool invariant = true;
    Rng rng(8);
    for (int t = 0; t < 500; ++t) {
        std::vector<double> s(6);
        const bool high = rng.below(2);
        for (auto& v : s) v = high ? rng.uniform(0.901, 1.0) : rng.uniform(0.0, 0.099);
        auto shifted = config;
        shifted.anchor_threshold = rng.uniform();
        shifted.ir_threshold = rng.uniform();
        const auto base = cascade_decide(rec(s, 0.5), config);
        const auto moved = cascade_decide(rec(s, rng.uniform()), shifted);
        invariant = invariant && base.branch == FusionBranch::Ensemble && moved.final_score == base.final_score;
    }
    bool all = hit.size() == 4;
    for (const auto& [branch, ok] : hit) all = all && ok;
    return {all && by_seven && invariant, std::string("branches ") + (all ? "i-iv hit" : "MISSING") + "; k=6 blend " +
                                              (by_seven ? "divides by 7" : "WRONG") + "; stage-1 invariance " +
                                              (invariant ? "holds" : "BROKEN")};
}

Outcome metrics_oracles() {
    Rng rng(9);
    ScoredSet set, flipped;
    for (int i = 0; i < 1000; ++i) {
        const Label label = rng.below(2) ? Label::Real : Label::Fake;
        const double s = std::min(1.0, static_cast<double>(rng.below(200)) / 199.0 + (label == Label::Real ? 0.2 : 0));
        set.add(s, label);
    }
    bool rates_ok = true, tpr_ok = true;
    for (double t : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
        const auto got = error_rates(set, t);
        const auto want = oracle::count_rates(set.scores, set.labels, t);
        rates_ok = rates_ok && got.apcer == want.apcer && got.npcer == want.npcer && got.acer == want.acer;
    }
    for (double target : {1e-4, 1e-3, 1e-2, 0.1, 0.5})
        tpr_ok = tpr_ok && tpr_at_fpr(set, target).tpr == oracle::best_tpr(set.scores, set.labels, target);

    for (int i = 0; i < 1000; ++i) {
        const Label label = rng.below(2) ? Label::Real : Label::Fake;
        const double s = rng.uniform();
        flipped.add(s, label);
    }
    ScoredSet mirror;
    for (std::size_t i = 0; i < flipped.size(); ++i)
        mirror.add(1.0 - flipped.scores[i], flipped.labels[i] == Label::Real ? Label::Fake : Label::Real);
    const auto a = error_rates(flipped, 0.5), b = error_rates(mirror, 0.5);
    const bool symmetric = a.apcer == b.npcer && a.npcer == b.apcer && a.acer == b.acer;
    return {rates_ok && tpr_ok && symmetric, std::string("error rates ") + (rates_ok ? "exact" : "MISMATCH") +
                                                  ", TPR@FPR " + (tpr_ok ? "exact" : "MISMATCH") + ", flip symmetry " +
                                                  (symmetric ? "exact" : "BROKEN")};
}

Outcome augmentation() {
    const AugmentParams p{0.2, 150.0, 20};
    const bool traces = augment_pixel(120, p) == 174 && augment_pixel(20, p) == 4 && augment_pixel(0, p) == 0;
    Rng rng(10);
    bool in_range = true;
    for (int i = 0; i < 10000; ++i) in_range = in_range && draw_augment_params(rng).in_range();
    bool monotone = true;
    for (int i = 0; i < 100; ++i) {
        const auto q = draw_augment_params(rng);
        for (int v = 1; v < 256; ++v)
            monotone = monotone && augment_pixel(static_cast<std::uint8_t>(v), q) >=
                                       augment_pixel(static_cast<std::uint8_t>(v - 1), q);
    }
    return {traces && in_range && monotone, std::string("traces ") + (traces ? "120->174, 20->4, 0->0" : "WRONG") +
                                                "; 10000 draws " + (in_range ? "in range" : "OUT OF RANGE") +
                                                "; monotone " + (monotone ? "yes" : "NO")};
}

Outcome reproducibility() {
    const auto root = scratch("repro");
    const auto twice = [&](const std::vector<std::string>& args, const fs::path& out) {
        auto full = args;
        full.push_back("--out");
        full.push_back(out.string());
        const auto first = cli(full);
        const auto a = snapshot(out);
        fs::remove_all(out);
        const auto second = cli(full);
        const auto b = snapshot(out);
        return first.code == 0 && second.code == 0 && !a.empty() && a == b;
    };
    const auto data = root / "data";
    const auto val = root / "val";
    cli({"synth", "--real", "4", "--fake", "4", "--seed", "21", "--out", data.string()});
    cli({"synth", "--real", "2", "--fake", "2", "--seed", "22", "--out", val.string()});
    const bool synth = twice({"synth", "--real", "5", "--fake", "5", "--seed", "7"}, root / "synth");
    const bool train = twice({"train", "--variant", "A", "--manifest", (data / "manifest.csv").string(),
                              "--val-manifest", (val / "manifest.csv").string(), "--epochs", "2", "--batch", "4",
                              "--augment", "real", "--seed", "5"},
                             root / "train");
    std::ofstream(root / "fusion.cfg") << "members=a,b,c\nanchor=a\nir=ir\n";
    {
        std::ofstream table(root / "table.csv");
        table << "sample_id,a,b,c,ir\n";
        Rng rng(11);
        for (int i = 0; i < 50; ++i) {
            table << "s" << i << std::setprecision(6);
            for (int j = 0; j < 4; ++j) table << ',' << rng.uniform();
            table << '\n';
        }
    }
    const bool fuse = twice({"fuse", "--input", (root / "table.csv").string(), "--fusion-config",
                             (root / "fusion.cfg").string(), "--seed", "1"},
                            root / "fuse");
    fs::remove_all(root);
    return {synth && train && fuse, std::string("synth ") + (synth ? "identical" : "DIFFERS") + ", train (2 epochs) " +
                                         (train ? "identical" : "DIFFERS") + ", fuse " +
                                         (fuse ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
        double budget_s;
    };
    const std::vector<Criterion> criteria{
        {1, "cost reproduction", cost_reproduction, 5},
        {2, "embedding shape", embedding_shape, 5},
        {3, "gradient suite", gradient_suite, 120},
        {4, "oracle equivalence", oracle_equivalence, 120},
        {5, "desk-scale training", desk_scale_training, 1800},
        {6, "focal loss", focal_loss_values, 5},
        {7, "fusion branch coverage", fusion_branches, 5},
        {8, "metrics oracles", metrics_oracles, 5},
        {9, "augmentation", augmentation, 5},
        {10, "reproducibility", reproducibility, 300},
    };
    // Optional arguments: criterion ids to run, e.g. "1 2 3".
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = c.run();
        } catch (const std::exception& e) {
            outcome = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs <= c.budget_s;
        const bool pass = outcome.pass && in_time;
        if (!pass) ++failures;
        std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << outcome.detail
                  << " [" << fmt(secs, 3) << " s" << (in_time ? "" : ", over budget") << "]" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
