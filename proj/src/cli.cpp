#include "feathernet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "feathernet/config.hpp"
#include "feathernet/data.hpp"
#include "feathernet/fusion.hpp"
#include "feathernet/gradcheck.hpp"
#include "feathernet/metrics.hpp"
#include "feathernet/serialize.hpp"
#include "feathernet/training.hpp"

namespace feathernet {

namespace {

namespace fs = std::filesystem;

struct OptionSpec {
    std::string name;
    std::string fallback;
    std::string help;
    bool flag = false;
};

using Handler = std::function<void(const RunConfig&, std::ostream&)>;

struct Command {
    std::string name;
    std::string help;
    std::vector<OptionSpec> options;
    Handler run;
};

const std::string& require(const RunConfig& config, const std::string& key) {
    const auto& value = config.get(key);
    if (value.empty()) throw Error(config.subcommand, "--" + key + " is required");
    return value;
}

std::size_t positive(const RunConfig& config, const std::string& key) {
    const auto v = config.get_int(key);
    if (v <= 0) throw Error(config.subcommand, "--" + key + " must be positive");
    return static_cast<std::size_t>(v);
}

std::size_t non_negative(const RunConfig& config, const std::string& key) {
    const auto v = config.get_int(key);
    if (v < 0) throw Error(config.subcommand, "--" + key + " must not be negative");
    return static_cast<std::size_t>(v);
}

std::string hwc(const Shape4& s) {
    return std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c);
}

// ------------------------------------------------------------------ count

void run_count(const RunConfig& config, std::ostream& out) {
    const auto variant = parse_variant(config.get("variant"));
    const auto head = parse_head(config.get("head"));
    const auto input = config.get_int("input");
    if (input != static_cast<std::int64_t>(kImageExtent)) {
        throw Error("count", "input extent must be 224 (got " + std::to_string(input) + ")");
    }
    const ModelF model(feathernet_arch(variant, head));
    const auto shape = model.input_shape(1);
    const auto table = model.cost_table(shape);
    const auto params = count_params(model);
    const auto madds = count_madds(model, shape);

    out << "FeatherNet" << to_string(variant) << " head=" << to_string(head) << " input=" << hwc(shape) << "\n";
    out << "Params: " << params << "\n";
    out << "MAdds: " << madds << "\n";
    out << "Convention: " << kMaddsConvention << "\n\n";

    const std::vector<std::string> header{"layer", "op", "input", "output", "params", "madds"};
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : table) {
        rows.push_back({r.name, r.op, hwc(r.input), hwc(r.output), std::to_string(r.params), std::to_string(r.madds)});
    }
    rows.push_back({"total", "", "", "", std::to_string(params), std::to_string(madds)});
    std::vector<std::size_t> width(header.size());
    for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    }
    const auto print = [&](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out << "  ";
            // Text columns left-aligned, numbers right-aligned.
            out << (i < 4 ? std::left : std::right) << std::setw(static_cast<int>(width[i])) << row[i];
        }
        out << std::right << "\n";
    };
    print(header);
    for (const auto& row : rows) print(row);

    if (config.get_bool("csv")) {
        std::ofstream csv(config.out() / "costs.csv", std::ios::binary);
        if (!csv) throw Error("count", "cannot write costs.csv");
        csv << "layer,op,input,output,params,madds\n";
        for (const auto& row : rows) {
            for (std::size_t i = 0; i < row.size(); ++i) csv << (i ? "," : "") << row[i];
            csv << "\n";
        }
    }
}

// -------------------------------------------------------------- gradcheck

void run_gradcheck(const RunConfig& config, std::ostream& out) {
    const auto precision = config.get("precision");
    if (precision != "64" && precision != "32") throw Error("gradcheck", "--precision must be 64 or 32");
    auto options = precision == "64" ? GradCheckOptions{} : GradCheckOptions::single_precision();
    options.seed = config.seed();
    options.configs = positive(config, "configs");
    const auto target = config.get("target");
    // 32-bit backward of composite blocks loses digits to cancellation inside
    // BatchNorm at tiny batch sizes; the 32-bit bound is held for primitives.
    std::vector<std::string> targets = precision == "64" ? gradcheck_targets() : gradcheck_primitives();
    if (target != "all") {
        targets = gradcheck_targets();
        if (std::find(targets.begin(), targets.end(), target) == targets.end()) {
            throw Error("gradcheck", "unknown target '" + target + "'");
        }
        targets = {target};
    }

    std::ofstream csv(config.out() / "gradcheck.csv", std::ios::binary);
    if (!csv) throw Error("gradcheck", "cannot write gradcheck.csv");
    csv << "target,configs,max_rel_error,tolerance,checked,kinks,passed\n";
    std::size_t failed = 0;
    for (const auto& name : targets) {
        const auto r = precision == "64" ? gradcheck_target<double>(name, options)
                                         : gradcheck_target<float>(name, options);
        std::ostringstream err;
        err << std::scientific << std::setprecision(3) << r.max_rel_error;
        out << std::left << std::setw(18) << name << std::right << " configs=" << r.configs
            << " max_rel_error=" << err.str() << " checked=" << r.checked << " kinks=" << r.kinks << (r.passed() ? "  PASS" : "  FAIL") << "  worst: " << r.worst_config
            << "\n";
        csv << name << ',' << r.configs << ',' << err.str() << ',' << r.tolerance << ',' << r.checked << ','
            << r.kinks << ',' << (r.passed() ? 1 : 0)
            << "\n";
        if (!r.passed()) ++failed;
    }
    if (failed) throw Error("gradcheck", std::to_string(failed) + " target(s) above tolerance");
}

// ------------------------------------------------------------------ synth

void run_synth(const RunConfig& config, std::ostream& out) {
    const auto n_real = non_negative(config, "real");
    const auto n_fake = non_negative(config, "fake");
    if (n_real + n_fake == 0) throw Error("synth", "nothing to generate");
    const auto dir = config.out();
    fs::create_directories(dir / "images");
    Manifest manifest;
    manifest.root = dir;
    for (const auto label : {Label::Real, Label::Fake}) {
        const auto count = label == Label::Real ? n_real : n_fake;
        for (std::size_t i = 0; i < count; ++i) {
            const auto sample = synthesize_sample(label, Rng::derive(Rng::derive(config.seed(), to_int(label)), i));
            std::ostringstream name;
            name << "images/" << (label == Label::Real ? "real_" : "fake_") << std::setw(4) << std::setfill('0') << i
                 << ".pgm";
            write_pgm(sample.image, dir / name.str());
            manifest.entries.push_back({name.str(), label, Modality::Depth});
        }
    }
    write_manifest(manifest, dir / "manifest.csv");
    out << "wrote " << manifest.size() << " samples (" << n_real << " real, " << n_fake << " fake) to "
        << (dir / "manifest.csv").string() << "\n";
}

// ---------------------------------------------------------------- augment

void run_augment(const RunConfig& config, std::ostream& out) {
    const auto source = read_manifest(require(config, "manifest"));
    if (source.empty()) throw Error("augment", "empty manifest");
    const bool all = config.get_bool("all");
    const auto dir = config.out();
    fs::create_directories(dir / "images");
    Manifest result;
    result.root = dir;
    std::ofstream params(dir / "augment_params.csv", std::ios::binary);
    if (!params) throw Error("augment", "cannot write augment_params.csv");
    params << "path,scaler,offset\n";
    params << std::setprecision(17);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < source.size(); ++i) {
        const auto& entry = source.entries[i];
        auto sample = load_sample(source, i);
        std::ostringstream name;
        name << "images/" << std::setw(5) << std::setfill('0') << i << "_" << fs::path(entry.path).filename().string();
        if (entry.modality == Modality::Depth && (all || entry.label == Label::Real)) {
            Rng rng(Rng::derive(config.seed(), i));
            const auto p = draw_augment_params(rng);
            sample.image = augment_depth(sample.image, p);
            params << name.str() << ',' << p.scaler << ',' << p.offset << "\n";
            ++changed;
        }
        write_pgm(sample.image, dir / name.str());
        result.entries.push_back({name.str(), entry.label, entry.modality});
    }
    write_manifest(result, dir / "manifest.csv");
    out << "augmented " << changed << " of " << source.size() << " samples\n";
}

// ------------------------------------------------------------------ train

void run_train(const RunConfig& config, std::ostream& out) {
    const auto variant = parse_variant(config.get("variant"));
    const auto head = parse_head(config.get("head"));
    const auto train = read_manifest(require(config, "manifest"));
    const auto val = read_manifest(require(config, "val-manifest"));
    if (train.empty()) throw Error("train", "empty manifest: " + config.get("manifest"));
    if (val.empty()) throw Error("train", "empty manifest: " + config.get("val-manifest"));

    TrainConfig tc;
    tc.epochs = positive(config, "epochs");
    tc.batch_size = positive(config, "batch");
    tc.lr0 = config.get_double("lr");
    tc.decay_factor = config.get_double("decay-factor");
    tc.decay_period = positive(config, "decay-period");
    tc.momentum = config.get_double("momentum");
    tc.focal_alpha = config.get_double("alpha");
    tc.focal_gamma = config.get_double("gamma");
    tc.seed = config.seed();
    const auto augment = config.get("augment");
    if (augment == "real") {
        tc.augment_real = true;
    } else if (augment == "all") {
        tc.augment_all = true;
    } else if (augment != "none") {
        throw Error("train", "--augment must be none, real or all");
    }
    tc.validate();

    auto model = build_feathernet<float>(variant, head, config.seed());
    const auto result = fit(model, train, val, tc, [&](const EpochRecord& r) {
        out << "epoch " << r.epoch << " lr=" << r.lr << " train_loss=" << r.train_loss << " val_acer=" << r.val_acer
            << std::endl;
    });
    const auto dir = config.out();
    write_training_log(result.log, dir / "train_log.csv");
    save_weights(result.best, dir / "best.fthn");
    save_weights(model, dir / "final.fthn");
    out << "best epoch " << result.best_epoch << " val_acer=" << result.best_val_acer << "\n";
}

// ------------------------------------------------------------------- eval

void run_eval(const RunConfig& config, std::ostream& out) {
    const auto dir = config.out();
    std::vector<ScoreRow> rows;
    if (!config.get("weights").empty()) {
        if (!config.get("scores").empty()) throw Error("eval", "give either --scores or --weights, not both");
        const auto model = load_weights(config.get("weights"));
        const auto manifest = read_manifest(require(config, "manifest"));
        if (manifest.empty()) throw Error("eval", "empty manifest");
        std::vector<LabeledSample> samples;
        for (std::size_t i = 0; i < manifest.size(); ++i) samples.push_back(load_sample(manifest, i));
        const auto scores = score_samples(model, samples);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            rows.push_back({manifest.entries[i].path, scores[i], samples[i].label});
        }
        write_scores(rows, dir / "scores.csv");
    } else {
        rows = read_scores(require(config, "scores"));
    }
    double threshold = config.get_double("threshold");
    if (!config.get("tune-scores").empty()) threshold = tune_threshold(to_scored_set(read_scores(config.get("tune-scores"))));
    const auto json = to_json(evaluate(to_scored_set(rows), threshold));
    std::ofstream report(dir / "metrics.json", std::ios::binary);
    if (!report) throw Error("eval", "cannot write metrics.json");
    report << json << "\n";
    out << json << "\n";
}

// ------------------------------------------------------------------- fuse

void run_fuse(const RunConfig& config, std::ostream& out) {
    const auto fusion = read_fusion_config(require(config, "fusion-config"));
    const auto records = read_score_table(require(config, "input"));
    std::vector<FusionResult> results;
    std::map<std::string, std::size_t> branches;
    for (const auto& r : records) {
        results.push_back(cascade_decide(r, fusion));
        ++branches[to_string(results.back().branch)];
    }
    write_fusion_results(records, results, config.out() / "fused.csv");
    out << "fused " << records.size() << " samples:";
    for (const auto& [branch, n] : branches) out << " " << branch << "=" << n;
    out << "\n";
}

std::vector<Command> commands() {
    return {
        {"count",
         "Parameter and multiply-add counts with a per-layer breakdown",
         {{"variant", "B", "A or B"},
          {"head", "linear2", "linear2, none or gap"},
          {"input", "224", "input extent (only 224 is supported)"},
          {"csv", "false", "also write costs.csv under --out", true}},
         run_count},
        {"gradcheck",
         "Finite-difference gradient checks over primitives, blocks and a tiny model",
         {{"precision", "64", "64 or 32"},
          {"configs", "5", "random configurations per target"},
          {"target", "all", "one target name or all"}},
         run_gradcheck},
        {"synth",
         "Generate a synthetic depth dataset (PGM images plus manifest.csv)",
         {{"real", "100", "number of real samples"}, {"fake", "100", "number of fake samples"}},
         run_synth},
        {"augment",
         "Apply the depth augmentation to real (or all) samples of a manifest",
         {{"manifest", "", "input manifest CSV"}, {"all", "false", "augment fake samples too", true}},
         run_augment},
        {"train",
         "Train FeatherNet with focal loss and SGD momentum",
         {{"variant", "B", "A or B"},
          {"head", "linear2", "linear2 or gap"},
          {"manifest", "", "training manifest CSV"},
          {"val-manifest", "", "validation manifest CSV"},
          {"epochs", "20", "number of epochs"},
          {"batch", "32", "batch size"},
          {"lr", "0.001", "initial learning rate"},
          {"decay-factor", "0.1", "learning-rate decay factor"},
          {"decay-period", "60", "epochs between decays"},
          {"momentum", "0.9", "SGD momentum"},
          {"alpha", "1", "focal loss alpha"},
          {"gamma", "3", "focal loss gamma"},
          {"augment", "none", "none, real or all"}},
         run_train},
        {"eval",
         "Anti-spoofing metrics as JSON, from a scores file or a weight file plus manifest",
         {{"scores", "", "scores CSV (path,score,label)"},
          {"weights", "", "weight file to score --manifest with"},
          {"manifest", "", "manifest to score"},
          {"threshold", "0.5", "decision threshold (real iff score >= threshold)"},
          {"tune-scores", "", "validation scores CSV; picks the threshold with the lowest ACER"}},
         run_eval},
        {"fuse",
         "Two-stage ensemble and cascade fusion of per-model scores",
         {{"input", "", "CSV with sample_id and one column per model"},
          {"fusion-config", "", "fusion key=value file"}},
         run_fuse},
    };
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    const auto specs = commands();
    CLI::App app{"FeatherNet engine: counting, gradient checks, data, training, metrics and fusion", "feathernet"};
    app.require_subcommand(1);

    struct Bound {
        CLI::App* app = nullptr;
        std::map<std::string, std::string> text;
        std::map<std::string, bool> flags;
        std::string config_file;
    };
    // Stable addresses: CLI11 keeps pointers into these maps.
    std::vector<std::unique_ptr<Bound>> bound;
    for (const auto& spec : specs) {
        auto b = std::make_unique<Bound>();
        b->app = app.add_subcommand(spec.name, spec.help);
        for (const auto& opt : spec.options) {
            if (opt.flag) {
                b->app->add_flag("--" + opt.name, b->flags[opt.name], opt.help);
            } else {
                b->app->add_option("--" + opt.name, b->text[opt.name], opt.help);
            }
        }
        b->app->add_option("--seed", b->text["seed"], "random seed (default 0)");
        b->app->add_option("--out", b->text["out"], "output directory (default out)");
        b->app->add_option("--config", b->config_file, "key=value file; flags override its values");
        bound.push_back(std::move(b));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        for (std::size_t i = 0; i < specs.size(); ++i) {
            auto& b = *bound[i];
            if (!b.app->parsed()) continue;
            const auto& spec = specs[i];
            ConfigValues defaults{{"seed", "0"}, {"out", "out"}};
            ConfigValues flags;
            for (const auto& opt : spec.options) {
                defaults[opt.name] = opt.fallback;
                if (b.app->get_option("--" + opt.name)->count() > 0) {
                    flags[opt.name] = opt.flag ? (b.flags[opt.name] ? "true" : "false") : b.text[opt.name];
                }
            }
            for (const char* global : {"seed", "out"}) {
                if (b.app->get_option(std::string("--") + global)->count() > 0) flags[global] = b.text[global];
            }
            const ConfigValues file = b.config_file.empty() ? ConfigValues{} : read_config_file(b.config_file);
            const auto config = resolve_config(spec.name, defaults, file, flags);
            config.seed();  // validates
            if (config.get("out").empty()) throw Error(spec.name, "--out must not be empty");
            fs::create_directories(config.out());
            {
                std::ofstream provenance(config.out() / "provenance.txt", std::ios::binary);
                if (!provenance) throw Error(spec.name, "cannot write provenance under " + config.out().string());
                provenance << serialize(config);
            }
            spec.run(config, out);
            return 0;
        }
        err << app.help();
        return 1;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace feathernet
