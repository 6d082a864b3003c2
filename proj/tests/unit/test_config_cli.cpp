#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "feathernet/cli.hpp"
#include "feathernet/config.hpp"
#include "feathernet/error.hpp"

using namespace feathernet;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult run(std::vector<std::string> args) {
    args.insert(args.begin(), "feathernet");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("config text parsing") {
    std::istringstream in("# comment\n\nepochs = 10\nvariant=A  # trailing\n");
    const auto values = parse_config_text(in);
    CHECK(values.at("epochs") == "10");
    CHECK(values.at("variant") == "A");

    std::istringstream bad("foo\n");
    try {
        parse_config_text(bad, "run.cfg");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("run.cfg:1") != std::string::npos);
    }
    std::istringstream later("a=1\n=2\n");
    CHECK_THROWS_WITH_AS(parse_config_text(later, "x"), doctest::Contains("x:2"), Error);
}

TEST_CASE("flags override file, file overrides defaults") {
    const ConfigValues defaults{{"epochs", "20"}, {"lr", "0.001"}, {"seed", "0"}, {"out", "out"}};
    const auto c = resolve_config("train", defaults, {{"epochs", "10"}, {"lr", "0.01"}}, {{"epochs", "20"}});
    CHECK(c.get_int("epochs") == 20);
    CHECK(c.get_double("lr") == 0.01);
    CHECK(c.seed() == 0);
    CHECK_THROWS_AS(resolve_config("train", defaults, {{"epoch", "3"}}, {}), Error);
    CHECK_THROWS_AS(resolve_config("train", defaults, {}, {{"bogus", "1"}}), Error);
}

TEST_CASE("resolve, serialize, parse is the identity") {
    const ConfigValues defaults{{"epochs", "20"}, {"augment", "real"}, {"seed", "0"}, {"out", "out"}};
    const auto c = resolve_config("train", defaults, {{"augment", "all"}}, {{"seed", "42"}});
    std::istringstream in(serialize(c));
    const auto back = parse_run_config(in);
    CHECK(back == c);
    const auto again = resolve_config(back.subcommand, defaults, back.values, {});
    CHECK(again == c);
}

TEST_CASE("typed getters reject junk") {
    RunConfig c{"x", {{"n", "12a"}, {"f", "1.5"}, {"b", "maybe"}, {"u", "-3"}}};
    CHECK_THROWS_AS(c.get_int("n"), Error);
    CHECK(c.get_double("f") == 1.5);
    CHECK_THROWS_AS(c.get_bool("b"), Error);
    CHECK_THROWS_AS(c.get_u64("u"), Error);
    CHECK_THROWS_AS(c.get("missing"), Error);
}

TEST_CASE("count prints totals and writes provenance") {
    const auto dir = scratch("feathernet_cli_count");
    const auto r = run({"count", "--variant", "B", "--csv", "--out", dir.string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("Params: 353334") != std::string::npos);
    CHECK(r.out.find("MAdds: 80202272") != std::string::npos);
    CHECK(r.out.find("Convention") != std::string::npos);
    CHECK(fs::exists(dir / "costs.csv"));
    const auto provenance = slurp(dir / "provenance.txt");
    CHECK(provenance.find("subcommand=count") != std::string::npos);
    CHECK(provenance.find("variant=B") != std::string::npos);
    CHECK(provenance.find("seed=0") != std::string::npos);

    const auto a = run({"count", "--variant", "A", "--out", dir.string()});
    CHECK(a.out.find("Params: 347382") != std::string::npos);
    CHECK(run({"count", "--input", "112", "--out", dir.string()}).code == 1);
    CHECK(run({"count", "--variant", "Z", "--out", dir.string()}).code == 1);
    fs::remove_all(dir);
}

TEST_CASE("config file feeds the run and flags win") {
    const auto dir = scratch("feathernet_cli_config");
    std::ofstream(dir / "run.cfg") << "variant=A\nhead=gap\n";
    const auto r = run({"count", "--config", (dir / "run.cfg").string(), "--head", "linear2", "--out", dir.string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("Params: 347382") != std::string::npos);
    std::ofstream(dir / "bad.cfg") << "foo\n";
    const auto bad = run({"count", "--config", (dir / "bad.cfg").string(), "--out", dir.string()});
    CHECK(bad.code == 1);
    CHECK(bad.err.find(":1") != std::string::npos);
    std::ofstream(dir / "unknown.cfg") << "epochs=3\n";
    CHECK(run({"count", "--config", (dir / "unknown.cfg").string(), "--out", dir.string()}).code == 1);
    fs::remove_all(dir);
}

TEST_CASE("usage errors exit 1") {
    const auto none = run({});
    CHECK(none.code == 1);
    const auto unknown = run({"frobnicate"});
    CHECK(unknown.code == 1);
    CHECK(unknown.err.find("Usage") != std::string::npos);
    CHECK(run({"count", "--no-such-flag"}).code == 1);
    CHECK(run({"count", "--help"}).code == 0);
}

TEST_CASE("train with an empty manifest exits 1") {
    const auto dir = scratch("feathernet_cli_train_empty");
    std::ofstream(dir / "m.csv") << "path,label,modality\n";
    const auto m = (dir / "m.csv").string();
    const auto r = run({"train", "--manifest", m, "--val-manifest", m, "--out", (dir / "o").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("empty manifest") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("synth, augment, eval and fuse end to end") {
    const auto dir = scratch("feathernet_cli_flow");
    const auto synth = (dir / "synth").string();
    REQUIRE(run({"synth", "--real", "3", "--fake", "2", "--seed", "4", "--out", synth}).code == 0);
    CHECK(fs::exists(dir / "synth/manifest.csv"));
    CHECK(fs::exists(dir / "synth/images/real_0002.pgm"));

    const auto aug = run({"augment", "--manifest", synth + "/manifest.csv", "--out", (dir / "aug").string()});
    CHECK(aug.code == 0);
    CHECK(fs::exists(dir / "aug/augment_params.csv"));
    CHECK(fs::exists(dir / "aug/manifest.csv"));

    std::ofstream(dir / "scores.csv") << "path,score,label\na,0.9,1\nb,0.2,0\nc,0.6,1\nd,0.7,0\n";
    const auto ev = run({"eval", "--scores", (dir / "scores.csv").string(), "--out", (dir / "ev").string()});
    CHECK(ev.code == 0);
    CHECK(ev.out.find("\"acer\": 0.25") != std::string::npos);
    CHECK(fs::exists(dir / "ev/metrics.json"));

    std::ofstream(dir / "fusion.cfg") << "members=m1,m2\nanchor=m1\nir=ir\n";
    std::ofstream(dir / "table.csv") << "sample_id,m1,m2,ir\ns1,0.95,0.99,0.5\ns2,0.3,0.6,0.9\n";
    const auto fu = run({"fuse", "--input", (dir / "table.csv").string(), "--fusion-config",
                         (dir / "fusion.cfg").string(), "--out", (dir / "fu").string()});
    CHECK(fu.code == 0);
    const auto fused = slurp(dir / "fu/fused.csv");
    CHECK(fused.find("s1,") != std::string::npos);
    CHECK(fused.find("anchor") != std::string::npos);
    fs::remove_all(dir);
}
