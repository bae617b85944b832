#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dyss/checkpoint.hpp"
#include "dyss/config.hpp"
#include "dyss/io.hpp"

using namespace dyss;
namespace fs = std::filesystem;

#ifndef DYSS_CLI_PATH
#error "DYSS_CLI_PATH must point at the built binary"
#endif

namespace {

int run(const std::string& args) {
    std::string cmd = std::string(DYSS_CLI_PATH) + " " + args + " >> /tmp/dyss_cli_test.log 2>&1";
    return std::system(cmd.c_str());
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path sandbox() {
    fs::path dir = fs::temp_directory_path() / "dyss_cli_sandbox";
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RunConfig small_config() {
    RunConfig cfg;
    cfg.seed = 11;
    cfg.world.cameras = 2;
    cfg.world.image_w = 96;
    cfg.world.image_h = 64;
    cfg.world.channels = 8;
    cfg.world.frames = 3;
    cfg.world.bounds = 10.0;
    cfg.world.n_objects_min = 2;
    cfg.world.n_objects_max = 3;
    cfg.decoder.layers = 2;
    cfg.decoder.queries = 16;
    cfg.decoder.floor_count = 6;
    cfg.decoder.feature_dim = 8;
    cfg.decoder.points = 2;
    cfg.decoder.state_dim = 8;
    cfg.decoder.init.xy_sigma = 8.0;
    cfg.train.steps = 4;
    cfg.train.batch = 2;
    cfg.train.checkpoint_every = 2;
    return cfg;
}

}  // namespace

TEST_CASE("config round-trip is a fixed point and rejects unknown keys") {
    RunConfig cfg = small_config();
    json once = run_config_to_json(cfg);
    RunConfig back = run_config_from_json(once);
    json twice = run_config_to_json(back);
    CHECK(once.dump() == twice.dump());

    json bad = once;
    bad["decoder"]["warp_factor"] = 9;
    CHECK_THROWS_WITH(run_config_from_json(bad),
                      Catch::Matchers::ContainsSubstring("warp_factor"));
    json bad2 = once;
    bad2["typo_section"] = json::object();
    CHECK_THROWS_WITH(run_config_from_json(bad2),
                      Catch::Matchers::ContainsSubstring("typo_section"));
}

TEST_CASE("gen-data: counts, determinism, refusal without --force, zero scenes") {
    fs::path dir = sandbox();
    fs::path cfg_path = dir / "cfg.json";
    save_run_config(cfg_path.string(), small_config());

    REQUIRE(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "d1").string() +
                " --scenes 4") == 0);
    std::size_t blobs = 0;
    for (auto& e : fs::directory_iterator(dir / "d1"))
        if (e.path().extension() == ".bin") ++blobs;
    CHECK(blobs == 4);

    // rerun with the same seed into a fresh dir: byte-identical
    REQUIRE(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "d2").string() +
                " --scenes 4") == 0);
    CHECK(slurp(dir / "d1" / "manifest.json") == slurp(dir / "d2" / "manifest.json"));
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(slurp(dir / "d1" / scene_file_name(i)) == slurp(dir / "d2" / scene_file_name(i)));

    // refuse to clobber without --force, accept with it
    CHECK(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "d1").string() +
              " --scenes 2") != 0);
    CHECK(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "d1").string() +
              " --scenes 2 --force") == 0);

    // zero scenes is a valid empty dataset
    REQUIRE(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "d0").string() +
                " --scenes 0") == 0);
    Dataset empty = load_dataset((dir / "d0").string());
    CHECK(empty.scenes.empty());
}

TEST_CASE("deterministic training twice gives bitwise-identical checkpoints") {
    fs::path dir = sandbox();
    fs::path cfg_path = dir / "cfg.json";
    save_run_config(cfg_path.string(), small_config());
    REQUIRE(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "ds").string() +
                " --scenes 2") == 0);

    for (const char* out : {"r1", "r2"})
        REQUIRE(run("train " + (dir / "ds").string() + " --config " + cfg_path.string() +
                    " --out " + (dir / out).string() + " --deterministic") == 0);
    CHECK(slurp(dir / "r1" / "checkpoint" / "params.bin") ==
          slurp(dir / "r2" / "checkpoint" / "params.bin"));
    CHECK(slurp(dir / "r1" / "checkpoint" / "manifest.json") ==
          slurp(dir / "r2" / "checkpoint" / "manifest.json"));
    CHECK(slurp(dir / "r1" / "loss.csv") == slurp(dir / "r2" / "loss.csv"));
}

TEST_CASE("resume from a mid-run checkpoint reproduces the remaining steps bitwise") {
    fs::path dir = sandbox();
    RunConfig cfg = small_config();
    cfg.train.steps = 6;
    cfg.train.checkpoint_every = 3;
    fs::path cfg_path = dir / "cfg.json";
    save_run_config(cfg_path.string(), cfg);
    REQUIRE(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "ds").string() +
                " --scenes 2") == 0);

    // full run writes a mid-run checkpoint after step 3 and the final one
    REQUIRE(run("train " + (dir / "ds").string() + " --config " + cfg_path.string() + " --out " +
                (dir / "full").string() + " --deterministic") == 0);
    // resume the mid-run checkpoint with the same config/horizon
    REQUIRE(run("train " + (dir / "ds").string() + " --config " + cfg_path.string() + " --out " +
                (dir / "part").string() + " --deterministic --resume " +
                (dir / "full" / "checkpoint_step_3").string()) == 0);

    // the loss rows for steps 3..5 must agree bitwise with the full run
    auto grab_rows = [&](const fs::path& p) {
        std::ifstream in(p);
        REQUIRE(in.good());
        std::vector<std::string> rows;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty() && line[0] >= '3' && line[0] <= '5' && line[1] == ',')
                rows.push_back(line);
        return rows;
    };
    auto full_rows = grab_rows(dir / "full" / "loss.csv");
    auto part_rows = grab_rows(dir / "part" / "loss.csv");
    REQUIRE(full_rows.size() == 3);
    CHECK(full_rows == part_rows);
    CHECK(slurp(dir / "full" / "checkpoint" / "params.bin") ==
          slurp(dir / "part" / "checkpoint" / "params.bin"));
}

TEST_CASE("checkpoint round trip is bit-exact and shape mismatches are named") {
    fs::path dir = sandbox();
    DecoderConfig dcfg = small_config().decoder;
    auto model = make_model(dcfg, 8, 3);
    AdamState adam;
    adam.init(model.store);
    RunConfig rc = small_config();
    save_checkpoint((dir / "ck").string(), model, &adam, &rc);

    auto model2 = make_model(dcfg, 8, 99);  // different init, same shapes
    load_checkpoint((dir / "ck").string(), model2);
    for (std::size_t i = 0; i < model.store.size(); ++i)
        CHECK(model.store[static_cast<int>(i)].value.data ==
              model2.store[static_cast<int>(i)].value.data);
    save_checkpoint((dir / "ck2").string(), model2, nullptr, nullptr);
    save_checkpoint((dir / "ck3").string(), model, nullptr, nullptr);
    CHECK(slurp(dir / "ck2" / "params.bin") == slurp(dir / "ck3" / "params.bin"));

    DecoderConfig other = dcfg;
    other.feature_dim = 16;
    auto model3 = make_model(other, 8, 3);
    CHECK_THROWS_WITH(load_checkpoint((dir / "ck").string(), model3),
                      Catch::Matchers::ContainsSubstring("shape") &&
                          Catch::Matchers::ContainsSubstring("offset.w"));
}

TEST_CASE("eval refuses an empty dataset and writes a schema-complete report") {
    fs::path dir = sandbox();
    fs::path cfg_path = dir / "cfg.json";
    save_run_config(cfg_path.string(), small_config());
    REQUIRE(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "ds").string() +
                " --scenes 2") == 0);
    REQUIRE(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "empty").string() +
                " --scenes 0") == 0);
    REQUIRE(run("train " + (dir / "ds").string() + " --config " + cfg_path.string() + " --out " +
                (dir / "run").string() + " --steps 2") == 0);

    CHECK(run("eval " + (dir / "run" / "checkpoint").string() + " " + (dir / "empty").string()) !=
          0);

    REQUIRE(run("eval " + (dir / "run" / "checkpoint").string() + " " + (dir / "ds").string() +
                " --out " + (dir / "report.json").string()) == 0);
    json rep = read_json_file((dir / "report.json").string());
    for (const char* key : {"mAP", "mATE", "mASE", "mAOE", "mAVE", "composite"})
        CHECK(rep.contains(key));
    CHECK(rep["composite"].get<double>() >= 0.0);
    CHECK(rep["composite"].get<double>() <= 1.0);
}

TEST_CASE("train aborts with a diagnostic on non-finite loss") {
    fs::path dir = sandbox();
    RunConfig cfg = small_config();
    cfg.train.lr = 1e18;  // guaranteed blow-up
    cfg.train.steps = 30;
    fs::path cfg_path = dir / "cfg.json";
    save_run_config(cfg_path.string(), cfg);
    REQUIRE(run("gen-data --config " + cfg_path.string() + " --out " + (dir / "ds").string() +
                " --scenes 2") == 0);
    int rc = run("train " + (dir / "ds").string() + " --config " + cfg_path.string() + " --out " +
                 (dir / "run").string());
    CHECK(rc != 0);
}
