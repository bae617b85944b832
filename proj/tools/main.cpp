// dyss command-line interface: dataset generation, training, evaluation,
// latency benchmarking, and the numerical verification suite.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dyss/bench.hpp"
#include "dyss/checkpoint.hpp"
#include "dyss/config.hpp"
#include "dyss/train.hpp"
#include "dyss/verify.hpp"

namespace fs = std::filesystem;
using namespace dyss;

namespace {

struct CommonOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool no_aux = false;
    bool no_dynamic = false;
    std::string transform;
    long floor_override = -1;
    bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "run config JSON (defaults used when omitted)");
    cmd->add_option("--seed", o.seed, "run seed")->each([&](const std::string&) {
        o.seed_set = true;
    });
    cmd->add_flag("--no-aux", o.no_aux, "disable the reconstruction/future-prediction losses");
    cmd->add_flag("--no-dynamic", o.no_dynamic, "freeze the query set (no merge/remove/split)");
    cmd->add_option("--transform", o.transform, "SSM transforms: identity|fft|both")
        ->check(CLI::IsMember({"identity", "fft", "both"}));
    cmd->add_option("--floor", o.floor_override, "minimum query count");
    cmd->add_flag("--deterministic", o.deterministic,
                  "single-threaded, bitwise-reproducible execution");
}

RunConfig resolve_config(const CommonOpts& o) {
    RunConfig cfg;
    if (!o.config_path.empty()) cfg = load_run_config(o.config_path);
    if (o.seed_set) cfg.seed = o.seed;
    if (o.no_aux) {
        cfg.loss.lambda_rec = 0.0;
        cfg.loss.lambda_future = 0.0;
    }
    if (o.no_dynamic) cfg.decoder.dynamic = false;
    if (!o.transform.empty()) {
        cfg.decoder.use_identity = o.transform == "identity" || o.transform == "both";
        cfg.decoder.use_fft = o.transform == "fft" || o.transform == "both";
    }
    if (o.floor_override >= 0)
        cfg.decoder.floor_count = static_cast<std::size_t>(o.floor_override);
    if (o.deterministic) cfg.train.deterministic = true;
    cfg.decoder.validate();
    return cfg;
}

int cmd_gen_data(const CommonOpts& common, const std::string& out_dir, std::size_t scenes,
                 bool force) {
    RunConfig cfg = resolve_config(common);
    Dataset ds = gen_dataset(cfg.seed, scenes, cfg.world);
    save_dataset(out_dir, ds, force);
    std::size_t objects = 0, bytes = 0;
    for (const auto& sc : ds.scenes) objects += sc.objects.size();
    for (const auto& e : fs::directory_iterator(out_dir)) bytes += fs::file_size(e.path());
    std::printf("wrote %zu scene(s), %zu object(s), %.1f MB to %s\n", ds.scenes.size(), objects,
                static_cast<double>(bytes) / (1024.0 * 1024.0), out_dir.c_str());
    return 0;
}

int cmd_train(const CommonOpts& common, const std::string& data_dir, const std::string& out_dir,
              long steps, const std::string& resume) {
    RunConfig cfg = resolve_config(common);
    if (steps >= 0) cfg.train.steps = static_cast<std::size_t>(steps);
    Dataset ds = load_dataset(data_dir);
    if (ds.scenes.empty()) throw std::runtime_error("train: dataset has no scenes");

    DetectionModel model = make_model(cfg.decoder, ds.world.channels, cfg.seed);
    AdamState adam;
    adam.init(model.store);
    std::size_t start_step = 0;
    if (!resume.empty()) {
        auto contents = load_checkpoint(resume, model);
        if (contents.has_adam) {
            adam = std::move(contents.adam);
            start_step = adam.step;
        }
        std::printf("resumed from %s at step %zu\n", resume.c_str(), start_step);
    }
    try {
        auto res = train_loop(model, adam, ds, cfg, out_dir, start_step);
        if (!res.history.empty())
            std::printf("trained steps %zu..%zu: total loss %.6f -> %.6f\n", start_step,
                        cfg.train.steps, res.first_total, res.last_total);
        std::printf("checkpoint: %s\n", (fs::path(out_dir) / "checkpoint").string().c_str());
        std::printf("loss curve: %s\n", (fs::path(out_dir) / "loss.csv").string().c_str());
    } catch (const NanLossError& e) {
        std::fprintf(stderr, "training aborted: %s\n", e.what());
        return 3;
    }
    return 0;
}

int cmd_eval(const std::string& checkpoint_dir, const std::string& data_dir,
             const std::string& out_path, const CommonOpts& common) {
    Dataset ds = load_dataset(data_dir);
    if (ds.scenes.empty()) throw std::runtime_error("eval: dataset has no scenes");

    json manifest = read_json_file((fs::path(checkpoint_dir) / "manifest.json").string());
    if (!manifest.contains("config"))
        throw std::runtime_error("eval: checkpoint carries no config echo");
    RunConfig cfg = run_config_from_json(manifest["config"]);
    if (common.no_dynamic) cfg.decoder.dynamic = false;

    DetectionModel model = make_model(cfg.decoder, ds.world.channels, cfg.seed);
    load_checkpoint(checkpoint_dir, model);
    EvalReport rep = evaluate_model(model, ds, cfg.seed);
    json j = report_to_json(rep);
    if (!out_path.empty()) {
        write_json_file(out_path, j);
        std::printf("report: %s\n", out_path.c_str());
    }
    std::printf("%s\n", j.dump(1, ' ').c_str());
    return 0;
}

int cmd_bench(const CommonOpts& common, const std::string& checkpoint_dir,
              const std::string& out_path, std::size_t warmup, std::size_t iters) {
    RunConfig cfg = resolve_config(common);
    DetectionModel model = make_model(cfg.decoder, cfg.world.channels, cfg.seed);
    if (!checkpoint_dir.empty()) {
        json manifest = read_json_file((fs::path(checkpoint_dir) / "manifest.json").string());
        if (manifest.contains("config")) {
            cfg = run_config_from_json(manifest["config"]);
            if (common.no_dynamic) cfg.decoder.dynamic = false;
            model = make_model(cfg.decoder, cfg.world.channels, cfg.seed);
        }
        load_checkpoint(checkpoint_dir, model);
    }
    Dataset ds = gen_dataset(cfg.seed, 1, cfg.world);
    SceneInputs in = dataset_scene_inputs(ds, 0);
    QuerySet qinit = init_queries(cfg.decoder.queries, cfg.decoder.feature_dim, cfg.seed,
                                  cfg.decoder.init, cfg.decoder.floor_count);

    auto stat = bench_forward(model, qinit, in, warmup, iters, /*dynamic=*/false);
    auto dyn = bench_forward(model, qinit, in, warmup, iters, /*dynamic=*/true);

    std::printf("query trajectory (dynamic forward):\n");
    for (const auto& row : dyn.trajectory) std::printf("  %s\n", to_string(row).c_str());
    std::printf("static : %.2f ms over %zu iters (queries stay at %zu)\n", stat.mean_ms, iters,
                cfg.decoder.queries);
    std::printf("dynamic: %.2f ms over %zu iters (queries end at %zu)\n", dyn.mean_ms, iters,
                dyn.final_queries);
    std::printf("speedup: %.2fx (dynamic/static latency ratio %.3f)\n",
                stat.mean_ms / dyn.mean_ms, dyn.mean_ms / stat.mean_ms);

    std::string csv = bench_csv_header() + "\n";
    csv += "static," + std::to_string(iters) + "," + std::to_string(stat.mean_ms) + "," +
           std::to_string(cfg.decoder.queries) + "\n";
    csv += "dynamic," + std::to_string(iters) + "," + std::to_string(dyn.mean_ms) + "," +
           std::to_string(dyn.final_queries) + "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::trunc);
        out << csv;
        std::printf("csv: %s\n", out_path.c_str());
    }
    return 0;
}

int cmd_verify(bool inject_bad_grad) {
    auto rows = run_verification(inject_bad_grad);
    bool all = true;
    std::printf("%-60s %s\n", "check", "result");
    for (const auto& r : rows) {
        std::printf("%-60s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                    r.detail.c_str());
        all = all && r.pass;
    }
    return all ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dyss: state-space temporal detector with dynamic queries on a synthetic "
                 "multi-camera world"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    CommonOpts gen_opts;
    add_common(gen, gen_opts);
    std::string gen_out = "dataset";
    std::size_t gen_scenes = 10;
    bool gen_force = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--scenes", gen_scenes, "number of scenes");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    // train
    auto* train = app.add_subcommand("train", "train on a generated dataset");
    CommonOpts train_opts;
    add_common(train, train_opts);
    std::string train_data, train_out = "run", train_resume;
    long train_steps = -1;
    train->add_option("data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "output directory (checkpoint + loss.csv)");
    train->add_option("--steps", train_steps, "training steps");
    train->add_option("--resume", train_resume, "checkpoint directory to resume from");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    CommonOpts eval_opts;
    add_common(eval, eval_opts);
    std::string eval_ckpt, eval_data, eval_out;
    eval->add_option("checkpoint", eval_ckpt, "checkpoint directory")->required();
    eval->add_option("data", eval_data, "dataset directory")->required();
    eval->add_option("--out", eval_out, "report JSON path");

    // bench
    auto* bench = app.add_subcommand("bench", "forward latency, static vs dynamic queries");
    CommonOpts bench_opts;
    add_common(bench, bench_opts);
    std::string bench_ckpt, bench_out;
    std::size_t bench_warmup = 3, bench_iters = 50;
    bench->add_option("--checkpoint", bench_ckpt, "checkpoint directory (random weights if omitted)");
    bench->add_option("--out", bench_out, "CSV output path");
    bench->add_option("--warmup", bench_warmup, "warmup iterations");
    bench->add_option("--iters", bench_iters, "measured iterations");

    // verify
    auto* verify = app.add_subcommand("verify", "run the numerical verification suite");
    bool inject_bad_grad = false;
    verify->add_flag("--inject-bad-grad", inject_bad_grad,
                     "test fixture: corrupt one gradient and expect a named failure");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_opts, gen_out, gen_scenes, gen_force);
        if (train->parsed())
            return cmd_train(train_opts, train_data, train_out, train_steps, train_resume);
        if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out, eval_opts);
        if (bench->parsed())
            return cmd_bench(bench_opts, bench_ckpt, bench_out, bench_warmup, bench_iters);
        if (verify->parsed()) return cmd_verify(inject_bad_grad);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
