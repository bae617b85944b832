#pragma once

// Self-check suite behind the verify command: every numerical mechanism is
// exercised against an independent oracle (naive scan loop, direct DFT,
// brute-force assignment, central finite differences, counting bounds).

#include <functional>
#include <string>
#include <vector>

#include "dyss/decoder.hpp"
#include "dyss/grad_check.hpp"
#include "dyss/oracles.hpp"
#include "dyss/simworld.hpp"

namespace dyss {

struct CheckRow {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace verify_detail {

inline Tensor rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

inline Val weighted_sum(Graph& g, Val v, std::uint64_t seed) {
    Rng rng(seed);
    Tensor w(v.shape());
    for (auto& x : w.data) x = rng.uniform(-1.0, 1.0);
    return sum(mul(v, g.leaf(std::move(w))));
}

inline std::vector<cplx> dft_direct(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<cplx> out(n);
    const double pi = 3.14159265358979323846;
    for (std::size_t k = 0; k < n; ++k) {
        cplx s(0.0, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            double ang = -2.0 * pi * static_cast<double>(j * k) / static_cast<double>(n);
            s += cplx(x[j] * std::cos(ang), x[j] * std::sin(ang));
        }
        out[k] = s;
    }
    return out;
}

inline CheckRow check_scan_vs_loop() {
    CheckRow row{"ssm scan == naive per-step loop (bitwise)", true, ""};
    for (auto kind : {TransformKind::identity, TransformKind::fft}) {
        ParamStore ps;
        Rng rng(kind == TransformKind::fft ? 11u : 7u);
        SsmBlockIds blk = make_ssm_block(ps, "blk", kind, 6, 5, 8, rng);
        Tensor emb(Shape{5});
        for (auto& v : emb.data) v = rng.gaussian(0.0, 0.1);
        int emb_id = ps.add("emb", emb);
        std::vector<Tensor> frames;
        for (int t = 0; t < 4; ++t) frames.push_back(rand_tensor(Shape{3, 5}, rng));
        ScanOptions opt;
        opt.training = true;
        opt.mask_ratio = 0.4;
        opt.mask_seed = 77;
        Graph g;
        std::vector<Val> leaves;
        for (auto& f : frames) leaves.push_back(g.leaf(f));
        auto res = ssm_scan(g, ps, blk, leaves, g.param(ps, emb_id), opt);
        auto mask = gen_token_mask(4, 3, opt.mask_ratio, opt.mask_seed);
        auto ref = oracle::ssm_scan_reference(ps, blk, frames, ps[emb_id].value, mask);
        for (std::size_t t = 0; t < 4; ++t) {
            if (res.bundle.enhanced[t].value().data != ref.enhanced[t].data) row.pass = false;
            if (t >= 1 && res.bundle.predicted[t].value().data != ref.predicted[t].data)
                row.pass = false;
        }
        if (res.final_state.value().data != ref.final_state.data) row.pass = false;
        if (!row.pass) {
            row.detail = "mismatch in " + to_string(kind) + " block";
            return row;
        }
    }
    return row;
}

inline CheckRow check_fft_roundtrip() {
    CheckRow row{"fft/ifft round-trip < 1e-9 (lengths 1..64)", true, ""};
    double worst = 0.0;
    for (std::size_t n = 1; n <= 64; ++n) {
        Rng rng(n);
        std::vector<cplx> x(n);
        for (auto& v : x) v = cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
        auto back = fft(fft(x, false), true);
        for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(back[i] - x[i]));
    }
    row.pass = worst < 1e-9;
    row.detail = "max err " + std::to_string(worst);
    return row;
}

inline CheckRow check_fft_vs_direct() {
    CheckRow row{"fft vs direct DFT oracle (lengths 7, 11, 16)", true, ""};
    double worst = 0.0;
    for (std::size_t n : {7u, 11u, 16u}) {
        Rng rng(n * 3 + 1);
        std::vector<double> x(n);
        for (auto& v : x) v = rng.uniform(-1, 1);
        auto fast = fft_real(x);
        auto slow = dft_direct(x);
        for (std::size_t k = 0; k < n; ++k) worst = std::max(worst, std::abs(fast[k] - slow[k]));
    }
    row.pass = worst < 1e-9;
    row.detail = "max err " + std::to_string(worst);
    return row;
}

inline CheckRow check_hungarian() {
    CheckRow row{"hungarian == brute force (n <= 7, 100 seeds)", true, ""};
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        Rng rng(seed);
        std::size_t np = 1 + rng.index(7), ng = 1 + rng.index(7);
        Tensor cost = rand_tensor(Shape{np, ng}, rng, 0.0, 10.0);
        auto fast = hungarian(cost);
        auto brute = oracle::assignment_bruteforce(cost);
        double fast_cost = 0.0;
        for (auto& [p, g] : fast.pairs) fast_cost += cost.at(p, g);
        if (std::fabs(fast_cost - brute.cost) > 1e-10 ||
            fast.pairs.size() != std::min(np, ng)) {
            row.pass = false;
            row.detail = "seed " + std::to_string(seed);
            return row;
        }
    }
    return row;
}

inline CheckRow check_op_gradients(bool inject_bad_grad) {
    CheckRow row{"op-level grad checks <= 1e-4 (vs central differences)", true, ""};
    double worst = 0.0;
    std::string worst_name = "-";
    auto run = [&](const std::string& name, const ScalarFn& f,
                   const std::vector<Tensor>& inputs) {
        auto rep = grad_check(f, inputs);
        if (!rep.analytic_finite) {
            row.pass = false;
            row.detail = name + ": " + rep.describe();
        }
        if (rep.max_rel_err > worst) {
            worst = rep.max_rel_err;
            worst_name = name;
        }
    };
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        Tensor a = rand_tensor(Shape{3, 4}, rng), b = rand_tensor(Shape{4, 3}, rng);
        run("matmul",
            [seed](Graph& g, const std::vector<Val>& in) {
                return weighted_sum(g, matmul(in[0], in[1]), seed);
            },
            {a, b});
        Tensor x = rand_tensor(Shape{3, 5}, rng);
        Tensor gn = rand_tensor(Shape{5}, rng, 0.5, 1.5);
        Tensor bs = rand_tensor(Shape{5}, rng);
        run("layer_norm",
            [seed](Graph& g, const std::vector<Val>& in) {
                return weighted_sum(g, layer_norm_rows(in[0], in[1], in[2]), seed);
            },
            {x, gn, bs});
        run("softmax",
            [seed](Graph& g, const std::vector<Val>& in) {
                return weighted_sum(g, softmax_rows(in[0]), seed);
            },
            {x});
        run("dft",
            [seed](Graph& g, const std::vector<Val>& in) {
                return weighted_sum(g, dft_rows(in[0]), seed);
            },
            {rand_tensor(Shape{2, 6}, rng)});
        run("idft",
            [seed](Graph& g, const std::vector<Val>& in) {
                return weighted_sum(g, idft_rows(in[0]), seed);
            },
            {rand_tensor(Shape{2, 10}, rng)});
        Tensor boxes(Shape{2, 9});
        for (std::size_t i = 0; i < 2; ++i) {
            boxes.at(i, kBoxX) = rng.uniform(-2, 2);
            boxes.at(i, kBoxY) = rng.uniform(-2, 2);
            boxes.at(i, kBoxW) = rng.uniform(1, 3);
            boxes.at(i, kBoxL) = rng.uniform(1, 3);
            boxes.at(i, kBoxH) = rng.uniform(1, 3);
            boxes.at(i, kBoxTheta) = rng.uniform(-1.5, 1.5);
            boxes.at(i, kBoxVx) = rng.uniform(-2, 2);
            boxes.at(i, kBoxVy) = rng.uniform(-2, 2);
        }
        run("sample_points",
            [seed](Graph& g, const std::vector<Val>& in) {
                return weighted_sum(g, sample_points(in[0], in[1], 3, 0.5), seed);
            },
            {boxes, rand_tensor(Shape{2, 9}, rng, -0.5, 0.5)});
        Tensor map = rand_tensor(Shape{2, 5, 6}, rng);
        Tensor pix(Shape{3, 2});
        for (std::size_t i = 0; i < 3; ++i) {
            pix.at(i, 0) = rng.uniform(0.3, 4.4);
            pix.at(i, 1) = rng.uniform(0.3, 3.4);
        }
        run("bilinear",
            [seed](Graph& g, const std::vector<Val>& in) {
                return weighted_sum(g, bilinear_rows(in[0], in[1], {true, true, true}), seed);
            },
            {map, pix});
    }
    if (inject_bad_grad) {
        // test fixture: a deliberately wrong backward must be caught
        auto broken_scale = [](Val v) {
            Graph& g = *v.g;
            const Tensor& xv = g.value(v.id);
            Tensor out(xv.shape);
            for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = 2.0 * xv.data[i];
            const int xid = v.id;
            int id = g.add_node(std::move(out), [xid](Graph& gr, int self) {
                const Tensor& go = gr.grad(self);
                Tensor& gx = gr.grad(xid);
                for (std::size_t i = 0; i < go.numel(); ++i)
                    gx.data[i] += 3.0 * go.data[i];  // should be 2.0
            });
            return Val{&g, id};
        };
        Rng rng(1234);
        run("injected-bad-grad",
            [&](Graph& g, const std::vector<Val>& in) {
                return weighted_sum(g, broken_scale(in[0]), 5);
            },
            {rand_tensor(Shape{2, 3}, rng)});
    }
    if (worst > 1e-4) row.pass = false;
    if (row.detail.empty())
        row.detail = "worst rel err " + std::to_string(worst) + " (" + worst_name + ")";
    return row;
}

struct ToyWorldFixture {
    DecoderConfig cfg;
    DetectionModel model;
    Scene scene;
    std::vector<std::vector<Tensor>> maps;
    SceneInputs inputs;
    GroundTruth gt;
    QuerySet qinit;

    ToyWorldFixture() : cfg(), model() {
        cfg.layers = 2;
        cfg.queries = 3;
        cfg.floor_count = 2;
        cfg.feature_dim = 4;
        cfg.points = 2;
        cfg.state_dim = 3;
        cfg.num_classes = 2;
        WorldConfig w;
        w.cameras = 1;
        w.image_w = 64;
        w.image_h = 48;
        w.channels = 4;
        w.frames = 2;
        w.bounds = 8.0;
        w.classes = 2;
        w.noise_sigma = 0.02;
        model = make_model(cfg, w.channels, 47);
        Rng brng(99);
        for (int pid : {model.mix.ln_c_bias, model.mix.ln_p_bias})
            for (auto& v : model.store[pid].value.data) v = brng.gaussian(0.0, 0.3);
        scene = gen_scene(11, 2, w);
        for (auto& o : scene.objects) {
            o.box.x = std::fabs(o.box.x) + 5.0;
            o.box.y *= 0.2;
            o.box.vx *= 0.2;
            o.box.vy *= 0.2;
        }
        maps = render_all(scene, w);
        inputs.rig = scene.rig;
        inputs.ego_poses = scene.ego_poses;
        inputs.maps = &maps;
        inputs.frame_dt = w.frame_dt;
        inputs.stride = w.stride;
        gt = scene_ground_truth(scene);
        qinit = init_queries(cfg.queries, cfg.feature_dim, 53, cfg.init, cfg.floor_count);
    }
};

inline CheckRow check_end_to_end_grad() {
    CheckRow row{"end-to-end toy decoder loss grad <= 1e-3", false, ""};
    ToyWorldFixture fx;
    LossConfig lcfg;
    std::vector<UpdatePlan> plans;
    MatchReplay matches;
    {
        Graph g;
        ForwardOptions opt;
        opt.training = true;
        opt.mask_seed = 3;
        auto fr = forward(g, fx.model, fx.qinit, fx.inputs, opt);
        for (auto& l : fr.layers) plans.push_back(l.plan);
        total_loss(g, fr, fx.gt, lcfg, nullptr, &matches);
    }
    auto loss_fn = [&](Graph& g) {
        ForwardOptions opt;
        opt.training = true;
        opt.mask_seed = 3;
        opt.replay = &plans;
        auto fr = forward(g, fx.model, fx.qinit, fx.inputs, opt);
        return total_loss(g, fr, fx.gt, lcfg, &matches).total;
    };
    std::vector<int> pids;
    for (std::size_t i = 0; i < fx.model.store.size(); ++i) pids.push_back(static_cast<int>(i));
    auto rep = grad_check_params(loss_fn, fx.model.store, pids);
    row.pass = rep.pass(1e-3);
    row.detail = rep.describe();
    return row;
}

inline CheckRow check_update_bounds() {
    CheckRow row{"dynamic update bounds (remove 20-30%, split <= 5%, floor)", true, ""};
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        ParamStore ps;
        Rng rng(seed);
        QueryHeadIds hd = make_query_heads(ps, "upd", 8, 4, rng);
        const std::size_t n = 60 + rng.index(140);
        Tensor boxes(Shape{n, 9});
        Tensor feats(Shape{n, 8});
        for (auto& v : boxes.data) v = rng.gaussian(0.0, 1.0);
        for (auto& v : feats.data) v = rng.gaussian(0.0, 1.0);
        Tensor s(Shape{16, 8});
        for (auto& v : s.data) v = rng.gaussian(0.0, 1.0);
        Graph g;
        g.grad_enabled = false;
        auto res = update_queries(g, ps, hd, g.leaf(boxes), g.leaf(feats), g.leaf(s), 10, 0);
        const double postmerge = static_cast<double>(res.log.n_in - res.log.merged);
        const double rem_frac = static_cast<double>(res.log.removed) / postmerge;
        const double split_frac = static_cast<double>(res.log.split) /
                                  (postmerge - static_cast<double>(res.log.removed));
        if (res.log.n_out < 10 || rem_frac < 0.2 - 1e-12 || rem_frac > 0.3 + 1e-12 ||
            split_frac > 0.05 + 1e-12) {
            row.pass = false;
            row.detail = "seed " + std::to_string(seed) + ": " + to_string(res.log);
            return row;
        }
    }
    return row;
}

}  // namespace verify_detail

inline std::vector<CheckRow> run_verification(bool inject_bad_grad = false) {
    using namespace verify_detail;
    std::vector<CheckRow> rows;
    rows.push_back(check_scan_vs_loop());
    rows.push_back(check_fft_roundtrip());
    rows.push_back(check_fft_vs_direct());
    rows.push_back(check_hungarian());
    rows.push_back(check_op_gradients(inject_bad_grad));
    rows.push_back(check_end_to_end_grad());
    rows.push_back(check_update_bounds());
    return rows;
}

}  // namespace dyss
