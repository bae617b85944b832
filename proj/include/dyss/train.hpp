#pragma once

#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <thread>
#include <vector>

#include "dyss/checkpoint.hpp"
#include "dyss/config.hpp"
#include "dyss/decoder.hpp"
#include "dyss/metrics.hpp"
#include "dyss/simworld.hpp"

namespace dyss {

inline SceneInputs dataset_scene_inputs(const Dataset& ds, std::size_t i) {
    SceneInputs in;
    in.rig = ds.scenes[i].rig;
    in.ego_poses = ds.scenes[i].ego_poses;
    in.maps = &ds.maps[i];
    in.frame_dt = ds.world.frame_dt;
    in.stride = ds.world.stride;
    return in;
}

inline std::size_t thread_budget(bool deterministic) {
    if (deterministic) return 1;
    if (const char* env = std::getenv("DYSS_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

// Cosine step-size schedule from the configured initial rate down to zero.
inline double cosine_lr(double lr0, std::size_t step, std::size_t total_steps) {
    if (total_steps <= 1) return lr0;
    const double pi = 3.14159265358979323846;
    double t = static_cast<double>(step) / static_cast<double>(total_steps);
    if (t > 1.0) t = 1.0;
    return lr0 * 0.5 * (1.0 + std::cos(pi * t));
}

// Plain Adam (decoupled weight decay omitted, decay 0 at this scale).
inline void adam_step(ParamStore& ps, AdamState& st, const TrainConfig& cfg, double lr) {
    st.step += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Param& p = ps[static_cast<int>(i)];
        Tensor& m = st.m[i];
        Tensor& v = st.v[i];
        for (std::size_t e = 0; e < p.value.numel(); ++e) {
            const double gr = p.grad.data[e];
            m.data[e] = b1 * m.data[e] + (1.0 - b1) * gr;
            v.data[e] = b2 * v.data[e] + (1.0 - b2) * gr * gr;
            const double mh = m.data[e] / bc1;
            const double vh = v.data[e] / bc2;
            p.value.data[e] -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
        }
    }
}

struct StepRecord {
    std::size_t step = 0;
    double cls = 0.0, box = 0.0, rec = 0.0, future = 0.0, total = 0.0;
};

inline std::string loss_csv_header() { return "step,cls,box,l_r,l_f,total"; }

inline std::string to_csv(const StepRecord& r) {
    std::ostringstream os;
    os << r.step << ',' << r.cls << ',' << r.box << ',' << r.rec << ',' << r.future << ','
       << r.total;
    return os.str();
}

struct TrainResult {
    std::vector<StepRecord> history;
    double first_total = 0.0;
    double last_total = 0.0;
};

class NanLossError : public std::runtime_error {
public:
    explicit NanLossError(const std::string& what) : std::runtime_error(what) {}
};

// One optimization step over a batch of scenes. Scenes run on their own
// graphs (optionally in parallel) and gradients merge in scene order, so the
// result is bitwise independent of the thread count.
inline StepRecord train_step(DetectionModel& model, AdamState& adam, const Dataset& ds,
                             const RunConfig& cfg, const QuerySet& qinit, std::size_t step) {
    Rng pick = Rng::derive(cfg.seed, {0x62617463ull, step});
    std::vector<std::size_t> batch;
    for (std::size_t b = 0; b < cfg.train.batch; ++b) batch.push_back(pick.index(ds.scenes.size()));

    struct SceneWork {
        std::unique_ptr<Graph> graph;
        LossBreakdown loss;
        std::string error;
    };
    std::vector<SceneWork> work(batch.size());
    const double inv_batch = 1.0 / static_cast<double>(batch.size());

    auto run_scene = [&](std::size_t b) {
        try {
            auto& w = work[b];
            w.graph = std::make_unique<Graph>();
            SceneInputs in = dataset_scene_inputs(ds, batch[b]);
            ForwardOptions fopt;
            fopt.training = true;
            fopt.mask_seed = mix64(cfg.seed ^ mix64(step * 977 + b));
            auto fr = forward(*w.graph, model, qinit, in, fopt);
            w.loss = total_loss(*w.graph, fr, scene_ground_truth(ds.scenes[batch[b]]), cfg.loss);
            w.graph->backward(scale(w.loss.total, inv_batch));
        } catch (const std::exception& e) {
            work[b].error = e.what();
        }
    };

    const std::size_t threads = std::min(thread_budget(cfg.train.deterministic), batch.size());
    if (threads <= 1) {
        for (std::size_t b = 0; b < batch.size(); ++b) run_scene(b);
    } else {
        std::vector<std::thread> pool;
        std::size_t next = 0;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&, t]() {
                for (std::size_t b = t; b < batch.size(); b += threads) run_scene(b);
            });
        (void)next;
        for (auto& th : pool) th.join();
    }

    StepRecord rec;
    rec.step = step;
    model.store.zero_grads();
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (!work[b].error.empty())
            throw std::runtime_error("train_step " + std::to_string(step) + " scene " +
                                     std::to_string(batch[b]) + ": " + work[b].error);
        work[b].graph->add_param_grads(model.store);
        rec.cls += work[b].loss.sum.cls * inv_batch;
        rec.box += work[b].loss.sum.box * inv_batch;
        rec.rec += work[b].loss.sum.rec * inv_batch;
        rec.future += work[b].loss.sum.future * inv_batch;
        rec.total += work[b].loss.total_value * inv_batch;
    }
    if (!std::isfinite(rec.total)) {
        std::ostringstream os;
        os << "non-finite loss at step " << step << " (cls=" << rec.cls << " box=" << rec.box
           << " l_r=" << rec.rec << " l_f=" << rec.future << "); batch scenes:";
        for (std::size_t s : batch) os << ' ' << s;
        throw NanLossError(os.str());
    }
    adam_step(model.store, adam, cfg.train, cosine_lr(cfg.train.lr, adam.step, cfg.train.steps));
    return rec;
}

// Full loop with CSV history and periodic checkpoints under out_dir (leave
// empty to skip the file outputs).
inline TrainResult train_loop(DetectionModel& model, AdamState& adam, const Dataset& ds,
                              const RunConfig& cfg, const std::string& out_dir,
                              std::size_t start_step = 0) {
    if (ds.scenes.empty()) throw std::invalid_argument("train_loop: dataset is empty");
    namespace fs = std::filesystem;
    std::ofstream csv;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        const bool fresh = start_step == 0;
        csv.open((fs::path(out_dir) / "loss.csv").string(),
                 fresh ? std::ios::trunc : std::ios::app);
        if (fresh) csv << loss_csv_header() << "\n";
    }
    QuerySet qinit = init_queries(model.cfg.queries, model.cfg.feature_dim, cfg.seed,
                                  model.cfg.init, model.cfg.floor_count);
    TrainResult res;
    for (std::size_t step = start_step; step < cfg.train.steps; ++step) {
        StepRecord rec = train_step(model, adam, ds, cfg, qinit, step);
        if (res.history.empty()) res.first_total = rec.total;
        res.last_total = rec.total;
        res.history.push_back(rec);
        if (csv.is_open()) csv << to_csv(rec) << "\n";
        const bool at_checkpoint =
            cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0;
        if (!out_dir.empty() && at_checkpoint && step + 1 != cfg.train.steps)
            save_checkpoint(
                (fs::path(out_dir) / ("checkpoint_step_" + std::to_string(adam.step))).string(),
                model, &adam, &cfg);
        if (!out_dir.empty() && step + 1 == cfg.train.steps)
            save_checkpoint((fs::path(out_dir) / "checkpoint").string(), model, &adam, &cfg);
    }
    return res;
}

// Inference + metrics over a whole dataset.
inline EvalReport evaluate_model(DetectionModel& model, const Dataset& ds, std::uint64_t seed) {
    if (ds.scenes.empty()) throw std::invalid_argument("evaluate_model: dataset is empty");
    QuerySet qinit = init_queries(model.cfg.queries, model.cfg.feature_dim, seed, model.cfg.init,
                                  model.cfg.floor_count);
    std::vector<Detection> dets;
    std::vector<GtBox> gts;
    for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
        SceneInputs in = dataset_scene_inputs(ds, s);
        auto iv = forward_values(model, qinit, in, model.cfg.dynamic);
        for (auto& d : decode_detections(iv.logits, iv.boxes, s)) dets.push_back(d);
        const GroundTruth gt = scene_ground_truth(ds.scenes[s]);
        for (std::size_t o = 0; o < gt.size(); ++o) {
            GtBox g;
            g.class_id = gt.classes[o];
            g.box = box_from_row(gt.boxes, o);
            g.scene = s;
            gts.push_back(g);
        }
    }
    return evaluate_detections(dets, gts, model.cfg.num_classes);
}

}  // namespace dyss
