#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyss/camera.hpp"
#include "dyss/losses.hpp"
#include "dyss/mixing.hpp"
#include "dyss/queries.hpp"
#include "dyss/sampling.hpp"
#include "dyss/ssm.hpp"

namespace dyss {

enum class MixSource { state, enhanced };

struct DecoderConfig {
    std::size_t layers = 6;
    std::size_t queries = 900;
    std::size_t floor_count = 269;
    std::size_t feature_dim = 32;  // D
    std::size_t points = 4;        // P
    std::size_t state_dim = 128;   // N
    std::size_t attn_heads = 4;
    std::size_t num_classes = 4;
    bool use_identity = true;
    bool use_fft = true;
    bool dynamic = true;
    double mask_ratio = 0.5;
    bool mask_every_layer = true;
    MixSource mix_source = MixSource::state;
    QueryInitConfig init;

    void validate() const {
        if (layers < 1) throw std::invalid_argument("DecoderConfig: layers must be >= 1");
        if (!use_identity && !use_fft)
            throw std::invalid_argument("DecoderConfig: at least one transform must be enabled");
        if (floor_count < 1 || floor_count > queries)
            throw std::invalid_argument("DecoderConfig: floor must be in [1, queries]");
    }
};

// One shared-weight decoder layer's parameters; the layer count never
// changes the parameter count.
struct DetectionModel {
    DecoderConfig cfg;
    std::size_t channels = 0;  // sampled feature channels C (= D_tok)
    ParamStore store;

    int offset_w = -1, offset_b = -1;
    int mask_embed = -1;
    std::vector<SsmBlockIds> blocks;
    int enh_proj_w = -1, enh_proj_b = -1;  // C -> D, used when mix_source == enhanced
    MixIds mix;
    QueryHeadIds heads;
    int cls_w1 = -1, cls_b1 = -1, cls_w2 = -1, cls_b2 = -1;
    int box_w1 = -1, box_b1 = -1, box_w2 = -1, box_b2 = -1;
};

inline DetectionModel make_model(const DecoderConfig& cfg, std::size_t channels,
                                 std::uint64_t seed) {
    cfg.validate();
    DetectionModel m;
    m.cfg = cfg;
    m.channels = channels;
    Rng rng = Rng::derive(seed, {0x6d6f64656cull});
    auto gauss = [&](Shape s, double sigma) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.gaussian(0.0, sigma);
        return t;
    };
    const std::size_t d = cfg.feature_dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));

    m.offset_w = m.store.add("offset.w", gauss(Shape{d, 3 * cfg.points}, 0.5 * sd));
    m.offset_b = m.store.add("offset.b", Tensor(Shape{3 * cfg.points}));
    m.mask_embed = m.store.add("ssm.mask_embed", gauss(Shape{channels}, 0.02));

    if (cfg.use_identity)
        m.blocks.push_back(make_ssm_block(m.store, "ssm.identity", TransformKind::identity,
                                          cfg.state_dim, channels, d, rng));
    if (cfg.use_fft)
        m.blocks.push_back(make_ssm_block(m.store, "ssm.fft", TransformKind::fft, cfg.state_dim,
                                          channels, d, rng));

    m.enh_proj_w = m.store.add("mix.enh_proj_w",
                               gauss(Shape{channels, d},
                                     1.0 / std::sqrt(static_cast<double>(channels))));
    m.enh_proj_b = m.store.add("mix.enh_proj_b", Tensor(Shape{d}));
    m.mix = make_mixing(m.store, "mix", d, cfg.points, rng);
    m.heads = make_query_heads(m.store, "update", d, cfg.attn_heads, rng);

    m.cls_w1 = m.store.add("head.cls_w1", gauss(Shape{d, d}, sd));
    m.cls_b1 = m.store.add("head.cls_b1", Tensor(Shape{d}));
    m.cls_w2 = m.store.add("head.cls_w2", gauss(Shape{d, cfg.num_classes}, sd));
    // negative prior keeps early background logits low, the usual focal init
    m.cls_b2 = m.store.add("head.cls_b2", Tensor(Shape{cfg.num_classes}, -2.0));
    m.box_w1 = m.store.add("head.box_w1", gauss(Shape{d, d}, sd));
    m.box_b1 = m.store.add("head.box_b1", Tensor(Shape{d}));
    // zero-init delta head: layer 1 predictions start at the pillar priors
    m.box_w2 = m.store.add("head.box_w2", Tensor(Shape{d, kBoxCols}));
    m.box_b2 = m.store.add("head.box_b2", Tensor(Shape{kBoxCols}));
    return m;
}

struct SceneInputs {
    std::vector<CameraModel> rig;
    std::vector<Mat4> ego_poses;                   // per frame, world<-ego
    const std::vector<std::vector<Tensor>>* maps;  // [frame][camera], C x H' x W'
    double frame_dt = 0.5;
    double stride = 8.0;
};

struct ForwardOptions {
    bool training = false;
    std::uint64_t mask_seed = 0;
    bool dynamic = true;
    const std::vector<UpdatePlan>* replay = nullptr;  // frozen per-layer selections
};

struct LayerOutput {
    Val logits;  // [Nq x K]
    Val boxes;   // [Nq x 9]
    std::vector<FeatureBundle> bundles;  // one per SSM block
    LayerLogRow log;
    UpdatePlan plan;
};

struct ForwardResult {
    std::vector<LayerOutput> layers;
    Val final_boxes;    // after the last update
    Val final_features;
    std::vector<LayerLogRow> trajectory;

    std::size_t final_query_count() const { return final_features.rows(); }
};

namespace detail {

inline std::uint64_t mask_seed_for(std::uint64_t base, std::size_t layer, std::size_t block) {
    return mix64(mix64(base ^ 0x6d61736b5353ull) + layer * 131 + block);
}

}  // namespace detail

// One decoder layer: sampling -> per-block SSM scan -> adaptive mixing ->
// prediction heads -> dynamic query update. Weights are shared across calls.
inline LayerOutput decoder_layer(Graph& g, DetectionModel& m, Val& boxes, Val& features,
                                 const std::vector<std::vector<Val>>& map_leaves,
                                 const SceneInputs& in, const ForwardOptions& opt, int layer) {
    LayerOutput out;
    ParamStore& ps = m.store;

    Val offsets = linear(features, g.param(ps, m.offset_w), g.param(ps, m.offset_b));
    SamplingConfig scfg;
    scfg.points = m.cfg.points;
    scfg.frame_dt = in.frame_dt;
    scfg.stride = in.stride;
    auto sampled = sample_all(g, boxes, offsets, in.rig, map_leaves, in.ego_poses, scfg);

    const bool mask_here = opt.training && (m.cfg.mask_every_layer || layer == 0);
    Val state_tok;
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        ScanOptions sopt;
        sopt.training = mask_here;
        sopt.mask_ratio = m.cfg.mask_ratio;
        sopt.mask_seed = detail::mask_seed_for(opt.mask_seed, static_cast<std::size_t>(layer), b);
        auto scan = ssm_scan(g, ps, m.blocks[b], sampled.features, g.param(ps, m.mask_embed),
                             sopt);
        Val tok;
        if (m.cfg.mix_source == MixSource::state) {
            tok = linear(scan.final_state, g.param(ps, m.blocks[b].state_w),
                         g.param(ps, m.blocks[b].state_b));
        } else {
            tok = linear(scan.bundle.enhanced.back(), g.param(ps, m.enh_proj_w),
                         g.param(ps, m.enh_proj_b));
        }
        state_tok = state_tok.valid() ? add(state_tok, tok) : tok;
        out.bundles.push_back(std::move(scan.bundle));
    }

    Val mixed = mix_residual(g, ps, m.mix, features, state_tok);

    Val cls_h = relu(linear(mixed, g.param(ps, m.cls_w1), g.param(ps, m.cls_b1)));
    out.logits = linear(cls_h, g.param(ps, m.cls_w2), g.param(ps, m.cls_b2));
    Val box_h = relu(linear(mixed, g.param(ps, m.box_w1), g.param(ps, m.box_b1)));
    // the head regresses in a normalized space; fixed per-column scales map
    // it back to meters / radians / m/s
    Val deltas = mul_rowvec(linear(box_h, g.param(ps, m.box_w2), g.param(ps, m.box_b2)),
                            g.leaf(Tensor(Shape{kBoxCols}, {10.0, 10.0, 2.0, 2.0, 2.0, 2.0, 1.0,
                                                            5.0, 5.0})));
    out.boxes = wrap_col(add(boxes, deltas), kBoxTheta);

    UpdateOptions uopt;
    uopt.dynamic = opt.dynamic && m.cfg.dynamic;
    if (opt.replay) uopt.replay = &(*opt.replay)[static_cast<std::size_t>(layer)];
    auto upd = update_queries(g, ps, m.heads, out.boxes, mixed, state_tok, m.cfg.floor_count,
                              layer, uopt);
    boxes = upd.boxes;
    features = upd.features;
    out.log = upd.log;
    out.plan = std::move(upd.plan);
    return out;
}

inline ForwardResult forward(Graph& g, DetectionModel& m, const QuerySet& init,
                             const SceneInputs& in, const ForwardOptions& opt = {}) {
    if (in.maps == nullptr || in.maps->empty())
        throw std::invalid_argument("forward: no feature maps");
    std::vector<std::vector<Val>> map_leaves(in.maps->size());
    for (std::size_t t = 0; t < in.maps->size(); ++t)
        for (const Tensor& map : (*in.maps)[t]) map_leaves[t].push_back(g.leaf(map));

    ForwardResult fr;
    Val boxes = g.leaf(init.boxes);
    Val features = g.leaf(init.features);
    for (std::size_t layer = 0; layer < m.cfg.layers; ++layer) {
        fr.layers.push_back(decoder_layer(g, m, boxes, features, map_leaves, in, opt,
                                          static_cast<int>(layer)));
        fr.trajectory.push_back(fr.layers.back().log);
    }
    fr.final_boxes = boxes;
    fr.final_features = features;
    return fr;
}

// Forward with per-layer throwaway graphs and no gradient buffers; used by
// evaluation, the bench harness, and the count-trajectory checks.
struct InferenceResult {
    Tensor logits;  // last layer predictions
    Tensor boxes;
    std::vector<LayerLogRow> trajectory;
    std::size_t final_query_count = 0;
};

inline InferenceResult forward_values(DetectionModel& m, const QuerySet& init,
                                      const SceneInputs& in, bool dynamic = true) {
    if (in.maps == nullptr || in.maps->empty())
        throw std::invalid_argument("forward_values: no feature maps");
    InferenceResult res;
    Tensor boxes = init.boxes;
    Tensor features = init.features;
    for (std::size_t layer = 0; layer < m.cfg.layers; ++layer) {
        Graph g;
        g.grad_enabled = false;
        std::vector<std::vector<Val>> map_leaves(in.maps->size());
        for (std::size_t t = 0; t < in.maps->size(); ++t)
            for (const Tensor& map : (*in.maps)[t]) map_leaves[t].push_back(g.leaf(map));
        Val b = g.leaf(std::move(boxes));
        Val f = g.leaf(std::move(features));
        ForwardOptions opt;
        opt.dynamic = dynamic;
        LayerOutput out = decoder_layer(g, m, b, f, map_leaves, in, opt, static_cast<int>(layer));
        res.trajectory.push_back(out.log);
        boxes = b.value();
        features = f.value();
        if (layer + 1 == m.cfg.layers) {
            res.logits = out.logits.value();
            res.boxes = out.boxes.value();
        }
    }
    res.final_query_count = features.dim(0);
    return res;
}

// ---- training objective ----

struct LossBreakdown {
    Val total;
    struct Components {
        double cls = 0.0, box = 0.0, rec = 0.0, future = 0.0;
    };
    Components sum;
    std::vector<Components> per_layer;
    double total_value = 0.0;
};

// Frozen per-layer assignments for finite-difference checks.
struct MatchReplay {
    std::vector<MatchResult> layers;
};

// Deep supervision: every layer's predictions are matched and supervised;
// aux losses averaged over the SSM blocks of each layer.
inline LossBreakdown total_loss(Graph& g, const ForwardResult& fr, const GroundTruth& gt,
                                const LossConfig& cfg, const MatchReplay* replay = nullptr,
                                MatchReplay* record = nullptr) {
    LossBreakdown out;
    Val total;
    std::size_t layer_idx = 0;
    for (const LayerOutput& layer : fr.layers) {
        LossBreakdown::Components comp;
        const MatchResult* preset =
            replay != nullptr ? &replay->layers.at(layer_idx) : nullptr;
        auto det = detection_loss(g, layer.logits, layer.boxes, gt, cfg, preset);
        if (record != nullptr) record->layers.push_back(det.match);
        ++layer_idx;
        comp.cls = det.cls.value().item();
        comp.box = det.box.value().item();
        Val layer_total = add(det.cls, scale(det.box, cfg.lambda_box));
        if (!layer.bundles.empty()) {
            Val rec, fut;
            for (const FeatureBundle& bundle : layer.bundles) {
                auto aux = aux_losses(g, bundle);
                rec = rec.valid() ? add(rec, aux.reconstruction) : aux.reconstruction;
                fut = fut.valid() ? add(fut, aux.future) : aux.future;
            }
            const double inv_blocks = 1.0 / static_cast<double>(layer.bundles.size());
            rec = scale(rec, inv_blocks);
            fut = scale(fut, inv_blocks);
            comp.rec = rec.value().item();
            comp.future = fut.value().item();
            if (cfg.lambda_rec != 0.0)
                layer_total = add(layer_total, scale(rec, cfg.lambda_rec));
            if (cfg.lambda_future != 0.0)
                layer_total = add(layer_total, scale(fut, cfg.lambda_future));
        }
        out.per_layer.push_back(comp);
        out.sum.cls += comp.cls;
        out.sum.box += comp.box;
        out.sum.rec += comp.rec;
        out.sum.future += comp.future;
        total = total.valid() ? add(total, layer_total) : layer_total;
    }
    out.total = total;
    out.total_value = total.value().item();
    return out;
}

}  // namespace dyss
