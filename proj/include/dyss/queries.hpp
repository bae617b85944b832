#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dyss/autodiff.hpp"
#include "dyss/rng.hpp"

namespace dyss {

// Column layout of a query/box row, used everywhere boxes are tensors.
enum BoxCol : std::size_t {
    kBoxX = 0,
    kBoxY = 1,
    kBoxZ = 2,
    kBoxW = 3,
    kBoxL = 4,
    kBoxH = 5,
    kBoxTheta = 6,
    kBoxVx = 7,
    kBoxVy = 8,
    kBoxCols = 9
};

struct QueryBox {
    double x = 0, y = 0, z = 0;
    double w = 0, l = 0, h = 0;
    double theta = 0;
    double vx = 0, vy = 0;
};

inline QueryBox box_from_row(const Tensor& m, std::size_t r) {
    return QueryBox{m.at(r, kBoxX), m.at(r, kBoxY),  m.at(r, kBoxZ),
                    m.at(r, kBoxW), m.at(r, kBoxL),  m.at(r, kBoxH),
                    m.at(r, kBoxTheta), m.at(r, kBoxVx), m.at(r, kBoxVy)};
}

struct QueryInitConfig {
    double xy_sigma = 20.0;
    double size_mean = 2.0;
    double size_sigma = 0.5;
    double size_min = 0.2;  // positivity clamp for w, l
    double theta_sigma = 1.0;
    double pillar_height = 4.0;
    double feature_sigma = 0.02;
};

// The live query set as plain values. Inside a forward pass boxes/features
// travel as graph Vals; this is the at-rest form.
struct QuerySet {
    Tensor boxes;     // [N x 9]
    Tensor features;  // [N x D]
    std::size_t floor_count = 1;
    int layer = 0;

    std::size_t size() const { return boxes.dim(0); }
};

// Pillars in the BEV plane: z = 0, fixed height, zero initial velocity,
// everything else Gaussian. Pure in the seed.
inline QuerySet init_queries(std::size_t n, std::size_t feat_dim, std::uint64_t seed,
                             const QueryInitConfig& cfg, std::size_t floor_count) {
    if (n < 1) throw std::invalid_argument("init_queries: need at least one query");
    QuerySet qs;
    qs.boxes = Tensor(Shape{n, kBoxCols});
    qs.features = Tensor(Shape{n, feat_dim});
    qs.floor_count = floor_count;
    Rng rng = Rng::derive(seed, {0x71756572ull});
    for (std::size_t i = 0; i < n; ++i) {
        qs.boxes.at(i, kBoxX) = rng.gaussian(0.0, cfg.xy_sigma);
        qs.boxes.at(i, kBoxY) = rng.gaussian(0.0, cfg.xy_sigma);
        qs.boxes.at(i, kBoxZ) = 0.0;
        qs.boxes.at(i, kBoxW) = std::max(cfg.size_min, rng.gaussian(cfg.size_mean, cfg.size_sigma));
        qs.boxes.at(i, kBoxL) = std::max(cfg.size_min, rng.gaussian(cfg.size_mean, cfg.size_sigma));
        qs.boxes.at(i, kBoxH) = cfg.pillar_height;
        qs.boxes.at(i, kBoxTheta) = wrap_angle(rng.gaussian(0.0, cfg.theta_sigma));
        qs.boxes.at(i, kBoxVx) = 0.0;
        qs.boxes.at(i, kBoxVy) = 0.0;
    }
    for (auto& v : qs.features.data) v = rng.gaussian(0.0, cfg.feature_sigma);
    return qs;
}

// C_q = centered . centered^T / (D-1), rows centered by their own mean.
inline Val covariance(Val features) {
    const std::size_t n = features.rows();
    if (n < 2) throw std::invalid_argument("covariance: need at least 2 queries, have " +
                                           std::to_string(n));
    const std::size_t d = features.cols();
    Val centered = sub_colvec(features, row_mean(features));
    return scale(matmul(centered, transpose(centered)),
                 1.0 / static_cast<double>(d > 1 ? d - 1 : 1));
}

struct QueryHeadIds {
    std::size_t attn_heads = 4;
    int attn_wq = -1, attn_bq = -1;
    int attn_wk = -1, attn_bk = -1;
    int attn_wv = -1, attn_bv = -1;
    int attn_wo = -1, attn_bo = -1;
    int merge_w = -1, merge_b = -1;             // [(D+2) x 1]
    int remove_w1 = -1, remove_b1 = -1;         // [D x D]
    int remove_w2 = -1, remove_b2 = -1;         // [D x 1]
    int split_w1 = -1, split_b1 = -1;
    int split_w2 = -1, split_b2 = -1;
    int remove_ratio_w = -1, remove_ratio_b = -1;  // [2 x 1], zero-init
    int split_ratio_w = -1, split_ratio_b = -1;    // [2 x 1], zero-init
};

inline QueryHeadIds make_query_heads(ParamStore& ps, const std::string& prefix, std::size_t d,
                                     std::size_t attn_heads, Rng& rng) {
    if (d % attn_heads != 0)
        throw std::invalid_argument("query heads: feature dim must divide into attention heads");
    QueryHeadIds h;
    h.attn_heads = attn_heads;
    auto gauss = [&](Shape s, double sigma) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.gaussian(0.0, sigma);
        return t;
    };
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    h.attn_wq = ps.add(prefix + ".attn_wq", gauss(Shape{d, d}, sd));
    h.attn_bq = ps.add(prefix + ".attn_bq", Tensor(Shape{d}));
    h.attn_wk = ps.add(prefix + ".attn_wk", gauss(Shape{d, d}, sd));
    h.attn_bk = ps.add(prefix + ".attn_bk", Tensor(Shape{d}));
    h.attn_wv = ps.add(prefix + ".attn_wv", gauss(Shape{d, d}, sd));
    h.attn_bv = ps.add(prefix + ".attn_bv", Tensor(Shape{d}));
    h.attn_wo = ps.add(prefix + ".attn_wo", gauss(Shape{d, d}, sd));
    h.attn_bo = ps.add(prefix + ".attn_bo", Tensor(Shape{d}));
    h.merge_w = ps.add(prefix + ".merge_w", gauss(Shape{d + 2, 1}, sd));
    h.merge_b = ps.add(prefix + ".merge_b", Tensor(Shape{1}));
    h.remove_w1 = ps.add(prefix + ".remove_w1", gauss(Shape{d, d}, sd));
    h.remove_b1 = ps.add(prefix + ".remove_b1", Tensor(Shape{d}));
    h.remove_w2 = ps.add(prefix + ".remove_w2", gauss(Shape{d, 1}, sd));
    h.remove_b2 = ps.add(prefix + ".remove_b2", Tensor(Shape{1}));
    h.split_w1 = ps.add(prefix + ".split_w1", gauss(Shape{d, d}, sd));
    h.split_b1 = ps.add(prefix + ".split_b1", Tensor(Shape{d}));
    h.split_w2 = ps.add(prefix + ".split_w2", gauss(Shape{d, 1}, sd));
    h.split_b2 = ps.add(prefix + ".split_b2", Tensor(Shape{1}));
    // Zero init: the ratios only act through hard counts (no gradient), so
    // they stay at r=0.25 / p=2.5, which pins the default count trajectory.
    h.remove_ratio_w = ps.add(prefix + ".remove_ratio_w", Tensor(Shape{2, 1}));
    h.remove_ratio_b = ps.add(prefix + ".remove_ratio_b", Tensor(Shape{1}));
    h.split_ratio_w = ps.add(prefix + ".split_ratio_w", Tensor(Shape{2, 1}));
    h.split_ratio_b = ps.add(prefix + ".split_ratio_b", Tensor(Shape{1}));
    return h;
}

// Scaled dot-product cross-attention: queries from the query features,
// keys/values from the state features; residual added.
inline Val cross_attend(Graph& g, ParamStore& ps, const QueryHeadIds& hd, Val features,
                        Val state_tok) {
    const std::size_t d = features.cols();
    if (state_tok.cols() != d)
        throw std::invalid_argument("cross_attend: state feature dim " +
                                    std::to_string(state_tok.cols()) + " != query dim " +
                                    std::to_string(d));
    Val q = linear(features, g.param(ps, hd.attn_wq), g.param(ps, hd.attn_bq));
    Val k = linear(state_tok, g.param(ps, hd.attn_wk), g.param(ps, hd.attn_bk));
    Val v = linear(state_tok, g.param(ps, hd.attn_wv), g.param(ps, hd.attn_bv));
    const std::size_t dh = d / hd.attn_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Val out;
    for (std::size_t h = 0; h < hd.attn_heads; ++h) {
        Val qh = slice_cols(q, h * dh, dh);
        Val kh = slice_cols(k, h * dh, dh);
        Val vh = slice_cols(v, h * dh, dh);
        Val attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
        Val oh = matmul(attn, vh);
        out = out.valid() ? concat_cols(out, oh) : oh;
    }
    return add(features, linear(out, g.param(ps, hd.attn_wo), g.param(ps, hd.attn_bo)));
}

// Per-query label heads -------------------------------------------------

inline Val covariance_row_stats(Val cov) {
    const std::size_t n = cov.rows();
    Val rm = reshape(row_mean(cov), Shape{n, 1});
    Val rx = reshape(row_max(cov), Shape{n, 1});
    return concat_cols(rm, rx);
}

inline Val merge_labels(Graph& g, ParamStore& ps, const QueryHeadIds& hd, Val features, Val cov) {
    Val in = concat_cols(features, covariance_row_stats(cov));
    return sigmoid(linear(in, g.param(ps, hd.merge_w), g.param(ps, hd.merge_b)));  // [N x 1]
}

inline Val remove_labels(Graph& g, ParamStore& ps, const QueryHeadIds& hd, Val features) {
    Val hdn = relu(linear(features, g.param(ps, hd.remove_w1), g.param(ps, hd.remove_b1)));
    return sigmoid(linear(hdn, g.param(ps, hd.remove_w2), g.param(ps, hd.remove_b2)));
}

inline Val split_labels(Graph& g, ParamStore& ps, const QueryHeadIds& hd, Val features) {
    Val hdn = relu(linear(features, g.param(ps, hd.split_w1), g.param(ps, hd.split_b1)));
    return sigmoid(linear(hdn, g.param(ps, hd.split_w2), g.param(ps, hd.split_b2)));
}

// Fixed-size pooled covariance input for the ratio heads: mean of per-row
// means and mean of per-row maxima.
inline Val pooled_cov_stats(Val cov) {
    Val pm = reshape(mean(row_mean(cov)), Shape{1, 1});
    Val px = reshape(mean(row_max(cov)), Shape{1, 1});
    return concat_cols(pm, px);
}

inline double remove_ratio(Graph& g, ParamStore& ps, const QueryHeadIds& hd, Val cov) {
    Val s = sigmoid(linear(pooled_cov_stats(cov), g.param(ps, hd.remove_ratio_w),
                           g.param(ps, hd.remove_ratio_b)));
    return 0.2 + 0.1 * s.value().item();
}

inline double split_percentage(Graph& g, ParamStore& ps, const QueryHeadIds& hd, Val cov) {
    Val s = sigmoid(linear(pooled_cov_stats(cov), g.param(ps, hd.split_ratio_w),
                           g.param(ps, hd.split_ratio_b)));
    return 5.0 * s.value().item();
}

// Selection decisions of one update, recorded on the first pass and replayed
// verbatim when gradients are finite-difference checked (the hard index
// choices are straight-through constants).
struct UpdatePlan {
    std::vector<std::size_t> merge_copy;
    std::vector<std::pair<std::size_t, std::size_t>> merge_pairs;  // (min, max) index
    std::vector<std::size_t> remove_keep;
    bool remove_applied = false;
    bool remove_floor_clamped = false;
    std::vector<std::size_t> split_dup;
};

struct LayerLogRow {
    int layer = 0;
    std::size_t n_in = 0;
    std::size_t merged = 0;
    std::size_t removed = 0;
    std::size_t split = 0;
    std::size_t n_out = 0;
    bool floor_clamped = false;  // remove stage was cut short by the floor
};

inline std::string to_string(const LayerLogRow& r) {
    return "layer=" + std::to_string(r.layer) + " n_in=" + std::to_string(r.n_in) +
           " merged=" + std::to_string(r.merged) + " removed=" + std::to_string(r.removed) +
           " split=" + std::to_string(r.split) + " n_out=" + std::to_string(r.n_out);
}

namespace detail {

// Greedy pairing in index order: a flagged query merges with its highest-
// covariance unconsumed partner; one merge per query per layer; the floor is
// never crossed.
inline void plan_merge(const Tensor& labels, const Tensor& cov, std::size_t floor_count,
                       UpdatePlan& plan) {
    const std::size_t n = labels.numel();
    std::vector<bool> consumed(n, false);
    std::size_t remaining = n;
    for (std::size_t i = 0; i < n; ++i) {
        if (consumed[i] || labels.data[i] <= 0.5) continue;
        if (remaining <= floor_count) break;
        std::size_t best = n;
        double best_cov = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i || consumed[j]) continue;
            if (cov.at(i, j) > best_cov) {
                best_cov = cov.at(i, j);
                best = j;
            }
        }
        if (best == n) break;
        consumed[i] = true;
        consumed[best] = true;
        plan.merge_pairs.emplace_back(std::min(i, best), std::max(i, best));
        --remaining;
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!consumed[i]) plan.merge_copy.push_back(i);
}

// Indices of the k largest label values; equal labels resolve to the lower
// index first.
inline std::vector<std::size_t> top_k_by_label(const Tensor& labels, std::size_t k) {
    std::vector<std::size_t> order(labels.numel());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return labels.data[a] > labels.data[b];
    });
    order.resize(k);
    return order;
}

struct RemovePlan {
    std::vector<std::size_t> keep;  // ascending survivor indices
    bool applied = false;
    bool floor_clamped = false;
    std::size_t removed = 0;
};

// k = floor(r*N) forced into [ceil(0.2N), floor(0.3N)] (the stated min/max
// removal shares), then clamped so the floor is never crossed.
inline RemovePlan plan_remove(const Tensor& labels, double ratio, std::size_t floor_count) {
    const std::size_t n = labels.numel();
    const double nd = static_cast<double>(n);
    RemovePlan plan;
    std::size_t lo = static_cast<std::size_t>(std::ceil(0.2 * nd - 1e-9));
    std::size_t hi = static_cast<std::size_t>(std::floor(0.3 * nd + 1e-9));
    std::size_t k = static_cast<std::size_t>(std::floor(ratio * nd));
    k = hi < lo ? hi : std::clamp(k, lo, hi);
    const std::size_t room = n > floor_count ? n - floor_count : 0;
    if (k > room) {
        k = room;
        plan.floor_clamped = true;
    }
    if (k == 0) return plan;
    auto victims = top_k_by_label(labels, k);
    std::vector<bool> removed(n, false);
    for (std::size_t v : victims) removed[v] = true;
    for (std::size_t i = 0; i < n; ++i)
        if (!removed[i]) plan.keep.push_back(i);
    plan.applied = true;
    plan.removed = k;
    return plan;
}

// m = floor(pct/100 * N) duplicates, top split labels first.
inline std::vector<std::size_t> plan_split(const Tensor& labels, double pct) {
    const std::size_t n = labels.numel();
    const std::size_t m =
        static_cast<std::size_t>(std::floor(pct / 100.0 * static_cast<double>(n)));
    if (m == 0) return {};
    return top_k_by_label(labels, m);
}

}  // namespace detail

struct MergeResult {
    Val boxes;
    Val features;
    std::size_t merged = 0;
};

// Execute a merge plan: untouched rows are copied bitwise, merged pairs
// become the elementwise mean (circular mean for yaw), output keeps the
// original order with the pair at min(i, j)'s position.
inline MergeResult apply_merge(Val boxes, Val features, const UpdatePlan& plan) {
    if (plan.merge_pairs.empty()) return MergeResult{boxes, features, 0};
    std::vector<std::size_t> idx_a, idx_b;
    for (auto [a, b] : plan.merge_pairs) {
        idx_a.push_back(a);
        idx_b.push_back(b);
    }
    // output order: original positions of copies and pair-min slots
    std::vector<std::pair<std::size_t, std::size_t>> slots;  // (orig pos, stacked row)
    for (std::size_t c = 0; c < plan.merge_copy.size(); ++c)
        slots.emplace_back(plan.merge_copy[c], c);
    for (std::size_t k = 0; k < plan.merge_pairs.size(); ++k)
        slots.emplace_back(plan.merge_pairs[k].first, plan.merge_copy.size() + k);
    std::sort(slots.begin(), slots.end());
    std::vector<std::size_t> perm;
    perm.reserve(slots.size());
    for (auto& s : slots) perm.push_back(s.second);

    auto merge_matrix = [&](Val m, bool circular_theta) {
        Val a = gather_rows(m, idx_a);
        Val b = gather_rows(m, idx_b);
        Val mean_ab = scale(add(a, b), 0.5);
        if (circular_theta) {
            Val ta = slice_cols(a, kBoxTheta, 1);
            Val tb = slice_cols(b, kBoxTheta, 1);
            Val sm = scale(add(sin(ta), sin(tb)), 0.5);
            Val cm = scale(add(cos(ta), cos(tb)), 0.5);
            Val theta = atan2(sm, cm);
            mean_ab = concat_cols(concat_cols(slice_cols(mean_ab, 0, kBoxTheta), theta),
                                  slice_cols(mean_ab, kBoxTheta + 1, kBoxCols - kBoxTheta - 1));
        }
        Val copies = gather_rows(m, plan.merge_copy);
        return gather_rows(concat_rows({copies, mean_ab}), perm);
    };
    MergeResult out;
    out.boxes = merge_matrix(boxes, true);
    out.features = merge_matrix(features, false);
    out.merged = plan.merge_pairs.size();
    return out;
}

struct UpdateOptions {
    bool dynamic = true;
    const UpdatePlan* replay = nullptr;  // frozen decisions for grad checks
};

struct UpdateResult {
    Val boxes;
    Val features;
    LayerLogRow log;
    UpdatePlan plan;
};

// End-of-layer query update: cross-attention with the state features, then
// merge -> remove -> split. A remove stage that lands exactly on the floor
// finishes the shrink schedule, so split is skipped in that case (this is
// what pins the 900 -> 269 trajectory).
inline UpdateResult update_queries(Graph& g, ParamStore& ps, const QueryHeadIds& hd, Val boxes,
                                   Val features, Val state_tok, std::size_t floor_count,
                                   int layer, const UpdateOptions& opt = {}) {
    UpdateResult res;
    res.log.layer = layer;
    res.log.n_in = features.rows();
    Val attended = cross_attend(g, ps, hd, features, state_tok);
    if (!opt.dynamic) {
        res.boxes = boxes;
        res.features = attended;
        res.log.n_out = attended.rows();
        return res;
    }

    // merge
    Val cov = covariance(attended);
    Val mlabels = merge_labels(g, ps, hd, attended, cov);
    if (opt.replay) {
        res.plan.merge_copy = opt.replay->merge_copy;
        res.plan.merge_pairs = opt.replay->merge_pairs;
    } else {
        detail::plan_merge(mlabels.value(), cov.value(), floor_count, res.plan);
    }
    MergeResult merged = apply_merge(boxes, attended, res.plan);
    res.log.merged = merged.merged;
    Val cur_boxes = merged.boxes;
    Val cur_feats = merged.features;

    // remove
    std::size_t n = cur_feats.rows();
    Val cov2 = covariance(cur_feats);
    Val rlabels = remove_labels(g, ps, hd, cur_feats);  // [n x 1]
    if (opt.replay) {
        res.plan.remove_keep = opt.replay->remove_keep;
        res.plan.remove_applied = opt.replay->remove_applied;
        res.plan.remove_floor_clamped = opt.replay->remove_floor_clamped;
    } else {
        const double r = remove_ratio(g, ps, hd, cov2);
        auto rp = detail::plan_remove(rlabels.value(), r, floor_count);
        res.plan.remove_keep = std::move(rp.keep);
        res.plan.remove_applied = rp.applied;
        res.plan.remove_floor_clamped = rp.floor_clamped;
    }
    res.log.floor_clamped = res.plan.remove_floor_clamped;
    if (res.plan.remove_applied) {
        res.log.removed = n - res.plan.remove_keep.size();
        Val fac = reshape(gather_rows(add_scalar(neg(rlabels), 1.0), res.plan.remove_keep),
                          Shape{res.plan.remove_keep.size()});
        cur_feats = mul_colvec(gather_rows(cur_feats, res.plan.remove_keep), fac);
        cur_boxes = gather_rows(cur_boxes, res.plan.remove_keep);
        n = res.plan.remove_keep.size();
    }

    // split (suppressed once the shrink schedule hits the floor)
    Val slabels = split_labels(g, ps, hd, cur_feats);
    if (opt.replay) {
        res.plan.split_dup = opt.replay->split_dup;
    } else if (!res.plan.remove_floor_clamped) {
        Val cov3 = covariance(cur_feats);
        res.plan.split_dup = detail::plan_split(slabels.value(), split_percentage(g, ps, hd, cov3));
    }
    if (!res.plan.split_dup.empty()) {
        res.log.split = res.plan.split_dup.size();
        cur_boxes = concat_rows({cur_boxes, gather_rows(cur_boxes, res.plan.split_dup)});
        cur_feats = concat_rows({cur_feats, gather_rows(cur_feats, res.plan.split_dup)});
    }

    res.boxes = cur_boxes;
    res.features = cur_feats;
    res.log.n_out = cur_feats.rows();
    return res;
}

}  // namespace dyss
