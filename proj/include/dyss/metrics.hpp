#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyss/matching.hpp"
#include "dyss/queries.hpp"

namespace dyss {

// One decoded detection: argmax class with its sigmoid score.
struct Detection {
    int class_id = 0;
    double score = 0.0;
    QueryBox box;
    std::size_t scene = 0;
};

struct GtBox {
    int class_id = 0;
    QueryBox box;
    std::size_t scene = 0;
};

inline std::vector<Detection> decode_detections(const Tensor& logits, const Tensor& boxes,
                                                std::size_t scene_index = 0) {
    std::vector<Detection> out;
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (logits.at(i, c) > logits.at(i, best)) best = c;
        Detection d;
        d.class_id = static_cast<int>(best);
        d.score = 1.0 / (1.0 + std::exp(-logits.at(i, best)));
        d.box = box_from_row(boxes, i);
        d.scene = scene_index;
        out.push_back(d);
    }
    return out;
}

inline double bev_distance(const QueryBox& a, const QueryBox& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

struct MatchedPair {
    std::size_t det = 0, gt = 0;
};

// Greedy matching by descending score (index breaks ties); each ground truth
// matches at most once; a match requires BEV center distance <= threshold
// and may only pair within the same scene.
inline std::vector<MatchedPair> match_predictions(const std::vector<Detection>& dets,
                                                  const std::vector<GtBox>& gts,
                                                  double threshold) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<bool> gt_used(gts.size(), false);
    std::vector<MatchedPair> out;
    for (std::size_t di : order) {
        double best = threshold;
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gt_used[g] || gts[g].scene != dets[di].scene) continue;
            double d = bev_distance(dets[di].box, gts[g].box);
            if (d <= best) {
                best = d;
                best_g = g;
            }
        }
        if (best_g < gts.size()) {
            gt_used[best_g] = true;
            out.push_back({di, best_g});
        }
    }
    return out;
}

// Area under the precision-recall curve with 101-point interpolation.
// `matched` flags each detection (already sorted by the caller's score
// ordering convention: we re-sort internally by score desc, index asc).
inline double average_precision(const std::vector<Detection>& dets,
                                const std::vector<bool>& is_tp, std::size_t n_gt) {
    if (n_gt == 0) return 0.0;
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (std::size_t oi : order) {
        if (is_tp[oi])
            ++tp;
        else
            ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    double ap = 0.0;
    for (int k = 0; k <= 100; ++k) {
        const double r = static_cast<double>(k) / 100.0;
        double best = 0.0;
        for (std::size_t i = 0; i < precision.size(); ++i)
            if (recall[i] >= r) best = std::max(best, precision[i]);
        ap += best;
    }
    return ap / 101.0;
}

struct TpErrors {
    double ate = 0.0;  // BEV center L2, meters
    double ase = 0.0;  // 1 - IoU of axis-aligned co-centered boxes
    double aoe = 0.0;  // wrapped |yaw| difference, radians
    double ave = 0.0;  // velocity L2, m/s
    bool no_matches = false;
};

inline double aligned_iou(const QueryBox& a, const QueryBox& b) {
    const double iw = std::min(a.w, b.w), il = std::min(a.l, b.l), ih = std::min(a.h, b.h);
    const double inter = iw * il * ih;
    const double uni = a.w * a.l * a.h + b.w * b.l * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline TpErrors tp_errors(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                          const std::vector<MatchedPair>& matches) {
    TpErrors e;
    if (matches.empty()) {
        e.ate = e.ase = e.aoe = e.ave = 1.0;  // worst-case convention
        e.no_matches = true;
        return e;
    }
    for (const auto& m : matches) {
        const QueryBox& d = dets[m.det].box;
        const QueryBox& g = gts[m.gt].box;
        e.ate += bev_distance(d, g);
        e.ase += 1.0 - aligned_iou(d, g);
        e.aoe += std::fabs(wrap_angle(d.theta - g.theta));
        e.ave += std::hypot(d.vx - g.vx, d.vy - g.vy);
    }
    const double n = static_cast<double>(matches.size());
    e.ate /= n;
    e.ase /= n;
    e.aoe /= n;
    e.ave /= n;
    return e;
}

struct EvalReport {
    double mAP = 0.0;
    double mATE = 1.0, mASE = 1.0, mAOE = 1.0, mAVE = 1.0;
    double composite = 0.0;
    std::map<int, double> per_class_ap;                   // mean over thresholds
    std::map<double, double> per_threshold_ap;            // mean over classes
    std::size_t n_detections = 0, n_ground_truth = 0;
};

constexpr double kTpErrorMatchThreshold = 2.0;  // meters
inline const std::vector<double>& ap_thresholds() {
    static const std::vector<double> t{0.5, 1.0, 2.0, 4.0};
    return t;
}

// nuScenes-style aggregate, minus the attribute error (the synthetic world
// has no attributes): composite = (5*mAP + sum(1 - min(1, err))) / 9.
inline EvalReport evaluate_detections(const std::vector<Detection>& dets,
                                      const std::vector<GtBox>& gts, std::size_t num_classes) {
    EvalReport rep;
    rep.n_detections = dets.size();
    rep.n_ground_truth = gts.size();

    double ap_sum = 0.0;
    std::size_t ap_count = 0;
    for (std::size_t cls = 0; cls < num_classes; ++cls) {
        std::vector<Detection> cd;
        std::vector<GtBox> cg;
        for (const auto& d : dets)
            if (d.class_id == static_cast<int>(cls)) cd.push_back(d);
        for (const auto& g : gts)
            if (g.class_id == static_cast<int>(cls)) cg.push_back(g);
        if (cg.empty()) continue;  // class absent from ground truth: skipped
        double class_sum = 0.0;
        for (double th : ap_thresholds()) {
            auto matches = match_predictions(cd, cg, th);
            std::vector<bool> is_tp(cd.size(), false);
            for (const auto& m : matches) is_tp[m.det] = true;
            double ap = average_precision(cd, is_tp, cg.size());
            class_sum += ap;
            rep.per_threshold_ap[th] += ap;
            ap_sum += ap;
            ++ap_count;
        }
        rep.per_class_ap[static_cast<int>(cls)] = class_sum / ap_thresholds().size();
    }
    for (auto& [th, v] : rep.per_threshold_ap)
        v /= std::max<std::size_t>(1, rep.per_class_ap.size());
    rep.mAP = ap_count > 0 ? ap_sum / static_cast<double>(ap_count) : 0.0;

    // TP errors pool all classes at the 2 m threshold
    auto matches = match_predictions(dets, gts, kTpErrorMatchThreshold);
    auto errs = tp_errors(dets, gts, matches);
    rep.mATE = errs.ate;
    rep.mASE = errs.ase;
    rep.mAOE = errs.aoe;
    rep.mAVE = errs.ave;

    double tp_term = 0.0;
    for (double e : {rep.mATE, rep.mASE, rep.mAOE, rep.mAVE})
        tp_term += 1.0 - std::min(1.0, e);
    rep.composite = (5.0 * rep.mAP + tp_term) / 9.0;
    return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["mAP"] = r.mAP;
    j["mATE"] = r.mATE;
    j["mASE"] = r.mASE;
    j["mAOE"] = r.mAOE;
    j["mAVE"] = r.mAVE;
    j["composite"] = r.composite;
    j["n_detections"] = r.n_detections;
    j["n_ground_truth"] = r.n_ground_truth;
    nlohmann::json pc = nlohmann::json::object();
    for (auto& [cls, ap] : r.per_class_ap) pc[std::to_string(cls)] = ap;
    j["per_class_ap"] = pc;
    nlohmann::json pt = nlohmann::json::object();
    for (auto& [th, ap] : r.per_threshold_ap) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.1f", th);
        pt[buf] = ap;
    }
    j["per_threshold_ap"] = pt;
    return j;
}

}  // namespace dyss
