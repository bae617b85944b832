#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "dyss/queries.hpp"
#include "dyss/tensor.hpp"

namespace dyss {

struct MatchResult {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (pred, gt), sorted by pred
    std::vector<std::size_t> unmatched_preds;
};

namespace detail {

// Shortest augmenting path assignment with potentials, O(n^2 m).
// Requires rows <= cols; returns col -> row matching (0 = none, 1-based).
inline std::vector<int> hungarian_rows_leq_cols(const Tensor& cost) {
    const int n = static_cast<int>(cost.dim(0));
    const int m = static_cast<int>(cost.dim(1));
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(m) + 1, 0);
    std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
        std::vector<bool> used(static_cast<std::size_t>(m) + 1, false);
        do {
            used[static_cast<std::size_t>(j0)] = true;
            int i0 = p[static_cast<std::size_t>(j0)];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                double cur = cost.at(static_cast<std::size_t>(i0 - 1),
                                     static_cast<std::size_t>(j - 1)) -
                             u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    return p;
}

}  // namespace detail

// Exact minimum-cost assignment of predictions to ground truths. Pair count
// is min(N_pred, N_gt); empty ground truth gives an empty match.
inline MatchResult hungarian(const Tensor& cost) {
    if (cost.rank() != 2)
        throw std::invalid_argument("hungarian: cost must be a matrix, got " +
                                    shape_str(cost.shape));
    for (double c : cost.data)
        if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost entry");
    const std::size_t np = cost.dim(0), ng = cost.dim(1);
    MatchResult res;
    if (np == 0 || ng == 0) {
        for (std::size_t i = 0; i < np; ++i) res.unmatched_preds.push_back(i);
        return res;
    }
    if (np <= ng) {
        auto colmatch = detail::hungarian_rows_leq_cols(cost);
        for (std::size_t j = 1; j <= ng; ++j)
            if (colmatch[j] != 0)
                res.pairs.emplace_back(static_cast<std::size_t>(colmatch[j] - 1), j - 1);
    } else {
        Tensor t(Shape{ng, np});
        for (std::size_t i = 0; i < np; ++i)
            for (std::size_t j = 0; j < ng; ++j) t.at(j, i) = cost.at(i, j);
        auto colmatch = detail::hungarian_rows_leq_cols(t);
        for (std::size_t j = 1; j <= np; ++j)
            if (colmatch[j] != 0)
                res.pairs.emplace_back(j - 1, static_cast<std::size_t>(colmatch[j] - 1));
    }
    std::sort(res.pairs.begin(), res.pairs.end());
    std::vector<bool> matched(np, false);
    for (auto& [pi, gi] : res.pairs) matched[pi] = true;
    for (std::size_t i = 0; i < np; ++i)
        if (!matched[i]) res.unmatched_preds.push_back(i);
    return res;
}

// Ranges used to put the 9 box parameters on a comparable footing inside the
// matching cost.
struct BoxScales {
    std::array<double, kBoxCols> s{20.0, 20.0, 4.0, 5.0, 5.0, 5.0,
                                   3.14159265358979323846, 5.0, 5.0};
};

struct GroundTruth {
    std::vector<int> classes;  // K-way class ids
    Tensor boxes;              // [n_gt x 9]
    std::size_t size() const { return classes.size(); }
};

// cost = alpha * (1 - p_true_class) + beta * L1 over normalized box params.
inline Tensor match_cost(const Tensor& logits, const Tensor& boxes, const GroundTruth& gt,
                         double alpha = 2.0, double beta = 1.0, const BoxScales& scales = {}) {
    const std::size_t np = logits.dim(0);
    const std::size_t ng = gt.size();
    Tensor cost(Shape{np, ng});
    for (std::size_t i = 0; i < np; ++i) {
        for (std::size_t j = 0; j < ng; ++j) {
            const int cls = gt.classes[j];
            double p = 1.0 / (1.0 + std::exp(-logits.at(i, static_cast<std::size_t>(cls))));
            double l1 = 0.0;
            for (std::size_t k = 0; k < kBoxCols; ++k) {
                double d = boxes.at(i, k) - gt.boxes.at(j, k);
                if (k == kBoxTheta) d = wrap_angle(d);
                l1 += std::fabs(d) / scales.s[k];
            }
            cost.at(i, j) = alpha * (1.0 - p) + beta * l1;
        }
    }
    return cost;
}

}  // namespace dyss
