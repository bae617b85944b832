#pragma once

// Reference implementations used only to check the real paths. They never
// call into the code they verify; where bitwise equality is the contract
// they deliberately repeat the same operation order on plain tensors.

#include <limits>
#include <vector>

#include "dyss/fft.hpp"
#include "dyss/ssm.hpp"

namespace dyss::oracle {

struct ScanReference {
    std::vector<Tensor> enhanced;   // per frame [tokens x d_feat]
    std::vector<Tensor> predicted;  // predicted[t] for t >= 1
    Tensor final_state;
};

inline Tensor dft_rows_plain(const Tensor& x) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor out(Shape{n, 2 * d});
    std::vector<double> row(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) row[j] = x.at(i, j);
        auto spec = fft_real(row, false);
        for (std::size_t j = 0; j < d; ++j) {
            out.at(i, j) = spec[j].real();
            out.at(i, d + j) = spec[j].imag();
        }
    }
    return out;
}

inline Tensor idft_rows_plain(const Tensor& y) {
    const std::size_t n = y.dim(0), d = y.dim(1) / 2;
    Tensor out(Shape{n, d});
    std::vector<cplx> row(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) row[j] = cplx(y.at(i, j), y.at(i, d + j));
        auto sig = fft(row, true);
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = sig[j].real();
    }
    return out;
}

// Naive per-step loop replaying the scan arithmetic in the same operation
// order (so equality is bitwise), without touching the tape machinery.
inline ScanReference ssm_scan_reference(const ParamStore& ps, const SsmBlockIds& blk,
                                        const std::vector<Tensor>& features,
                                        const Tensor& mask_embed,
                                        const std::vector<std::vector<bool>>& mask) {
    const std::size_t frames = features.size();
    const std::size_t tokens = features[0].dim(0);
    const std::size_t n_state = blk.state_dim;
    const std::size_t d_in = blk.d_inner;

    const Tensor& a_raw = ps[blk.a_raw].value;
    Tensor evo(Shape{n_state});
    for (std::size_t j = 0; j < n_state; ++j) evo.data[j] = std::tanh(a_raw.data[j]);
    for (std::size_t j = 0; j < n_state; ++j) evo.data[j] = evo.data[j] * kStabilitySquash;

    const Tensor& b = ps[blk.b_in].value;
    const Tensor& c = ps[blk.c_out].value;
    const Tensor& p = ps[blk.p_out].value;

    ScanReference ref;
    ref.predicted.resize(frames);
    Tensor h(Shape{tokens, n_state});
    Tensor pred_carry(Shape{tokens, d_in});
    for (std::size_t t = 0; t < frames; ++t) {
        Tensor obs = features[t];
        if (!mask.empty()) {
            bool any = false;
            for (bool m : mask[t]) any = any || m;
            if (any) {
                Tensor kept(obs.shape);
                const std::size_t dc = obs.dim(1);
                for (std::size_t i = 0; i < tokens; ++i) {
                    double keep = mask[t][i] ? 0.0 : 1.0;
                    for (std::size_t j = 0; j < dc; ++j) kept.at(i, j) = obs.at(i, j) * keep;
                }
                Tensor fill(obs.shape);
                for (std::size_t i = 0; i < tokens; ++i) {
                    double ind = mask[t][i] ? 1.0 : 0.0;
                    for (std::size_t j = 0; j < dc; ++j)
                        fill.at(i, j) += ind * mask_embed.data[j];
                }
                for (std::size_t i = 0; i < obs.numel(); ++i)
                    obs.data[i] = kept.data[i] + fill.data[i];
            }
        }
        Tensor x_t = blk.kind == TransformKind::fft ? dft_rows_plain(obs) : obs;
        Tensor x_cat(Shape{tokens, 2 * d_in});
        for (std::size_t i = 0; i < tokens; ++i) {
            for (std::size_t j = 0; j < d_in; ++j) x_cat.at(i, j) = x_t.at(i, j);
            for (std::size_t j = 0; j < d_in; ++j) x_cat.at(i, d_in + j) = pred_carry.at(i, j);
        }
        Tensor decay(Shape{tokens, n_state});
        for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t j = 0; j < n_state; ++j) decay.at(i, j) = h.at(i, j) * evo.data[j];
        Tensor drive(Shape{tokens, n_state});
        detail::matmul_acc(x_cat.data.data(), b.data.data(), drive.data.data(), tokens, 2 * d_in,
                           n_state);
        for (std::size_t i = 0; i < h.numel(); ++i) h.data[i] = decay.data[i] + drive.data[i];

        Tensor y_enh(Shape{tokens, d_in});
        detail::matmul_acc(h.data.data(), c.data.data(), y_enh.data.data(), tokens, n_state, d_in);
        Tensor y_pred(Shape{tokens, d_in});
        detail::matmul_acc(h.data.data(), p.data.data(), y_pred.data.data(), tokens, n_state,
                           d_in);
        pred_carry = y_pred;
        ref.enhanced.push_back(blk.kind == TransformKind::fft ? idft_rows_plain(y_enh) : y_enh);
        if (t + 1 < frames)
            ref.predicted[t + 1] =
                blk.kind == TransformKind::fft ? idft_rows_plain(y_pred) : y_pred;
    }
    ref.final_state = h;
    return ref;
}

// Exhaustive minimum-cost assignment for small instances (O(n!)).
struct BruteAssignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (pred, gt)
    double cost = 0.0;
};

inline BruteAssignment assignment_bruteforce(const Tensor& cost) {
    const std::size_t np = cost.dim(0), ng = cost.dim(1);
    BruteAssignment best;
    best.cost = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> chosen;  // chosen[g] = pred for gt g (column-major fill)
    std::vector<bool> used(np, false);
    std::vector<std::pair<std::size_t, std::size_t>> cur;

    // assign each gt column to a distinct pred row; handles np >= ng and
    // np < ng by swapping roles below.
    std::function<void(std::size_t, double)> rec_cols = [&](std::size_t g, double acc) {
        if (acc >= best.cost) return;
        if (g == ng) {
            best.cost = acc;
            best.pairs = cur;
            return;
        }
        for (std::size_t r = 0; r < np; ++r) {
            if (used[r]) continue;
            used[r] = true;
            cur.emplace_back(r, g);
            rec_cols(g + 1, acc + cost.at(r, g));
            cur.pop_back();
            used[r] = false;
        }
    };
    std::vector<bool> used_g(ng, false);
    std::function<void(std::size_t, double)> rec_rows = [&](std::size_t r, double acc) {
        if (acc >= best.cost) return;
        if (r == np) {
            best.cost = acc;
            best.pairs = cur;
            return;
        }
        for (std::size_t gcol = 0; gcol < ng; ++gcol) {
            if (used_g[gcol]) continue;
            used_g[gcol] = true;
            cur.emplace_back(r, gcol);
            rec_rows(r + 1, acc + cost.at(r, gcol));
            cur.pop_back();
            used_g[gcol] = false;
        }
    };
    if (np == 0 || ng == 0) {
        best.cost = 0.0;
        return best;
    }
    if (np >= ng)
        rec_cols(0, 0.0);
    else
        rec_rows(0, 0.0);
    std::sort(best.pairs.begin(), best.pairs.end());
    return best;
}

}  // namespace dyss::oracle
