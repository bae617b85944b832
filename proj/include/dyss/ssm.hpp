#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyss/autodiff.hpp"
#include "dyss/fft.hpp"
#include "dyss/rng.hpp"

namespace dyss {

enum class TransformKind { identity, fft };

inline std::string to_string(TransformKind k) {
    return k == TransformKind::identity ? "identity" : "fft";
}

constexpr double kStabilitySquash = 0.999;

// Parameter ids for one SSM block. The block operates on transformed
// channels: d_inner = d_feat for identity, 2*d_feat for fft (re||im). The
// step input is concat(x_t, x_pred_t), hence 2*d_inner input columns.
struct SsmBlockIds {
    TransformKind kind = TransformKind::identity;
    std::size_t state_dim = 0;  // N
    std::size_t d_feat = 0;     // sampled feature channels (C)
    std::size_t d_inner = 0;
    int a_raw = -1;    // [N], evolution diag before the stability squash
    int b_in = -1;     // [2*d_inner x N]
    int c_out = -1;    // [N x d_inner], enhanced-feature head
    int p_out = -1;    // [N x d_inner], next-step prediction head
    int state_w = -1;  // [N x D] state->query-dim projection for attention/mixing
    int state_b = -1;  // [D]
};

inline SsmBlockIds make_ssm_block(ParamStore& ps, const std::string& prefix, TransformKind kind,
                                  std::size_t state_dim, std::size_t d_feat, std::size_t d_query,
                                  Rng& rng) {
    SsmBlockIds blk;
    blk.kind = kind;
    blk.state_dim = state_dim;
    blk.d_feat = d_feat;
    blk.d_inner = kind == TransformKind::identity ? d_feat : 2 * d_feat;
    auto gauss = [&](Shape s, double sigma) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.gaussian(0.0, sigma);
        return t;
    };
    // a_raw around 0.5 gives decay factors near tanh(0.5)*0.999 ~ 0.46
    Tensor a(Shape{state_dim});
    for (auto& v : a.data) v = rng.gaussian(0.5, 0.2);
    blk.a_raw = ps.add(prefix + ".a_raw", std::move(a));
    const double in_sigma = 1.0 / std::sqrt(static_cast<double>(2 * blk.d_inner));
    const double out_sigma = 1.0 / std::sqrt(static_cast<double>(state_dim));
    blk.b_in = ps.add(prefix + ".b_in", gauss(Shape{2 * blk.d_inner, state_dim}, in_sigma));
    blk.c_out = ps.add(prefix + ".c_out", gauss(Shape{state_dim, blk.d_inner}, out_sigma));
    blk.p_out = ps.add(prefix + ".p_out", gauss(Shape{state_dim, blk.d_inner}, out_sigma));
    blk.state_w = ps.add(prefix + ".state_w", gauss(Shape{state_dim, d_query}, out_sigma));
    blk.state_b = ps.add(prefix + ".state_b", Tensor(Shape{d_query}));
    return blk;
}

// Evolution diagonal with |a| < 1 guaranteed.
inline Val ssm_evolution_diag(Graph& g, ParamStore& ps, const SsmBlockIds& blk) {
    return scale(tanh(g.param(ps, blk.a_raw)), kStabilitySquash);
}

struct SsmStepOut {
    Val h_next;  // [tokens x N]
    Val y_enh;   // [tokens x d_inner]
    Val y_pred;  // [tokens x d_inner], prediction for the next step
};

// One recurrence step: h' = a (.) h + B.concat(x_t, x_pred_t),
// y_enh = h'.C, y_pred = h'.P. Inputs live in the transformed channel space.
inline SsmStepOut ssm_step(Graph& g, ParamStore& ps, const SsmBlockIds& blk, Val evo_diag, Val h,
                           Val x_t, Val x_pred_t) {
    if (x_t.rows() != h.rows() || x_pred_t.rows() != h.rows())
        throw std::logic_error("ssm_step: token count changed mid-scan (" +
                               std::to_string(x_t.rows()) + " vs state " +
                               std::to_string(h.rows()) + ")");
    Val x_cat = concat_cols(x_t, x_pred_t);
    Val h_next = add(mul_rowvec(h, evo_diag), matmul(x_cat, g.param(ps, blk.b_in)));
    SsmStepOut out;
    out.h_next = h_next;
    out.y_enh = matmul(h_next, g.param(ps, blk.c_out));
    out.y_pred = matmul(h_next, g.param(ps, blk.p_out));
    return out;
}

// Bernoulli token mask, one decision per (frame, token); pure in the seed.
inline std::vector<std::vector<bool>> gen_token_mask(std::size_t frames, std::size_t tokens,
                                                     double ratio, std::uint64_t seed) {
    if (ratio < 0.0 || ratio >= 1.0)
        throw std::invalid_argument("gen_token_mask: ratio must be in [0, 1)");
    std::vector<std::vector<bool>> mask(frames, std::vector<bool>(tokens, false));
    Rng rng = Rng::derive(seed, {0x6d61736bull});
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t i = 0; i < tokens; ++i) mask[t][i] = rng.bernoulli(ratio);
    return mask;
}

// Replace masked token rows with the learned mask embedding.
inline Val apply_token_mask(Graph& g, Val features, const std::vector<bool>& masked,
                            Val mask_embed) {
    const std::size_t tokens = features.rows();
    const std::size_t d = features.cols();
    if (masked.size() != tokens)
        throw std::invalid_argument("apply_token_mask: mask length mismatch");
    if (mask_embed.value().numel() != d)
        throw std::invalid_argument("apply_token_mask: embedding dim mismatch");
    bool any = false;
    for (bool b : masked) any = any || b;
    if (!any) return features;
    Tensor keep(Shape{tokens});
    Tensor indicator(Shape{tokens, 1});
    for (std::size_t i = 0; i < tokens; ++i) {
        keep.data[i] = masked[i] ? 0.0 : 1.0;
        indicator.at(i, 0) = masked[i] ? 1.0 : 0.0;
    }
    Val kept = mul_colvec(features, g.leaf(std::move(keep)));
    Val fill = matmul(g.leaf(std::move(indicator)), reshape(mask_embed, Shape{1, d}));
    return add(kept, fill);
}

// F, F-hat, F-tilde of one block+layer. predicted[t] is the prediction for
// frame t emitted at t-1; index 0 is unused.
struct FeatureBundle {
    std::vector<Val> target;
    std::vector<Val> enhanced;
    std::vector<Val> predicted;
    bool future_defined = true;  // false when T == 1 (L_f forced to 0)
};

// Prediction-channel instrumentation: the exact tensors consumed and emitted
// by the x_pred input, in transformed space. Lets tests pin down that the
// recurrence feeds back its own predictions rather than ground truth.
struct ScanTrace {
    std::vector<Tensor> pred_in;
    std::vector<Tensor> pred_out;
};

struct ScanResult {
    FeatureBundle bundle;
    Val final_state;  // [tokens x N]
    ScanTrace trace;
};

struct ScanOptions {
    bool training = false;
    double mask_ratio = 0.5;
    std::uint64_t mask_seed = 0;
};

// Scan T frames through one block. In training mode the observation inputs
// are masked before the forward transform; the prediction channel always
// receives the block's own previous emission (zeros at t=0), never ground
// truth. Returns the final hidden state for the mixing stage.
inline ScanResult ssm_scan(Graph& g, ParamStore& ps, const SsmBlockIds& blk,
                           const std::vector<Val>& features, Val mask_embed,
                           const ScanOptions& opt) {
    if (features.empty()) throw std::invalid_argument("ssm_scan: need at least one frame");
    const std::size_t frames = features.size();
    const std::size_t tokens = features[0].rows();
    ScanResult res;
    res.bundle.future_defined = frames >= 2;

    std::vector<std::vector<bool>> mask;
    if (opt.training && opt.mask_ratio > 0.0)
        mask = gen_token_mask(frames, tokens, opt.mask_ratio, opt.mask_seed);

    Val evo = ssm_evolution_diag(g, ps, blk);
    Val h = g.leaf(Tensor(Shape{tokens, blk.state_dim}));
    Val pred_carry;  // transformed-space prediction from the previous step
    res.bundle.predicted.resize(frames);

    auto fwd = [&](Val x) { return blk.kind == TransformKind::fft ? dft_rows(x) : x; };
    auto inv = [&](Val y) { return blk.kind == TransformKind::fft ? idft_rows(y) : y; };

    for (std::size_t t = 0; t < frames; ++t) {
        res.bundle.target.push_back(features[t]);
        Val obs = features[t];
        if (!mask.empty()) obs = apply_token_mask(g, obs, mask[t], mask_embed);
        Val x_t = fwd(obs);
        Val x_pred = pred_carry.valid() ? pred_carry
                                        : g.leaf(Tensor(Shape{tokens, blk.d_inner}));
        res.trace.pred_in.push_back(x_pred.value());
        SsmStepOut step = ssm_step(g, ps, blk, evo, h, x_t, x_pred);
        h = step.h_next;
        pred_carry = step.y_pred;
        res.trace.pred_out.push_back(step.y_pred.value());
        res.bundle.enhanced.push_back(inv(step.y_enh));
        if (t + 1 < frames) res.bundle.predicted[t + 1] = inv(step.y_pred);
    }
    res.final_state = h;
    return res;
}

struct AuxLosses {
    Val reconstruction;  // L_r
    Val future;          // L_f
    bool future_warning = false;  // T == 1, L_f defined as 0
};

// L_r = (1/T) sum_t mean((F_hat_t - F_t)^2); L_f over frames 2..T with
// 1/(T-1). Mean-per-element keeps magnitudes comparable across token counts.
inline AuxLosses aux_losses(Graph& g, const FeatureBundle& bundle) {
    const std::size_t frames = bundle.target.size();
    if (frames == 0 || bundle.enhanced.size() != frames)
        throw std::invalid_argument("aux_losses: inconsistent bundle");
    AuxLosses out;
    Val rec;
    for (std::size_t t = 0; t < frames; ++t) {
        Val term = mse(bundle.enhanced[t], bundle.target[t]);
        rec = rec.valid() ? add(rec, term) : term;
    }
    out.reconstruction = scale(rec, 1.0 / static_cast<double>(frames));
    if (frames < 2 || !bundle.future_defined) {
        out.future = g.leaf(Tensor::scalar(0.0));
        out.future_warning = true;
        return out;
    }
    Val fut;
    for (std::size_t t = 1; t < frames; ++t) {
        Val term = mse(bundle.predicted[t], bundle.target[t]);
        fut = fut.valid() ? add(fut, term) : term;
    }
    out.future = scale(fut, 1.0 / static_cast<double>(frames - 1));
    return out;
}

}  // namespace dyss
