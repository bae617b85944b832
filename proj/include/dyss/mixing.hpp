#pragma once

#include <string>
#include <vector>

#include "dyss/autodiff.hpp"
#include "dyss/rng.hpp"

namespace dyss {

// Adaptive mixing: per-query channel and point mixing matrices generated
// from the query feature by linear maps, applied to that query's state
// features, flattened and added back as a residual.
struct MixIds {
    std::size_t d_query = 0;  // D
    std::size_t points = 0;   // P
    int wc_gen_w = -1, wc_gen_b = -1;  // [D x D*D]
    int wp_gen_w = -1, wp_gen_b = -1;  // [D x P*P]
    int ln_c_gain = -1, ln_c_bias = -1;  // [D]
    int ln_p_gain = -1, ln_p_bias = -1;  // [P]
    int out_w = -1, out_b = -1;  // [D*P x D]
};

inline MixIds make_mixing(ParamStore& ps, const std::string& prefix, std::size_t d,
                          std::size_t points, Rng& rng) {
    MixIds m;
    m.d_query = d;
    m.points = points;
    auto gauss = [&](Shape s, double sigma) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.gaussian(0.0, sigma);
        return t;
    };
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    m.wc_gen_w = ps.add(prefix + ".wc_gen_w", gauss(Shape{d, d * d}, sd));
    m.wc_gen_b = ps.add(prefix + ".wc_gen_b", Tensor(Shape{d * d}));
    m.wp_gen_w = ps.add(prefix + ".wp_gen_w", gauss(Shape{d, points * points}, sd));
    m.wp_gen_b = ps.add(prefix + ".wp_gen_b", Tensor(Shape{points * points}));
    m.ln_c_gain = ps.add(prefix + ".ln_c_gain", Tensor(Shape{d}, 1.0));
    m.ln_c_bias = ps.add(prefix + ".ln_c_bias", Tensor(Shape{d}));
    m.ln_p_gain = ps.add(prefix + ".ln_p_gain", Tensor(Shape{points}, 1.0));
    m.ln_p_bias = ps.add(prefix + ".ln_p_bias", Tensor(Shape{points}));
    m.out_w = ps.add(prefix + ".out_w",
                     gauss(Shape{d * points, d}, 1.0 / std::sqrt(static_cast<double>(d * points))));
    m.out_b = ps.add(prefix + ".out_b", Tensor(Shape{d}));
    return m;
}

// M_c = ReLU(LayerNorm(S_q . W_c)) for one query; S_q is [P x D].
inline Val channel_mix(Graph& g, ParamStore& ps, const MixIds& m, Val w_c, Val s_q) {
    if (s_q.cols() != m.d_query || w_c.rows() != m.d_query || w_c.cols() != m.d_query)
        throw std::invalid_argument("channel_mix: S_q " + shape_str(s_q.shape()) + " / W_c " +
                                    shape_str(w_c.shape()) + " do not match D=" +
                                    std::to_string(m.d_query));
    return relu(layer_norm_rows(matmul(s_q, w_c), g.param(ps, m.ln_c_gain),
                                g.param(ps, m.ln_c_bias)));
}

// M_p = ReLU(LayerNorm(M_c^T . W_p)); [D x P].
inline Val point_mix(Graph& g, ParamStore& ps, const MixIds& m, Val w_p, Val m_c) {
    if (w_p.rows() != m.points || w_p.cols() != m.points)
        throw std::invalid_argument("point_mix: W_p " + shape_str(w_p.shape()) +
                                    " does not match P=" + std::to_string(m.points));
    return relu(layer_norm_rows(matmul(transpose(m_c), w_p), g.param(ps, m.ln_p_gain),
                                g.param(ps, m.ln_p_bias)));
}

// Whole mixing stage across queries: state_tok is [Nq*P x D] in (query,
// point) row order. Returns features + Linear(flatten(M_p)).
inline Val mix_residual(Graph& g, ParamStore& ps, const MixIds& m, Val features, Val state_tok) {
    const std::size_t nq = features.rows();
    const std::size_t d = m.d_query, p = m.points;
    if (state_tok.rows() != nq * p)
        throw std::invalid_argument("mix_residual: state rows " +
                                    std::to_string(state_tok.rows()) + " != Nq*P = " +
                                    std::to_string(nq * p));
    Val wc_all = linear(features, g.param(ps, m.wc_gen_w), g.param(ps, m.wc_gen_b));
    Val wp_all = linear(features, g.param(ps, m.wp_gen_w), g.param(ps, m.wp_gen_b));
    std::vector<Val> rows;
    rows.reserve(nq);
    for (std::size_t q = 0; q < nq; ++q) {
        std::vector<std::size_t> tok_idx(p);
        for (std::size_t i = 0; i < p; ++i) tok_idx[i] = q * p + i;
        Val s_q = gather_rows(state_tok, tok_idx);
        Val w_c = reshape(gather_rows(wc_all, {q}), Shape{d, d});
        Val w_p = reshape(gather_rows(wp_all, {q}), Shape{p, p});
        Val m_c = channel_mix(g, ps, m, w_c, s_q);
        Val m_p = point_mix(g, ps, m, w_p, m_c);
        rows.push_back(reshape(m_p, Shape{1, d * p}));
    }
    Val flat = concat_rows(rows);
    return add(features, linear(flat, g.param(ps, m.out_w), g.param(ps, m.out_b)));
}

}  // namespace dyss
