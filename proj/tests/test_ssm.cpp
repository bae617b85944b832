#include <catch2/catch_amalgamated.hpp>

#include "dyss/grad_check.hpp"
#include "dyss/oracles.hpp"
#include "dyss/ssm.hpp"

#include "test_helpers.hpp"

using namespace dyss;
using dysstest::gaussian_tensor;
using dysstest::max_abs_diff;
using dysstest::random_tensor;
using dysstest::weighted_sum;

namespace {

struct BlockFixture {
    ParamStore ps;
    SsmBlockIds blk;
    int mask_embed = -1;

    BlockFixture(TransformKind kind, std::size_t n_state, std::size_t d_feat, std::uint64_t seed) {
        Rng rng(seed);
        blk = make_ssm_block(ps, "ssm", kind, n_state, d_feat, /*d_query=*/8, rng);
        Tensor emb(Shape{d_feat});
        for (auto& v : emb.data) v = rng.gaussian(0.0, 0.1);
        mask_embed = ps.add("mask_embed", std::move(emb));
    }
};

std::vector<Val> as_leaves(Graph& g, const std::vector<Tensor>& frames) {
    std::vector<Val> out;
    for (const auto& f : frames) out.push_back(g.leaf(f));
    return out;
}

}  // namespace

TEST_CASE("zero evolution with identity-block B and identity C is memoryless") {
    const std::size_t d = 3, n_state = 3;
    BlockFixture fx(TransformKind::identity, n_state, d, 1);
    // a_raw = 0 -> evolution diag 0
    for (auto& v : fx.ps[fx.blk.a_raw].value.data) v = 0.0;
    // B projects only x_t (identity on the first d inputs), C = I, P = 0
    Tensor& b = fx.ps[fx.blk.b_in].value;
    std::fill(b.data.begin(), b.data.end(), 0.0);
    for (std::size_t j = 0; j < d; ++j) b.at(j, j) = 1.0;
    Tensor& c = fx.ps[fx.blk.c_out].value;
    std::fill(c.data.begin(), c.data.end(), 0.0);
    for (std::size_t j = 0; j < d; ++j) c.at(j, j) = 1.0;
    std::fill(fx.ps[fx.blk.p_out].value.data.begin(), fx.ps[fx.blk.p_out].value.data.end(), 0.0);

    Rng rng(2);
    std::vector<Tensor> frames{random_tensor(Shape{4, d}, rng), random_tensor(Shape{4, d}, rng)};
    Graph g;
    auto res = ssm_scan(g, fx.ps, fx.blk, as_leaves(g, frames), g.param(fx.ps, fx.mask_embed),
                        ScanOptions{});
    for (std::size_t t = 0; t < frames.size(); ++t)
        CHECK(max_abs_diff(res.bundle.enhanced[t].value(), frames[t]) < 1e-15);
}

TEST_CASE("scalar recurrence hand case: A=0.5, impulse input") {
    const std::size_t d = 1, n_state = 1;
    BlockFixture fx(TransformKind::identity, n_state, d, 3);
    // evolution diag = tanh(a_raw)*0.999 = 0.5
    fx.ps[fx.blk.a_raw].value.data[0] = std::atanh(0.5 / kStabilitySquash);
    fx.ps[fx.blk.b_in].value = Tensor(Shape{2, 1}, {1.0, 0.0});
    fx.ps[fx.blk.c_out].value = Tensor(Shape{1, 1}, {1.0});
    fx.ps[fx.blk.p_out].value = Tensor(Shape{1, 1}, {0.0});

    std::vector<Tensor> frames{Tensor(Shape{1, 1}, {1.0}), Tensor(Shape{1, 1}, {0.0}),
                               Tensor(Shape{1, 1}, {0.0})};
    Graph g;
    auto res = ssm_scan(g, fx.ps, fx.blk, as_leaves(g, frames), g.param(fx.ps, fx.mask_embed),
                        ScanOptions{});
    CHECK_THAT(res.bundle.enhanced[0].value().item(), Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(res.bundle.enhanced[1].value().item(), Catch::Matchers::WithinAbs(0.5, 1e-12));
    CHECK_THAT(res.bundle.enhanced[2].value().item(), Catch::Matchers::WithinAbs(0.25, 1e-12));
}

TEST_CASE("state after T steps equals the closed-form unroll") {
    const std::size_t d = 3, n_state = 5, tokens = 2, frames_n = 4;
    BlockFixture fx(TransformKind::identity, n_state, d, 4);
    // silence the prediction pathway so the input sequence is exogenous
    std::fill(fx.ps[fx.blk.p_out].value.data.begin(), fx.ps[fx.blk.p_out].value.data.end(), 0.0);

    Rng rng(9);
    std::vector<Tensor> frames;
    for (std::size_t t = 0; t < frames_n; ++t) frames.push_back(random_tensor(Shape{tokens, d}, rng));

    Graph g;
    auto res = ssm_scan(g, fx.ps, fx.blk, as_leaves(g, frames), g.param(fx.ps, fx.mask_embed),
                        ScanOptions{});

    // h_T = sum_i evo^(T-1-i) (.) (B^T [x_i; 0])
    const Tensor& a_raw = fx.ps[fx.blk.a_raw].value;
    const Tensor& b = fx.ps[fx.blk.b_in].value;
    Tensor expect(Shape{tokens, n_state});
    for (std::size_t i = 0; i < frames_n; ++i) {
        for (std::size_t tok = 0; tok < tokens; ++tok)
            for (std::size_t s = 0; s < n_state; ++s) {
                double drive = 0.0;
                for (std::size_t j = 0; j < d; ++j) drive += frames[i].at(tok, j) * b.at(j, s);
                double evo = std::tanh(a_raw.data[s]) * kStabilitySquash;
                expect.at(tok, s) +=
                    drive * std::pow(evo, static_cast<double>(frames_n - 1 - i));
            }
    }
    CHECK(max_abs_diff(res.final_state.value(), expect) < 1e-10);
}

TEST_CASE("scan equals the naive per-step reference bitwise") {
    for (auto kind : {TransformKind::identity, TransformKind::fft}) {
        const std::size_t d = 5, n_state = 6, tokens = 3, frames_n = 4;
        BlockFixture fx(kind, n_state, d, 11);
        Rng rng(13);
        std::vector<Tensor> frames;
        for (std::size_t t = 0; t < frames_n; ++t)
            frames.push_back(random_tensor(Shape{tokens, d}, rng));

        ScanOptions opt;
        opt.training = true;
        opt.mask_ratio = 0.4;
        opt.mask_seed = 77;

        Graph g;
        auto res = ssm_scan(g, fx.ps, fx.blk, as_leaves(g, frames),
                            g.param(fx.ps, fx.mask_embed), opt);

        auto mask = gen_token_mask(frames_n, tokens, opt.mask_ratio, opt.mask_seed);
        auto ref = oracle::ssm_scan_reference(fx.ps, fx.blk, frames,
                                              fx.ps[fx.mask_embed].value, mask);

        INFO("transform " << to_string(kind));
        for (std::size_t t = 0; t < frames_n; ++t) {
            CHECK(res.bundle.enhanced[t].value().data == ref.enhanced[t].data);
            if (t >= 1) CHECK(res.bundle.predicted[t].value().data == ref.predicted[t].data);
        }
        CHECK(res.final_state.value().data == ref.final_state.data);
    }
}

TEST_CASE("T=1 scan equals a single step with zero prediction input") {
    const std::size_t d = 4, n_state = 5, tokens = 3;
    BlockFixture fx(TransformKind::identity, n_state, d, 21);
    Rng rng(22);
    Tensor frame = random_tensor(Shape{tokens, d}, rng);

    Graph g;
    auto res = ssm_scan(g, fx.ps, fx.blk, {g.leaf(frame)}, g.param(fx.ps, fx.mask_embed),
                        ScanOptions{});

    Graph g2;
    Val evo = ssm_evolution_diag(g2, fx.ps, fx.blk);
    Val h0 = g2.leaf(Tensor(Shape{tokens, n_state}));
    Val zero_pred = g2.leaf(Tensor(Shape{tokens, d}));
    auto step = ssm_step(g2, fx.ps, fx.blk, evo, h0, g2.leaf(frame), zero_pred);
    CHECK(res.bundle.enhanced[0].value().data == step.y_enh.value().data);
    CHECK(res.final_state.value().data == step.h_next.value().data);

    Graph g3;
    auto aux = aux_losses(g3, res.bundle);
    CHECK(aux.future_warning);
    CHECK(aux.future.value().item() == 0.0);
}

TEST_CASE("identity and fft blocks agree on constant 1-channel signals") {
    const std::size_t n_state = 4, tokens = 3, frames_n = 3;
    BlockFixture id_fx(TransformKind::identity, n_state, 1, 31);
    BlockFixture fft_fx(TransformKind::fft, n_state, 1, 32);
    // embed the identity block's params into the fft block: real channels
    // carry them, imaginary channels are zeroed (length-1 DFT is the DC bin)
    fft_fx.ps[fft_fx.blk.a_raw].value = id_fx.ps[id_fx.blk.a_raw].value;
    const Tensor& b_id = id_fx.ps[id_fx.blk.b_in].value;  // [2 x N]
    Tensor& b_f = fft_fx.ps[fft_fx.blk.b_in].value;       // [4 x N]
    std::fill(b_f.data.begin(), b_f.data.end(), 0.0);
    for (std::size_t s = 0; s < n_state; ++s) {
        b_f.at(0, s) = b_id.at(0, s);  // x real
        b_f.at(2, s) = b_id.at(1, s);  // pred real
    }
    const Tensor& c_id = id_fx.ps[id_fx.blk.c_out].value;  // [N x 1]
    Tensor& c_f = fft_fx.ps[fft_fx.blk.c_out].value;       // [N x 2]
    std::fill(c_f.data.begin(), c_f.data.end(), 0.0);
    for (std::size_t s = 0; s < n_state; ++s) c_f.at(s, 0) = c_id.at(s, 0);
    const Tensor& p_id = id_fx.ps[id_fx.blk.p_out].value;
    Tensor& p_f = fft_fx.ps[fft_fx.blk.p_out].value;
    std::fill(p_f.data.begin(), p_f.data.end(), 0.0);
    for (std::size_t s = 0; s < n_state; ++s) p_f.at(s, 0) = p_id.at(s, 0);

    std::vector<Tensor> frames(frames_n, Tensor(Shape{tokens, 1}, 0.7));
    Graph g1, g2;
    auto res_id = ssm_scan(g1, id_fx.ps, id_fx.blk, as_leaves(g1, frames),
                           g1.param(id_fx.ps, id_fx.mask_embed), ScanOptions{});
    auto res_fft = ssm_scan(g2, fft_fx.ps, fft_fx.blk, as_leaves(g2, frames),
                            g2.param(fft_fx.ps, fft_fx.mask_embed), ScanOptions{});
    for (std::size_t t = 0; t < frames_n; ++t)
        CHECK(max_abs_diff(res_id.bundle.enhanced[t].value(),
                           res_fft.bundle.enhanced[t].value()) < 1e-9);
}

TEST_CASE("token mask: ratio 0 is the identity, fraction tracks the ratio, seeded") {
    auto empty = gen_token_mask(2, 50, 0.0, 5);
    for (const auto& row : empty)
        for (bool b : row) CHECK_FALSE(b);

    auto m1 = gen_token_mask(1, 1000, 0.5, 42);
    std::size_t cnt = 0;
    for (bool b : m1[0]) cnt += b ? 1 : 0;
    CHECK(cnt >= 450);
    CHECK(cnt <= 550);

    auto m2 = gen_token_mask(1, 1000, 0.5, 42);
    CHECK(m1 == m2);
    auto m3 = gen_token_mask(1, 1000, 0.5, 43);
    CHECK(m1 != m3);
}

TEST_CASE("masked rows take the embedding, kept rows are untouched") {
    Rng rng(55);
    Graph g;
    Tensor f = random_tensor(Shape{4, 3}, rng);
    Tensor emb = random_tensor(Shape{3}, rng);
    std::vector<bool> mask{false, true, false, true};
    Val out = apply_token_mask(g, g.leaf(f), mask, g.leaf(emb));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(out.value().at(i, j) == (mask[i] ? emb.data[j] : f.at(i, j)));
}

TEST_CASE("aux losses: zero residuals, hand value, non-negativity") {
    Graph g;
    FeatureBundle b;
    Rng rng(7);
    Tensor f0 = random_tensor(Shape{2, 3}, rng), f1 = random_tensor(Shape{2, 3}, rng);
    b.target = {g.leaf(f0), g.leaf(f1)};
    b.enhanced = {g.leaf(f0), g.leaf(f1)};         // F_hat == F
    b.predicted = {Val{}, g.leaf(f1)};             // F_tilde == shifted F
    auto aux = aux_losses(g, b);
    CHECK(aux.reconstruction.value().item() == 0.0);
    CHECK(aux.future.value().item() == 0.0);

    Graph g2;
    FeatureBundle single;
    single.target = {g2.leaf(Tensor(Shape{1, 1}, {0.0}))};
    single.enhanced = {g2.leaf(Tensor(Shape{1, 1}, {2.0}))};
    single.predicted = {Val{}};
    single.future_defined = false;
    auto aux2 = aux_losses(g2, single);
    CHECK_THAT(aux2.reconstruction.value().item(), Catch::Matchers::WithinAbs(4.0, 1e-15));
    CHECK(aux2.future_warning);

    Graph g3;
    FeatureBundle noisy;
    noisy.target = {g3.leaf(random_tensor(Shape{2, 2}, rng)),
                    g3.leaf(random_tensor(Shape{2, 2}, rng))};
    noisy.enhanced = {g3.leaf(random_tensor(Shape{2, 2}, rng)),
                      g3.leaf(random_tensor(Shape{2, 2}, rng))};
    noisy.predicted = {Val{}, g3.leaf(random_tensor(Shape{2, 2}, rng))};
    auto aux3 = aux_losses(g3, noisy);
    CHECK(aux3.reconstruction.value().item() > 0.0);
    CHECK(aux3.future.value().item() > 0.0);
}

TEST_CASE("gradients of L_r + L_f pass grad_check for every SSM param") {
    for (auto kind : {TransformKind::identity, TransformKind::fft}) {
        const std::size_t d = 2, n_state = 3, tokens = 2, frames_n = 3;
        BlockFixture fx(kind, n_state, d, 61);
        Rng rng(62);
        std::vector<Tensor> frames;
        for (std::size_t t = 0; t < frames_n; ++t)
            frames.push_back(random_tensor(Shape{tokens, d}, rng));

        auto loss_fn = [&](Graph& g) {
            ScanOptions opt;
            opt.training = true;
            opt.mask_ratio = 0.5;
            opt.mask_seed = 99;
            auto res = ssm_scan(g, fx.ps, fx.blk, as_leaves(g, frames),
                                g.param(fx.ps, fx.mask_embed), opt);
            auto aux = aux_losses(g, res.bundle);
            return add(aux.reconstruction, aux.future);
        };
        auto rep = grad_check_params(loss_fn, fx.ps,
                                     {fx.blk.a_raw, fx.blk.b_in, fx.blk.c_out, fx.blk.p_out,
                                      fx.mask_embed});
        INFO(to_string(kind) << ": " << rep.describe());
        CHECK(rep.pass(1e-4));
    }
}

TEST_CASE("hidden state stays bounded over 1e4 steps of unit random input") {
    const std::size_t d = 2, n_state = 8, tokens = 2;
    BlockFixture fx(TransformKind::identity, n_state, d, 71);
    Rng rng(72);
    Graph g;
    g.grad_enabled = false;
    Val evo = ssm_evolution_diag(g, fx.ps, fx.blk);
    Val h = g.leaf(Tensor(Shape{tokens, n_state}));
    Val pred = g.leaf(Tensor(Shape{tokens, d}));
    double peak = 0.0;
    for (int t = 0; t < 10000; ++t) {
        Val x = g.leaf(random_tensor(Shape{tokens, d}, rng));
        auto step = ssm_step(g, fx.ps, fx.blk, evo, h, x, pred);
        h = step.h_next;
        pred = step.y_pred;
        for (double v : h.value().data) {
            REQUIRE(std::isfinite(v));
            peak = std::max(peak, std::fabs(v));
        }
    }
    CHECK(peak < 1e6);
}

TEST_CASE("prediction channel feeds back emissions, never ground truth") {
    const std::size_t d = 3, n_state = 4, tokens = 2, frames_n = 5;
    BlockFixture fx(TransformKind::identity, n_state, d, 81);
    Rng rng(82);
    std::vector<Tensor> frames;
    for (std::size_t t = 0; t < frames_n; ++t) frames.push_back(random_tensor(Shape{tokens, d}, rng));

    Graph g;
    auto res = ssm_scan(g, fx.ps, fx.blk, as_leaves(g, frames), g.param(fx.ps, fx.mask_embed),
                        ScanOptions{});
    // consumed x_pred at step 0 is zero; afterwards exactly the previous emission
    for (double v : res.trace.pred_in[0].data) CHECK(v == 0.0);
    for (std::size_t t = 1; t < frames_n; ++t)
        CHECK(res.trace.pred_in[t].data == res.trace.pred_out[t - 1].data);

    // corrupting ground truth from frame j on leaves the prediction inputs
    // consumed up to j bitwise unchanged
    const std::size_t j = 2;
    std::vector<Tensor> corrupted = frames;
    for (std::size_t t = j; t < frames_n; ++t)
        for (auto& v : corrupted[t].data) v += 100.0;
    Graph g2;
    auto res2 = ssm_scan(g2, fx.ps, fx.blk, as_leaves(g2, corrupted),
                         g2.param(fx.ps, fx.mask_embed), ScanOptions{});
    for (std::size_t t = 0; t <= j; ++t)
        CHECK(res.trace.pred_in[t].data == res2.trace.pred_in[t].data);
}

TEST_CASE("ssm_step rejects a token-count change mid-scan") {
    const std::size_t d = 2, n_state = 3;
    BlockFixture fx(TransformKind::identity, n_state, d, 91);
    Graph g;
    Val evo = ssm_evolution_diag(g, fx.ps, fx.blk);
    Val h = g.leaf(Tensor(Shape{4, n_state}));
    Val x = g.leaf(Tensor(Shape{3, d}));
    Val p = g.leaf(Tensor(Shape{3, d}));
    CHECK_THROWS_WITH(ssm_step(g, fx.ps, fx.blk, evo, h, x, p),
                      Catch::Matchers::ContainsSubstring("token count"));
}
