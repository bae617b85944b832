#include <catch2/catch_amalgamated.hpp>

#include "dyss/autodiff.hpp"
#include "dyss/grad_check.hpp"
#include "dyss/rng.hpp"

#include "test_helpers.hpp"

using namespace dyss;
using dysstest::gaussian_tensor;
using dysstest::max_abs_diff;
using dysstest::random_tensor;
using dysstest::weighted_sum;

TEST_CASE("matmul identity leaves a 3x3 matrix unchanged") {
    Rng rng(7);
    Graph g;
    Tensor eye(Shape{3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    Tensor m = random_tensor(Shape{3, 3}, rng);
    Val out = matmul(g.leaf(eye), g.leaf(m));
    CHECK(max_abs_diff(out.value(), m) == 0.0);
}

TEST_CASE("matmul hand case") {
    Graph g;
    Val a = g.leaf(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
    Val b = g.leaf(Tensor(Shape{2, 1}, {1, 1}));
    Val c = matmul(a, b);
    CHECK(c.value().at(0, 0) == 3.0);
    CHECK(c.value().at(1, 0) == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Graph g;
    Val a = g.leaf(Tensor(Shape{2, 3}));
    Val b = g.leaf(Tensor(Shape{2, 2}));
    CHECK_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("[2x3]") &&
                                        Catch::Matchers::ContainsSubstring("[2x2]"));
}

TEST_CASE("gradient of sum(A.B) wrt A is the row-broadcast of B's column sums") {
    Rng rng(11);
    Tensor a = random_tensor(Shape{3, 4}, rng);
    Tensor b = random_tensor(Shape{4, 5}, rng);
    Graph g;
    Val av = g.leaf(a), bv = g.leaf(b);
    g.backward(sum(matmul(av, bv)));
    const Tensor& ga = g.grad_of(av);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double rowsum = 0.0;
            for (std::size_t j = 0; j < 5; ++j) rowsum += b.at(k, j);
            CHECK_THAT(ga.at(i, k), Catch::Matchers::WithinAbs(rowsum, 1e-12));
        }

    auto f = [](Graph&, const std::vector<Val>& in) { return sum(matmul(in[0], in[1])); };
    auto rep = grad_check(f, {a, b});
    CHECK(rep.pass(1e-6));
}

TEST_CASE("matmul associativity on random 4x4 chains") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        Graph g;
        Val a = g.leaf(random_tensor(Shape{4, 4}, rng));
        Val b = g.leaf(random_tensor(Shape{4, 4}, rng));
        Val c = g.leaf(random_tensor(Shape{4, 4}, rng));
        Val left = matmul(matmul(a, b), c);
        Val right = matmul(a, matmul(b, c));
        CHECK(max_abs_diff(left.value(), right.value()) < 1e-10);
    }
}

TEST_CASE("layer_norm zero-variance row goes through the epsilon path") {
    Graph g;
    Val x = g.leaf(Tensor(Shape{1, 4}, {3.0, 3.0, 3.0, 3.0}));
    Val gain = g.leaf(Tensor(Shape{4}, 1.0));
    Val bias = g.leaf(Tensor(Shape{4}, 0.0));
    Val out = layer_norm_rows(x, gain, bias);
    for (double v : out.value().data) CHECK(v == 0.0);
}

TEST_CASE("layer_norm of [1,3] is [-1,1] up to epsilon") {
    Graph g;
    Val x = g.leaf(Tensor(Shape{1, 2}, {1.0, 3.0}));
    Val gain = g.leaf(Tensor(Shape{2}, 1.0));
    Val bias = g.leaf(Tensor(Shape{2}, 0.0));
    Val out = layer_norm_rows(x, gain, bias);
    CHECK_THAT(out.value().data[0], Catch::Matchers::WithinAbs(-1.0, 1e-5));
    CHECK_THAT(out.value().data[1], Catch::Matchers::WithinAbs(1.0, 1e-5));
}

TEST_CASE("layer_norm gradient vs finite differences") {
    Rng rng(23);
    Tensor x = random_tensor(Shape{3, 5}, rng);
    Tensor gain = random_tensor(Shape{5}, rng, 0.5, 1.5);
    Tensor bias = random_tensor(Shape{5}, rng);
    auto f = [](Graph& gr, const std::vector<Val>& in) {
        return dysstest::weighted_sum(gr, layer_norm_rows(in[0], in[1], in[2]), 5);
    };
    auto rep = grad_check(f, {x, gain, bias});
    INFO(rep.describe());
    CHECK(rep.pass(1e-4));
}

TEST_CASE("activation trivia") {
    Graph g;
    Val x = g.leaf(Tensor(Shape{1, 2}, {-1.0, 2.0}));
    Val r = relu(x);
    CHECK(r.value().data[0] == 0.0);
    CHECK(r.value().data[1] == 2.0);

    Val s = sigmoid(g.leaf(Tensor::scalar(0.0)));
    CHECK_THAT(s.value().item(), Catch::Matchers::WithinAbs(0.5, 1e-15));

    Val sm = softmax_rows(g.leaf(Tensor(Shape{1, 4}, 3.0)));
    for (double v : sm.value().data) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.25, 1e-15));
}

namespace {

struct OpCase {
    const char* name;
    std::function<GradCheckReport(std::uint64_t)> run;
};

GradCheckReport check_unary(std::uint64_t seed, const std::function<Val(Val)>& op, double lo,
                            double hi) {
    Rng rng(seed);
    Tensor x = random_tensor(Shape{3, 4}, rng, lo, hi);
    auto f = [&](Graph& gr, const std::vector<Val>& in) {
        return weighted_sum(gr, op(in[0]), seed + 91);
    };
    return grad_check(f, {x});
}

}  // namespace

TEST_CASE("grad_check sweeps every exported kernel op over 20 seeds") {
    std::vector<OpCase> cases = {
        {"add",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{3, 4}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, add(in[0], in[1]), s);
                 },
                 {a, b});
         }},
        {"sub",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{3, 4}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, sub(in[0], in[1]), s);
                 },
                 {a, b});
         }},
        {"mul",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{3, 4}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, mul(in[0], in[1]), s);
                 },
                 {a, b});
         }},
        {"matmul",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{4, 2}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, matmul(in[0], in[1]), s);
                 },
                 {a, b});
         }},
        {"scale", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return scale(v, -1.7); }, -1, 1);
         }},
        {"add_scalar", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return add_scalar(v, 0.3); }, -1, 1);
         }},
        {"relu", [](std::uint64_t s) {
             // keep entries away from the kink
             return check_unary(s, [](Val v) { return relu(add_scalar(v, 2.0)); }, 0.1, 1.0);
         }},
        {"sigmoid", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return sigmoid(v); }, -2, 2);
         }},
        {"tanh", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return dyss::tanh(v); }, -2, 2);
         }},
        {"exp", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return dyss::exp(v); }, -1, 1);
         }},
        {"log", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return dyss::log(v); }, 0.5, 2.0);
         }},
        {"abs", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return dyss::abs(v); }, 0.2, 1.0);
         }},
        {"sin", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return dyss::sin(v); }, -2, 2);
         }},
        {"cos", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return dyss::cos(v); }, -2, 2);
         }},
        {"pow_const", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return pow_const(v, 2.0); }, 0.3, 1.5);
         }},
        {"atan2",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor y = random_tensor(Shape{3, 2}, rng, 0.3, 1.0);
             Tensor x = random_tensor(Shape{3, 2}, rng, 0.3, 1.0);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, dyss::atan2(in[0], in[1]), s);
                 },
                 {y, x});
         }},
        {"sum", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return reshape(sum(v), Shape{1, 1}); }, -1, 1);
         }},
        {"mean", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return reshape(mean(v), Shape{1, 1}); }, -1, 1);
         }},
        {"row_mean", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return reshape(row_mean(v), Shape{3, 1}); }, -1, 1);
         }},
        {"row_max", [](std::uint64_t s) {
             // random draws never tie, so the subgradient is exact
             return check_unary(s, [](Val v) { return reshape(row_max(v), Shape{3, 1}); }, -1, 1);
         }},
        {"transpose", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return transpose(v); }, -1, 1);
         }},
        {"softmax_rows", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return softmax_rows(v); }, -2, 2);
         }},
        {"reshape", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return reshape(v, Shape{4, 3}); }, -1, 1);
         }},
        {"slice_cols", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return slice_cols(v, 1, 2); }, -1, 1);
         }},
        {"gather_rows", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return gather_rows(v, {2, 0, 2}); }, -1, 1);
         }},
        {"wrap_col", [](std::uint64_t s) {
             return check_unary(s, [](Val v) { return wrap_col(v, 1); }, -1.5, 1.5);
         }},
        {"concat_cols",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 2}, rng), b = random_tensor(Shape{3, 3}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, concat_cols(in[0], in[1]), s);
                 },
                 {a, b});
         }},
        {"concat_rows",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{2, 3}, rng), b = random_tensor(Shape{4, 3}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, concat_rows({in[0], in[1]}), s);
                 },
                 {a, b});
         }},
        {"add_rowvec",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 4}, rng), v = random_tensor(Shape{4}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, add_rowvec(in[0], in[1]), s);
                 },
                 {a, v});
         }},
        {"mul_rowvec",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 4}, rng), v = random_tensor(Shape{4}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, mul_rowvec(in[0], in[1]), s);
                 },
                 {a, v});
         }},
        {"sub_colvec",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 4}, rng), v = random_tensor(Shape{3}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, sub_colvec(in[0], in[1]), s);
                 },
                 {a, v});
         }},
        {"mul_colvec",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor a = random_tensor(Shape{3, 4}, rng), v = random_tensor(Shape{3}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, mul_colvec(in[0], in[1]), s);
                 },
                 {a, v});
         }},
        {"layer_norm_rows",
         [](std::uint64_t s) {
             Rng rng(s);
             Tensor x = random_tensor(Shape{3, 5}, rng);
             Tensor gn = random_tensor(Shape{5}, rng, 0.5, 1.5);
             Tensor bs = random_tensor(Shape{5}, rng);
             return grad_check(
                 [&](Graph& g, const std::vector<Val>& in) {
                     return weighted_sum(g, layer_norm_rows(in[0], in[1], in[2]), s);
                 },
                 {x, gn, bs});
         }},
    };

    for (const auto& c : cases) {
        double worst = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            auto rep = c.run(seed);
            INFO(c.name << " seed " << seed << ": " << rep.describe());
            REQUIRE(rep.analytic_finite);
            worst = std::max(worst, rep.max_rel_err);
        }
        INFO(c.name << " worst rel err " << worst);
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("backward of a reused tensor equals the sum of per-use gradients") {
    Rng rng(3);
    Tensor x = random_tensor(Shape{2, 3}, rng);

    Graph g1;
    Val a = g1.leaf(x);
    g1.backward(sum(add(mul(a, a), scale(a, 2.0))));  // same leaf used three times

    Graph g2;
    Val b1 = g2.leaf(x), b2 = g2.leaf(x), b3 = g2.leaf(x);
    g2.backward(sum(add(mul(b1, b2), scale(b3, 2.0))));

    Tensor combined(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i)
        combined.data[i] = g2.grad_of(b1).data[i] + g2.grad_of(b2).data[i] +
                           g2.grad_of(b3).data[i];
    CHECK(max_abs_diff(g1.grad_of(a), combined) < 1e-14);
}

TEST_CASE("param gradients accumulate across backward passes until cleared") {
    ParamStore ps;
    int pid = ps.add("w", Tensor(Shape{2, 2}, {1, 2, 3, 4}));

    for (int pass = 0; pass < 2; ++pass) {
        Graph g;
        Val w = g.param(ps, pid);
        g.backward(sum(mul(w, w)));
        g.add_param_grads(ps);
    }
    // d/dw sum(w*w) = 2w, accumulated twice = 4w
    for (std::size_t i = 0; i < 4; ++i)
        CHECK_THAT(ps[pid].grad.data[i],
                   Catch::Matchers::WithinAbs(4.0 * ps[pid].value.data[i], 1e-12));

    ps.zero_grads();
    for (double v : ps[pid].grad.data) CHECK(v == 0.0);
}

TEST_CASE("grad_check reports a non-finite analytic gradient with its index") {
    Tensor x(Shape{1, 3}, {1.0, 0.0, 4.0});  // d sqrt / dx at 0 is infinite
    auto f = [](Graph&, const std::vector<Val>& in) { return sum(pow_const(in[0], 0.5)); };
    auto rep = grad_check(f, {x});
    CHECK_FALSE(rep.analytic_finite);
    CHECK(rep.worst_entry == 1);
    CHECK_THAT(rep.describe(), Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("linear layer gradient is exact to 1e-6") {
    Rng rng(17);
    Tensor x = random_tensor(Shape{4, 3}, rng);
    Tensor w = random_tensor(Shape{3, 2}, rng);
    Tensor b = random_tensor(Shape{2}, rng);
    auto f = [](Graph& g, const std::vector<Val>& in) {
        return weighted_sum(g, linear(in[0], in[1], in[2]), 123);
    };
    auto rep = grad_check(f, {x, w, b});
    INFO(rep.describe());
    CHECK(rep.pass(1e-6));
}
