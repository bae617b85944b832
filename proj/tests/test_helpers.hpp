#pragma once

#include <catch2/catch_amalgamated.hpp>

#include "dyss/autodiff.hpp"
#include "dyss/rng.hpp"
#include "dyss/tensor.hpp"

namespace dysstest {

inline dyss::Tensor random_tensor(dyss::Shape s, dyss::Rng& rng, double lo = -1.0,
                                  double hi = 1.0) {
    dyss::Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

inline dyss::Tensor gaussian_tensor(dyss::Shape s, dyss::Rng& rng, double sigma = 1.0) {
    dyss::Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.gaussian(0.0, sigma);
    return t;
}

// Scalar-reduce an op output against fixed random weights so no component of
// the Jacobian can hide from the check.
inline dyss::Val weighted_sum(dyss::Graph& g, dyss::Val v, std::uint64_t seed) {
    dyss::Rng rng(seed);
    dyss::Tensor w(v.shape());
    for (auto& x : w.data) x = rng.uniform(-1.0, 1.0);
    return dyss::sum(dyss::mul(v, g.leaf(std::move(w))));
}

inline double max_abs_diff(const dyss::Tensor& a, const dyss::Tensor& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace dysstest
