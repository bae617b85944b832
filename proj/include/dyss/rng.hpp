#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace dyss {

// splitmix64; used to derive independent streams from (seed, tags...) so that
// every consumer of randomness is a pure function of the run seed.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic generator with hand-rolled distributions. std:: distributions
// are implementation-defined, which would tie dataset bytes to the standard
// library version; this keeps them a function of the seed alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix64(seed ^ 0x2545f4914f6cdd1dull)) {}

    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
        std::uint64_t s = seed;
        for (std::uint64_t t : tags) s = mix64(s ^ mix64(t + 0x632be59bd9b4e019ull));
        return Rng(s);
    }

    std::uint64_t next_u64() {
        state_ = mix64(state_);
        return state_;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    // Box-Muller; consumes two uniforms per pair, caches the second.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mu, double sigma) { return mu + sigma * gaussian(); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace dyss
