#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace transnetr {

// Deterministic PRNG with hand-rolled distributions so that identical seeds
// give identical streams on every build (the standard <random> distributions
// are implementation-defined). splitmix64 core.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n + 1) % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v > limit);
        return v % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; draws two uniforms per call, no cached spare so the stream
    // position is a pure function of the call count.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent stream derived from a seed and stream labels; used so that
    // e.g. the permutation of epoch k or the augmentation of step k depends
    // only on (seed, k) and never on how much of another stream was consumed.
    static Rng derive(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
        Rng mixer(seed);
        mixer.state_ ^= 0xA0761D6478BD642Full * (stream + 1);
        mixer.next_u64();
        mixer.state_ ^= 0xE7037ED1A0B428DBull * (index + 1);
        mixer.next_u64();
        return mixer;
    }

private:
    std::uint64_t state_;
};

inline std::vector<std::size_t> identity_permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    return p;
}

}  // namespace transnetr
