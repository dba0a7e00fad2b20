#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace p2l {

// splitmix64, the fixed mixing function behind all seed derivation. Stage
// seeds and per-item seeds are derived with this so another implementation
// can reproduce them from the master seed alone.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Stage seed = splitmix64(master ^ splitmix64(stage_index + 1)).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stage_index) {
    return splitmix64(master ^ splitmix64(stage_index + 1));
}

// Further per-item derivation (dataset index, generation index, ...).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = seed;
    s = splitmix64(s ^ splitmix64(a + 0x9E37));
    s = splitmix64(s ^ splitmix64(b + 0x79B9));
    s = splitmix64(s ^ splitmix64(c + 0x7F4A));
    return s;
}

// mt19937_64 is bit-exact per the C++ standard; the distributions below are
// hand-rolled because the std:: ones are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        // rejection sampling keeps this exactly uniform
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = eng_(); } while (x >= limit);
        return static_cast<std::size_t>(x % n);
    }

    // Standard normal via Box-Muller (cached spare kept for the pair).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::vector<double> normal_vector(std::size_t n, double stddev) {
        std::vector<double> v(n);
        for (auto& x : v) x = stddev * normal();
        return v;
    }

    // Fisher-Yates with our own index(); std::shuffle is not reproducible
    // across standard libraries.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace p2l
