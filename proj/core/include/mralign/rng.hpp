#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace mralign {

// Deterministic splitmix64 generator. We avoid std::mt19937 plus the standard
// distributions here because training resume has to be bit-exact from only
// (seed, stream, step), and distribution output is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    static uint64_t mix(uint64_t a, uint64_t b) {
        // one splitmix64 round over the pair, good enough to decorrelate streams
        uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // uniform in [0, 1)
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n), n > 0
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // uniform in [lo, hi)
    double next_range(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

    // Box-Muller, one value per call (second value discarded to keep streams simple)
    double next_normal() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Knuth-style Poisson sampler, fine for small lambda
    int next_poisson(double lambda) {
        double limit = std::exp(-lambda);
        double prod = next_uniform();
        int n = 0;
        while (prod > limit) {
            prod *= next_uniform();
            ++n;
        }
        return n;
    }

    // in-place Fisher-Yates
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// Named substreams hang off a single run seed so ablation arms that share the
// seed see identical data while touching disjoint random sequences elsewhere.
enum class Stream : uint64_t {
    data = 1,
    init = 2,
    masking = 3,
    sampling = 4,
};

inline Rng substream(uint64_t seed, Stream s, uint64_t step = 0) {
    return Rng(Rng::mix(Rng::mix(seed, static_cast<uint64_t>(s)), step));
}

} // namespace mralign
