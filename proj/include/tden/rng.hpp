#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace tden {

// Splittable counter-free PRNG built on SplitMix64. Every stochastic
// component takes an explicit Rng (or a seed to derive one); nothing in the
// library touches global RNG state. Streams derived via derive(seed, stream)
// are independent for practical purposes and reproducible across runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // 53-bit resolution double in [0, 1).
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // Box-Muller with cached spare; avoids std::normal_distribution so the
    // stream is identical across standard library implementations.
    double normal(double mean = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * sigma;
        }
        const double two_pi = 6.283185307179586;
        double u = 1.0 - uniform01();
        double v = uniform01();
        double r = std::sqrt(-2.0 * std::log(u));
        spare_ = r * std::sin(two_pi * v);
        has_spare_ = true;
        return mean + r * std::cos(two_pi * v) * sigma;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    // Independent child stream; derive(seed, i) == derive(seed, i) always.
    Rng split(std::uint64_t stream) const { return Rng(derive(state_, stream)); }

    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ull * (stream + 0x632be59bd9b4e019ull));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace tden
