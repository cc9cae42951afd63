#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace infovla {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Deterministic random stream. Gaussian draws use Box-Muller directly so the
// byte stream does not depend on the standard library's distribution
// implementation.
class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : gen_(splitmix64(seed ^ 0xA5A5A5A5DEADBEEFull)) {}

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        int v = static_cast<int>(uniform() * static_cast<double>(n));
        return v >= n ? n - 1 : v;
    }

    // Derives a child seed from a root and a path of stream labels, so every
    // consumer (suite, demos, per-stage training, per-episode eval) gets an
    // independent reproducible stream.
    static std::uint64_t derive(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
        std::uint64_t h = splitmix64(root);
        for (std::uint64_t p : path) {
            h = splitmix64(h ^ splitmix64(p + 0x9E3779B97F4A7C15ull));
        }
        return h;
    }

  private:
    std::mt19937_64 gen_;
};

}  // namespace infovla
