#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace fedseg {

// FNV-1a, also used for config fingerprints in reports.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 14695981039346656037ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic random stream. The uniform/normal mappings are implemented
// here rather than with std:: distributions so that draws are identical
// across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(splitmix64(seed)) {}

    // Independent, well-separated stream derived from (seed, tag, index).
    static Rng stream(uint64_t seed, std::string_view tag, uint64_t index = 0) {
        uint64_t h = fnv1a64(tag);
        return Rng(splitmix64(seed ^ splitmix64(h + 0x9e3779b97f4a7c15ull * (index + 1))));
    }

    uint64_t next_u64() { return engine_(); }

    // Uniform on [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller with a cached spare value.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fedseg
