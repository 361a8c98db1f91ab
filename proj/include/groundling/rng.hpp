#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "groundling/common.hpp"

namespace groundling {

// Deterministic RNG with counter-based stream splitting. Every random draw in
// the project flows from a single root seed through derive_seed(), so runs are
// reproducible bit-for-bit regardless of platform or library version (no
// std::*_distribution, whose outputs are implementation-defined).

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Child stream seed = mix(root, label, index). Labels name subsystems
// ("data/detection", "init", "mlm", ...), the index is the per-stream counter.
inline uint64_t derive_seed(uint64_t root, std::string_view label, uint64_t index = 0) {
    uint64_t h = fnv1a64(label, root ^ 0x9e3779b97f4a7c15ull);
    uint64_t s = h ^ (index * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull);
    splitmix64(s);
    return splitmix64(s);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw PreconditionError("uniform_int: n must be positive");
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // Box-Muller with cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    Rng split(std::string_view label, uint64_t index = 0) const {
        return Rng(derive_seed(state_, label, index));
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace groundling
