#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace peml {

// Counter-based hashing and a small sequential PRNG. All randomness in the
// project flows from a single top-level seed through named substreams, so
// any component can be re-run in isolation and any forward pass replayed.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_u64(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ b); }

inline uint64_t hash_u64(uint64_t a, uint64_t b, uint64_t c) {
    return splitmix64(hash_u64(a, b) ^ c);
}

inline uint64_t hash_u64(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    return splitmix64(hash_u64(a, b, c) ^ d);
}

// FNV-1a over the stream name, mixed with the global seed.
inline uint64_t substream_seed(uint64_t seed, std::string_view name) {
    uint64_t h = 1469598103934665603ULL;
    for (char ch : name) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ULL;
    }
    return hash_u64(seed, h);
}

// Uniform double in [0, 1) from 53 random bits.
inline double u64_to_unit(uint64_t u) {
    return static_cast<double>(u >> 11) * 0x1.0p-53;
}

// Uniform double in (0, 1), safe for log().
inline double u64_to_open_unit(uint64_t u) {
    return (static_cast<double>(u >> 11) + 0.5) * 0x1.0p-53;
}

// Stateless dropout-mask key: (substream seed, step, tensor id, element).
inline bool dropout_keep(uint64_t seed, uint64_t step, uint64_t tensor_id, uint64_t elem,
                         double p) {
    return u64_to_unit(hash_u64(seed, step, tensor_id, elem)) >= p;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    double uniform() { return u64_to_unit(next_u64()); }
    double uniform_open() { return u64_to_open_unit(next_u64()); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one fresh pair of uniforms per call keeps the stream
    // position independent of call parity.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform_open();
        double u2 = uniform();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
        return mean + stddev * z;
    }

    double gumbel() { return -std::log(-std::log(uniform_open())); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    Rng split(std::string_view name) const { return Rng(substream_seed(state_, name)); }

private:
    uint64_t state_;
};

}  // namespace peml
