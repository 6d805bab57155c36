#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tb {

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions below are hand-rolled so streams are identical across
// standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(split_seed(seed)) {}

    uint64_t next_u64() {
        // xorshift* -- small, fast, reproducible
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545F4914F6CDD1DULL;
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        // rejection-free modulo is fine here; n is tiny relative to 2^64
        return next_u64() % n;
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        // Box-Muller, no cached spare (keeps the stream position obvious)
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent child stream, e.g. per (model, attack) cell
    Rng fork(uint64_t salt) const {
        uint64_t x = state_ ^ (salt * 0x9E3779B97F4A7C15ULL + 0x7F4A7C15ULL);
        return Rng(x);
    }

private:
    static uint64_t split_seed(uint64_t s) {
        // splitmix64 step so seeds 0,1,2,... give unrelated states
        s += 0x9E3779B97F4A7C15ULL;
        s = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9ULL;
        s = (s ^ (s >> 27)) * 0x94D049BB133111EBULL;
        return (s ^ (s >> 31)) | 1ULL;
    }
    uint64_t state_;
};

// FNV-1a, used for content hashes in manifests and checkpoint blobs.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(s.data(), s.size(), h);
}

std::string hex64(uint64_t v);

using Token = int32_t;
using TokenSeq = std::vector<Token>;
using TokenBatch = std::vector<TokenSeq>;

}  // namespace tb
