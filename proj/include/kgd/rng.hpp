#pragma once

// xoshiro256++ (Blackman & Vigna, 2019) seeded through splitmix64.
// Every stochastic call in the library takes an explicit Rng; there is
// no global generator state anywhere.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <vector>

namespace kgd {

inline uint64_t splitmix64_next(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) {
            word = splitmix64_next(sm);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, 1) with 53 bits of mantissa.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Unbiased draw from [0, n) by rejection.
    uint64_t bounded(uint64_t n) {
        if (n == 0) {
            throw std::invalid_argument("Rng::bounded: n must be positive");
        }
        const uint64_t threshold = -n % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) {
                return r % n;
            }
        }
    }

    // Inclusive range.
    int uniform_int(int lo, int hi) {
        if (hi < lo) {
            throw std::invalid_argument("Rng::uniform_int: empty range");
        }
        return lo + static_cast<int>(bounded(static_cast<uint64_t>(hi - lo) + 1));
    }

    // Box-Muller without a cached spare, so stream position is a pure
    // function of the number of calls made.
    double normal(double mu = 0.0, double sigma = 1.0) {
        double u1 = uniform01();
        while (u1 == 0.0) {
            u1 = uniform01();
        }
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mu + sigma * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Uniform random permutation of 0..k-1.
    std::vector<int> permutation(int k) {
        std::vector<int> p(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            p[static_cast<size_t>(i)] = i;
        }
        shuffle(p);
        return p;
    }

private:
    static uint64_t rotl(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    uint64_t state_[4];
};

// Deterministic stream derivation: result depends only on the seed and the
// salts, never on worker count or call order elsewhere.
inline uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> salts) {
    uint64_t h = seed;
    splitmix64_next(h);
    for (uint64_t s : salts) {
        h ^= s + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        splitmix64_next(h);
    }
    uint64_t st = h;
    return splitmix64_next(st);
}

}  // namespace kgd
