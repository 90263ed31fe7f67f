#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gm3 {

// ---------------------------------------------------------------------------
// Errors. Contract violations throw; the CLI maps them to exit code 1.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape / dimension mismatches (names both shapes in the message).
struct DimensionError : Error {
    using Error::Error;
};

// Violated preconditions or misuse of an API.
struct ContractError : Error {
    using Error::Error;
};

// Non-finite values detected in checked mode, or training divergence.
struct NumericError : Error {
    using Error::Error;
};

// File format / filesystem problems.
struct IoError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 has a fully specified engine but the
// standard distributions are implementation-defined, so all sampling here is
// hand-rolled on top of the raw 64-bit stream. Identical seeds give identical
// streams on every platform.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : s_{} { reseed(seed); }

    void reseed(uint64_t seed) {
        // xoshiro256** state from splitmix64, per the reference initializer.
        uint64_t x = seed;
        for (auto& w : s_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            w = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    int64_t below(int64_t n) {
        if (n <= 0) throw ContractError("Rng::below: n must be positive");
        return int64_t(uniform() * double(n)) % n;
    }

    // Standard normal via Box-Muller (deterministic, no cached spare).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
            std::swap(v[size_t(i)], v[size_t(below(i + 1))]);
        }
    }

    // k distinct indices from [0, n), ascending order.
    std::vector<int> sample_indices(int n, int k);

    // Independent child stream; stable under call order.
    Rng child(uint64_t stream_id) const {
        return Rng(splitmix64(s_[0] ^ splitmix64(stream_id + 0x51ab5137ull)));
    }

    // Serializable state (checkpoint resume).
    std::vector<uint64_t> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::vector<uint64_t>& st) {
        if (st.size() != 4) throw ContractError("Rng::set_state: expected 4 words");
        for (int i = 0; i < 4; ++i) s_[i] = st[size_t(i)];
    }

private:
    uint64_t s_[4];
};

// ---------------------------------------------------------------------------
// Misc small utilities.
// ---------------------------------------------------------------------------

class Stopwatch {
public:
    Stopwatch() : start_(Clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(Clock::now() - start_).count();
    }
    void restart() { start_ = Clock::now(); }

private:
    using Clock = std::chrono::steady_clock;
    Clock::time_point start_;
};

// FNV-1a over a byte range; used for input hashes in run manifests and the
// frozen-weights checksum.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace gm3
