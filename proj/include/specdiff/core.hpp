#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace specdiff {

/** Dense row-major H x W grid of doubles. */
struct Plane {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Plane() = default;
    Plane(int r, int c, double fill = 0.0) : rows(r), cols(c), v(size_t(r) * c, fill) {}

    double& at(int r, int c) { return v[size_t(r) * cols + c]; }
    double at(int r, int c) const { return v[size_t(r) * cols + c]; }
    size_t size() const { return v.size(); }
    bool same_shape(const Plane& o) const { return rows == o.rows && cols == o.cols; }

    double sum() const {
        double s = 0;
        for (double x : v) s += x;
        return s;
    }
    double max_value() const {
        double m = v.empty() ? 0.0 : v[0];
        for (double x : v) m = std::max(m, x);
        return m;
    }
};

/** Interleaved H x W x C image, C is 1 (gray) or 3 (RGB), values nominally in [0,1]. */
struct ImageBuf {
    int rows = 0;
    int cols = 0;
    int channels = 1;
    std::vector<double> v;

    ImageBuf() = default;
    ImageBuf(int r, int c, int ch = 1, double fill = 0.0)
        : rows(r), cols(c), channels(ch), v(size_t(r) * c * ch, fill) {}

    double& at(int r, int c, int ch = 0) { return v[(size_t(r) * cols + c) * channels + ch]; }
    double at(int r, int c, int ch = 0) const { return v[(size_t(r) * cols + c) * channels + ch]; }
};

/** Correlation surface over displacement bins. Nonnegative after normalization;
    temperature records the softmax gain used to normalize it (0 = raw). */
struct CorrMap {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;
    double temperature = 0.0;

    CorrMap() = default;
    CorrMap(int r, int c, double fill = 0.0) : rows(r), cols(c), v(size_t(r) * c, fill) {}

    double& at(int r, int c) { return v[size_t(r) * cols + c]; }
    double at(int r, int c) const { return v[size_t(r) * cols + c]; }
    size_t size() const { return v.size(); }
    double max_value() const {
        double m = v.empty() ? 0.0 : v[0];
        for (double x : v) m = std::max(m, x);
        return m;
    }
};

/** Defect probability map, values in [0,1]. */
using DefectMap = Plane;

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 both as a stream and as a seed/key mixer, so
// independent substreams can be derived from (seed, index) pairs without
// sharing state. Identical across platforms.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed) : state(seed) {}
    /** Substream keyed by (seed, index): reproducible regardless of draw order elsewhere. */
    Rng(uint64_t seed, uint64_t index) : state(seed) {
        state = splitmix64(state) ^ (index * 0x9e3779b97f4a7c15ULL);
        (void)next_u64();
    }

    uint64_t next_u64() { return splitmix64(state); }
    /** Uniform in [0,1) with 53-bit resolution. */
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }
    /** Uniform integer in [lo, hi] inclusive. */
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
    }
    double normal() {
        // Box-Muller; one value per call keeps the stream layout simple.
        double u1 = std::max(next_double(), 1e-300);
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }
};

constexpr double kPi = 3.14159265358979323846;

}  // namespace specdiff
