#pragma once

#include <cmath>
#include <cstdint>

#include "percdiff/grid.hpp"

namespace pd {

// Counter-based generator built on splitmix64. A stream is keyed by
// (seed, a, b, c); draws depend only on the key and the per-stream counter,
// so results are independent of which order streams are consumed in.
class CounterRng {
  public:
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    explicit CounterRng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                        std::uint64_t c = 0) {
        key_ = mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
    }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * (++counter_)); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // (0, 1); safe as a log() argument
    double uniform_open() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive bounds. Modulo bias is < 2^-50 for the ranges used here.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    // Box-Muller; the spare is cached so pairs are consumed in a fixed order.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 6.28318530717958647692 * u2;
        spare_ = r * std::sin(th);
        have_spare_ = true;
        return r * std::cos(th);
    }

  private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Fixed stream ids keep independent uses of the same seed from colliding.
namespace streams {
inline constexpr std::uint64_t carrier = 1;
inline constexpr std::uint64_t scene = 2;
inline constexpr std::uint64_t shuffle = 3;
inline constexpr std::uint64_t weight_init = 4;
inline constexpr std::uint64_t timestep = 5;
inline constexpr std::uint64_t fit_subsample = 6;
inline constexpr std::uint64_t eval_draw = 7;
}  // namespace streams

inline Grid gaussian_grid(int h, int w, int c, CounterRng& rng) {
    Grid g(h, w, c);
    for (auto& e : g.v) e = rng.normal();
    return g;
}

}  // namespace pd
