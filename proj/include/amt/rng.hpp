#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace amt {

// Seeded pseudo-random source with a fully pinned draw pipeline.
//
// The raw stream comes from std::mt19937_64, whose output sequence is fixed
// by the standard. All floating-point draws are derived from that stream with
// exactly-rounded IEEE operations only (no libm transcendentals), so a given
// seed yields the same values on every platform:
//   uniform01: top 53 bits scaled by 2^-53
//   normal:    Irwin-Hall, sum of 12 uniforms minus 6
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    static std::string algorithm() { return "mt19937_64/irwin-hall-v1"; }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1).
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Approximately standard normal; exact given the seed.
    double normal() {
        double s = 0.0;
        for (int i = 0; i < 12; ++i) s += uniform01();
        return s - 6.0;
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Uniform integer on [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection-free modulo is fine here: n is tiny versus 2^64, and the
        // draw stream stays platform-independent.
        return engine_() % n;
    }

  private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace amt
