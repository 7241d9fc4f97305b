#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace plansmooth {

// Deterministic standard-normal sampler. mt19937_64 output is fully pinned
// by the standard, and the Box-Muller transform below avoids the library
// normal_distribution whose stream is implementation defined.
class GaussianSampler {
  public:
    explicit GaussianSampler(std::uint64_t seed) : rng_(seed) {}

    double uniform() {  // in [0, 1)
        return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t raw() { return rng_(); }

  private:
    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace plansmooth
