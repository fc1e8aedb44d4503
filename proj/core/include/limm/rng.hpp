#pragma once

// Seeded RNG with hand-rolled distributions so that streams are identical
// across standard library implementations.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace limm {

class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int below(int n) { return static_cast<int>(eng_() % static_cast<std::uint64_t>(n)); }

    /// Standard normal (Box-Muller, spare cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * M_PI * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    /// Fisher-Yates shuffle.
    template <class V>
    void shuffle(V& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            const int j = below(i + 1);
            std::swap(v[i], v[j]);
        }
    }

    /// k distinct values from [0, n), order randomized.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> all(n);
        for (int i = 0; i < n; ++i) all[i] = i;
        shuffle(all);
        all.resize(k);
        return all;
    }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0;
    bool has_spare_ = false;
};

}  // namespace limm
