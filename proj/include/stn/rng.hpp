#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace stn {

// Seeded generator with explicit uniform/normal conversions. mt19937_64's
// output sequence is pinned by the standard; the conversions below avoid the
// implementation-defined std distributions so streams are identical across
// compilers.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return gen_() % n; }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Fisher-Yates with the deterministic generator above.
template <typename SeqT>
void shuffle(SeqT& seq, Rng& rng) {
    for (size_t i = seq.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.below(i));
        std::swap(seq[i - 1], seq[j]);
    }
}

}  // namespace stn
