#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace lorra {

// 64-bit FNV-1a; stable across platforms, used for seed derivation and hashing.
std::uint64_t fnv1a64(std::string_view text);

// Derives an independent child seed from a root seed and a component name.
// All randomness in the project flows through this function.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name);

// Thin wrapper over mt19937_64 with hand-written distributions, so draws are
// identical across standard library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 bits of precision.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n); n > 0.
    std::uint64_t below(std::uint64_t n);
    // Uniform integer in [lo, hi] inclusive.
    int between(int lo, int hi);
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(values[i - 1], values[j]);
        }
    }

    // Index drawn with probability proportional to weights (all >= 0, sum > 0).
    std::size_t weighted(const std::vector<double>& weights);

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lorra
