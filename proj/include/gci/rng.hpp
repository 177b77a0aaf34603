#ifndef GCI_RNG_HPP_
#define GCI_RNG_HPP_

#include <cstdint>
#include <vector>

#include "gci/tensor.hpp"

namespace gci {

/// Deterministic random generator: xoshiro256++ seeded through splitmix64.
/// The algorithm is fixed so that identical seeds produce identical streams
/// on every platform; no std:: engine is used anywhere in the library.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform double strictly inside (0,1): ((x >> 11) + 0.5) * 2^-53.
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n);
    /// Standard normal via Box-Muller on two uniform draws.
    double normal();

    Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi);
    Tensor normal_tensor(std::vector<std::size_t> shape);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_index(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    /// Stateless mixing of a seed with stream identifiers; used to derive
    /// independent per-sample generators.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                             std::uint64_t c = 0);

private:
    std::uint64_t state_[4];
};

}  // namespace gci

#endif  // GCI_RNG_HPP_
