#ifndef GCI_DIFFOPS_HPP_
#define GCI_DIFFOPS_HPP_

#include <cstdint>
#include <vector>

#include "gci/gradcheck.hpp"
#include "gci/tensor.hpp"

namespace gci {

/// A checkable op together with the deterministic fixture it is evaluated at.
struct RegisteredOp {
    DiffOp op;
    std::vector<Tensor> params;
};

/// The repository's standard registry: every hand-written backward pass wired
/// to a seeded fixture. Fixtures are resampled internally away from
/// non-smooth points (degenerate spectra, hinge boundaries, max ties, kinks)
/// where finite differences are meaningless.
///
/// Ops: conv2d, global_avg_pool, affinity, assemble_kernel, nuclear_norm,
/// counterfactual_ce, triplet_loss, total_loss.
std::vector<RegisteredOp> standard_diffops(std::uint64_t seed);

}  // namespace gci

#endif  // GCI_DIFFOPS_HPP_
