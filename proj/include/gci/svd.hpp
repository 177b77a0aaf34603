#ifndef GCI_SVD_HPP_
#define GCI_SVD_HPP_

#include "gci/tensor.hpp"

namespace gci {

/// Thin SVD of W[m,n]: W = U * diag(S) * V^T with r = min(m,n).
/// U is m x r, V is n x r, both with orthonormal columns; S is descending and
/// non-negative. Deterministic sign convention: the first nonzero entry of
/// each column of U is non-negative (V flipped in tandem).
struct SvdResult {
    Tensor u;  // [m, r]
    Tensor s;  // [r]
    Tensor v;  // [n, r]
};

/// One-sided Jacobi SVD for small dense matrices (m, n <= 512).
/// Throws NumericError carrying the sweep count if rotations fail to die out.
SvdResult thin_svd(const Tensor& w);

}  // namespace gci

#endif  // GCI_SVD_HPP_
