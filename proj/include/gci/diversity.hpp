#ifndef GCI_DIVERSITY_HPP_
#define GCI_DIVERSITY_HPP_

#include <vector>

#include "gci/tensor.hpp"

namespace gci {

/// Sum of singular values (Schatten 1-norm). Non-negative.
double nuclear_norm(const Tensor& w);

/// Analytic gradient of the nuclear norm: U * V^T from the thin SVD.
/// At a zero matrix the subgradient is taken as zero (deterministic choice);
/// at other degenerate spectra the computed U V^T is still a valid subgradient.
Tensor nuclear_norm_grad(const Tensor& w);

/// The rank-diversity objective over the factual (A) and counterfactual (C)
/// generator bases: value = -(|P_A| + |Q_A| + |P_C| + |Q_C|) in nuclear norm,
/// with per-matrix gradients -U_i V_i^T. Minimizing the value maximizes the
/// bases' effective rank.
struct DiversityTerm {
    double value = 0.0;
    std::vector<double> norms;      // the four nuclear norms, input order
    std::vector<Tensor> gradients;  // d(value)/d(matrix), input order
};

DiversityTerm diversity_loss(const Tensor& p_a, const Tensor& q_a, const Tensor& p_c,
                             const Tensor& q_c);

}  // namespace gci

#endif  // GCI_DIVERSITY_HPP_
