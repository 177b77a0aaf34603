#ifndef GCI_GRADCHECK_HPP_
#define GCI_GRADCHECK_HPP_

#include <functional>
#include <string>
#include <vector>

#include "gci/tensor.hpp"

namespace gci {

/// A differentiable operation under test: a scalar-valued forward over a set
/// of named parameter tensors, plus the corresponding analytic gradients.
/// Tensor-valued ops are reduced to scalars upstream by a fixed random linear
/// functional before being wrapped in a DiffOp.
struct DiffOp {
    std::string name;
    // Evaluate the scalar objective at the given parameter values.
    std::function<double(const std::vector<Tensor>&)> forward;
    // Analytic gradients, one per parameter, shapes matching.
    std::function<std::vector<Tensor>(const std::vector<Tensor>&)> backward;
    std::vector<std::string> param_names;
};

/// Verdict of one finite-difference pass over a DiffOp.
struct GradReport {
    std::string op_name;
    double eps = 0.0;
    double rel_tol = 0.0;
    bool pass = false;
    // Per-parameter maxima, aligned with DiffOp::param_names.
    std::vector<std::string> param_names;
    std::vector<double> max_rel_err;
    std::vector<double> max_abs_err;

    std::string summary_line() const;
};

/// Central-difference check of every coordinate of every parameter.
/// rel err per coordinate = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// Throws NumericError identifying the coordinate if the forward goes non-finite.
GradReport finite_diff_check(const DiffOp& op, const std::vector<Tensor>& params, double eps,
                             double rel_tol);

}  // namespace gci

#endif  // GCI_GRADCHECK_HPP_
