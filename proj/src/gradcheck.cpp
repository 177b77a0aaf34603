#include "gci/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "gci/errors.hpp"

namespace gci {

std::string GradReport::summary_line() const {
    double worst = 0.0;
    for (double e : max_rel_err) worst = std::max(worst, e);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s %s  max_rel_err=%.3e  eps=%.1e", op_name.c_str(),
                  pass ? "PASS" : "FAIL", worst, eps);
    return buf;
}

GradReport finite_diff_check(const DiffOp& op, const std::vector<Tensor>& params, double eps,
                             double rel_tol) {
    if (eps < 1e-7 || eps > 1e-4)
        throw std::invalid_argument("finite_diff_check: eps must lie in [1e-7, 1e-4]");
    if (params.size() != op.param_names.size())
        throw std::invalid_argument("finite_diff_check: params/param_names size mismatch");

    const std::vector<Tensor> grads = op.backward(params);
    if (grads.size() != params.size())
        throw std::invalid_argument(op.name + ": backward returned " +
                                    std::to_string(grads.size()) + " gradients for " +
                                    std::to_string(params.size()) + " parameters");

    GradReport report;
    report.op_name = op.name;
    report.eps = eps;
    report.rel_tol = rel_tol;
    report.param_names = op.param_names;
    report.max_rel_err.assign(params.size(), 0.0);
    report.max_abs_err.assign(params.size(), 0.0);
    report.pass = true;

    std::vector<Tensor> probe = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!grads[p].same_shape(params[p]))
            throw std::invalid_argument(op.name + ": gradient shape " + grads[p].shape_str() +
                                        " != parameter '" + op.param_names[p] + "' shape " +
                                        params[p].shape_str());
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double saved = probe[p][i];
            probe[p][i] = saved + eps;
            const double f_plus = op.forward(probe);
            probe[p][i] = saved - eps;
            const double f_minus = op.forward(probe);
            probe[p][i] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                throw NumericError(op.name + ": non-finite forward at parameter '" +
                                   op.param_names[p] + "' coordinate " + std::to_string(i));
            }
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double analytic = grads[p][i];
            const double abs_err = std::abs(analytic - numeric);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double rel_err = abs_err / denom;
            report.max_abs_err[p] = std::max(report.max_abs_err[p], abs_err);
            report.max_rel_err[p] = std::max(report.max_rel_err[p], rel_err);
            if (rel_err > rel_tol) report.pass = false;
        }
    }
    return report;
}

}  // namespace gci
