#include "gci/diversity.hpp"

#include <array>

#include "gci/svd.hpp"

namespace gci {

double nuclear_norm(const Tensor& w) {
    const SvdResult f = thin_svd(w);
    double total = 0.0;
    for (std::size_t i = 0; i < f.s.size(); ++i) total += f.s[i];
    return total;
}

Tensor nuclear_norm_grad(const Tensor& w) {
    if (w.max_abs() == 0.0) return Tensor::zeros(w.shape());
    const SvdResult f = thin_svd(w);
    // U[m,r] * V^T[r,n]
    const std::size_t m = f.u.extent(0), r = f.u.extent(1), n = f.v.extent(0);
    Tensor g = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < r; ++k) {
            const double uik = f.u.at(i, k);
            for (std::size_t j = 0; j < n; ++j) g.at(i, j) += uik * f.v.at(j, k);
        }
    return g;
}

DiversityTerm diversity_loss(const Tensor& p_a, const Tensor& q_a, const Tensor& p_c,
                             const Tensor& q_c) {
    const std::array<const Tensor*, 4> mats = {&p_a, &q_a, &p_c, &q_c};
    DiversityTerm term;
    for (const Tensor* m : mats) {
        const double norm = nuclear_norm(*m);
        term.norms.push_back(norm);
        term.value -= norm;
        Tensor g = nuclear_norm_grad(*m);
        g *= -1.0;
        term.gradients.push_back(std::move(g));
    }
    return term;
}

}  // namespace gci
