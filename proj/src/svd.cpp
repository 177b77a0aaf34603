#include "gci/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "gci/errors.hpp"

namespace gci {

namespace {

// Intended for small dense problems: the short side drives the O(short^2 * long)
// rotation cost, so the short side is capped hard and the long side loosely.
constexpr std::size_t kMaxShortDim = 512;
constexpr std::size_t kMaxLongDim = 8192;
constexpr int kMaxSweeps = 60;
constexpr double kRotTol = 1e-14;    // skip a rotation when columns are this orthogonal
constexpr double kRankTol = 1e-13;   // sigma_j <= kRankTol * sigma_max counts as rank-deficient

// Core one-sided Jacobi on a[m,n] with m >= n. Columns of `a` are rotated in
// place until mutually orthogonal; `v` accumulates the right rotations.
void jacobi_orthogonalize(Tensor& a, Tensor& v) {
    const std::size_t m = a.extent(0);
    const std::size_t n = a.extent(1);
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        std::size_t rotations = 0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a.at(i, p);
                    const double aq = a.at(i, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if (alpha == 0.0 || beta == 0.0) continue;  // dead column, nothing to rotate
                if (std::abs(gamma) <= kRotTol * std::sqrt(alpha * beta)) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a.at(i, p);
                    const double aq = a.at(i, q);
                    a.at(i, p) = c * ap - s * aq;
                    a.at(i, q) = s * ap + c * aq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v.at(i, p);
                    const double vq = v.at(i, q);
                    v.at(i, p) = c * vp - s * vq;
                    v.at(i, q) = s * vp + c * vq;
                }
                ++rotations;
            }
        }
        if (rotations == 0) return;
    }
    throw NumericError("thin_svd: Jacobi sweeps did not converge after " +
                       std::to_string(kMaxSweeps) + " sweeps");
}

// Replace U columns whose singular value is (numerically) zero with a
// deterministic orthonormal completion: the first canonical basis vector with
// a healthy residual after projecting out every other column.
void complete_null_columns(Tensor& u, const std::vector<bool>& deficient) {
    const std::size_t m = u.extent(0);
    const std::size_t r = u.extent(1);
    for (std::size_t j = 0; j < r; ++j) {
        if (!deficient[j]) continue;
        bool placed = false;
        for (std::size_t cand = 0; cand < m && !placed; ++cand) {
            std::vector<double> res(m, 0.0);
            res[cand] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {  // re-orthogonalize once for accuracy
                for (std::size_t k = 0; k < r; ++k) {
                    if (k == j) continue;
                    double proj = 0.0;
                    for (std::size_t i = 0; i < m; ++i) proj += res[i] * u.at(i, k);
                    for (std::size_t i = 0; i < m; ++i) res[i] -= proj * u.at(i, k);
                }
            }
            double norm2 = 0.0;
            for (double x : res) norm2 += x * x;
            if (norm2 > 0.25) {
                const double inv = 1.0 / std::sqrt(norm2);
                for (std::size_t i = 0; i < m; ++i) u.at(i, j) = res[i] * inv;
                placed = true;
            }
        }
        if (!placed) {
            throw NumericError("thin_svd: failed to complete orthonormal basis for a "
                               "zero singular value");
        }
    }
}

// Sign convention: first nonzero entry of each U column is non-negative;
// the paired V column flips with it so U*diag(S)*V^T is unchanged.
void fix_signs(Tensor& u, Tensor& v) {
    const std::size_t m = u.extent(0);
    const std::size_t n = v.extent(0);
    const std::size_t r = u.extent(1);
    for (std::size_t j = 0; j < r; ++j) {
        double lead = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (u.at(i, j) != 0.0) {
                lead = u.at(i, j);
                break;
            }
        }
        if (lead < 0.0) {
            for (std::size_t i = 0; i < m; ++i) u.at(i, j) = -u.at(i, j);
            for (std::size_t i = 0; i < n; ++i) v.at(i, j) = -v.at(i, j);
        }
    }
}

// Thin SVD for the tall/square case (m >= n, so r = n).
SvdResult thin_svd_tall(const Tensor& w) {
    const std::size_t m = w.extent(0);
    const std::size_t n = w.extent(1);
    Tensor a = w;
    Tensor v = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) v.at(i, i) = 1.0;
    jacobi_orthogonalize(a, v);

    // Column norms are the singular values; columns normalize to U.
    std::vector<double> sigma(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double norm2 = 0.0;
        for (std::size_t i = 0; i < m; ++i) norm2 += a.at(i, j) * a.at(i, j);
        sigma[j] = std::sqrt(norm2);
    }
    const double sigma_max = *std::max_element(sigma.begin(), sigma.end());

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdResult out;
    out.u = Tensor::zeros({m, n});
    out.s = Tensor::zeros({n});
    out.v = Tensor::zeros({n, n});
    std::vector<bool> deficient(n, false);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.s[j] = sigma[src];
        for (std::size_t i = 0; i < n; ++i) out.v.at(i, j) = v.at(i, src);
        if (sigma[src] <= kRankTol * sigma_max || sigma[src] == 0.0) {
            deficient[j] = true;  // filled in below; keep S as computed
            continue;
        }
        const double inv = 1.0 / sigma[src];
        for (std::size_t i = 0; i < m; ++i) out.u.at(i, j) = a.at(i, src) * inv;
    }
    complete_null_columns(out.u, deficient);
    fix_signs(out.u, out.v);
    return out;
}

}  // namespace

SvdResult thin_svd(const Tensor& w) {
    if (w.rank() != 2) {
        throw NumericError("thin_svd: expected a rank-2 tensor, got rank " +
                           std::to_string(w.rank()));
    }
    const std::size_t m = w.extent(0);
    const std::size_t n = w.extent(1);
    if (m == 0 || n == 0) throw NumericError("thin_svd: empty matrix");
    if (std::min(m, n) > kMaxShortDim || std::max(m, n) > kMaxLongDim) {
        throw NumericError("thin_svd: matrix " + std::to_string(m) + "x" +
                           std::to_string(n) + " exceeds the supported size (short side <= " +
                           std::to_string(kMaxShortDim) + ", long side <= " +
                           std::to_string(kMaxLongDim) + ")");
    }
    ensure_finite(w, "thin_svd input");

    if (m >= n) {
        SvdResult out = thin_svd_tall(w);
        ensure_finite(out.u, "thin_svd U");
        ensure_finite(out.s, "thin_svd S");
        ensure_finite(out.v, "thin_svd V");
        return out;
    }
    // Wide case: factor the transpose and swap the singular vector roles.
    SvdResult t = thin_svd_tall(transpose(w));
    SvdResult out;
    out.u = t.v;
    out.s = t.s;
    out.v = t.u;
    fix_signs(out.u, out.v);
    ensure_finite(out.u, "thin_svd U");
    ensure_finite(out.s, "thin_svd S");
    ensure_finite(out.v, "thin_svd V");
    return out;
}

}  // namespace gci
