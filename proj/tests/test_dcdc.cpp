#include <cmath>
#include <vector>

#include "doctest.h"
#include "gci/dcdc.hpp"
#include "gci/gradcheck.hpp"
#include "gci/rng.hpp"
#include "gci/tensor.hpp"
#include "oracles.hpp"

using namespace gci;

namespace {

VanillaDynConv random_vanilla(Rng& rng, std::size_t s, std::size_t cout, std::size_t cin,
                              std::size_t k, std::size_t c) {
    VanillaDynConv dc;
    for (std::size_t i = 0; i < s; ++i)
        dc.candidates.push_back(rng.uniform_tensor({cout, cin, k, k}, -1.0, 1.0));
    dc.attn_weight = rng.uniform_tensor({s, c}, -1.0, 1.0);
    return dc;
}

// Explicit weighted sum computed with scalar loops only.
Tensor weighted_sum_oracle(const std::vector<Tensor>& candidates, const Tensor& pi) {
    Tensor out = Tensor::zeros(candidates[0].shape());
    for (std::size_t s = 0; s < candidates.size(); ++s)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += pi[s] * candidates[s][i];
    return out;
}

}  // namespace

TEST_CASE("a single candidate is returned unchanged for any input") {
    Rng rng(11);
    VanillaDynConv dc = random_vanilla(rng, 1, 3, 2, 3, 4);
    Tensor x = rng.uniform_tensor({4, 5, 5}, -1.0, 1.0);
    Tensor k = vanilla_kernel(dc, x);
    for (std::size_t i = 0; i < k.size(); ++i) CHECK(k[i] == doctest::Approx(dc.candidates[0][i]).epsilon(1e-14));
}

TEST_CASE("injected one-hot scores select exactly one candidate") {
    Rng rng(12);
    VanillaDynConv dc = random_vanilla(rng, 4, 2, 3, 3, 5);
    for (std::size_t j = 0; j < 4; ++j) {
        Tensor pi = Tensor::zeros({4});
        pi[j] = 1.0;
        Tensor k = mix_candidates(dc, pi);
        for (std::size_t i = 0; i < k.size(); ++i) CHECK(k[i] == dc.candidates[j][i]);
    }
}

TEST_CASE("the mixed kernel matches a scalar-loop weighted sum") {
    Rng rng(13);
    VanillaDynConv dc = random_vanilla(rng, 4, 3, 2, 3, 6);
    Tensor x = rng.uniform_tensor({6, 4, 4}, -1.0, 1.0);
    Tensor pi = attention_scores(dc, x);
    Tensor want = weighted_sum_oracle(dc.candidates, pi);
    Tensor got = vanilla_kernel(dc, x);
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(std::abs(got[i] - want[i]) < 1e-12);
}

TEST_CASE("mixing scores form a simplex for random inputs") {
    Rng rng(14);
    for (int rep = 0; rep < 20; ++rep) {
        VanillaDynConv dc = random_vanilla(rng, 2 + rep % 7, 2, 2, 3, 4);
        Tensor x = rng.uniform_tensor({4, 3, 3}, -5.0, 5.0);
        Tensor pi = attention_scores(dc, x);
        double sum = 0.0;
        for (std::size_t s = 0; s < pi.size(); ++s) {
            CHECK(pi[s] > 0.0);
            CHECK(pi[s] < 1.0);
            sum += pi[s];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("identical candidates reformulate to zero offsets") {
    Rng rng(15);
    Tensor w = rng.uniform_tensor({2, 2, 3, 3}, -1.0, 1.0);
    std::vector<Tensor> candidates = {w, w, w};
    Tensor w0;
    std::vector<Tensor> deltas;
    reformulate(candidates, &w0, &deltas);
    for (std::size_t i = 0; i < w0.size(); ++i) CHECK(w0[i] == doctest::Approx(w[i]).epsilon(1e-14));
    for (const Tensor& d : deltas)
        for (std::size_t i = 0; i < d.size(); ++i) CHECK(std::abs(d[i]) < 1e-14);
}

TEST_CASE("antisymmetric candidate pair reformulates to zero mean") {
    Rng rng(16);
    Tensor w1 = rng.uniform_tensor({2, 3, 3, 3}, -1.0, 1.0);
    Tensor w2 = w1;
    w2 *= -1.0;
    Tensor w0;
    std::vector<Tensor> deltas;
    reformulate({w1, w2}, &w0, &deltas);
    for (std::size_t i = 0; i < w0.size(); ++i) CHECK(std::abs(w0[i]) < 1e-14);
    for (std::size_t i = 0; i < w1.size(); ++i) {
        CHECK(deltas[0][i] == doctest::Approx(w1[i]).epsilon(1e-14));
        CHECK(deltas[1][i] == doctest::Approx(w2[i]).epsilon(1e-14));
    }
}

TEST_CASE("offsets always sum to zero") {
    Rng rng(17);
    for (std::size_t s : {2u, 4u, 8u}) {
        std::vector<Tensor> candidates;
        for (std::size_t i = 0; i < s; ++i)
            candidates.push_back(rng.uniform_tensor({3, 2, 3, 3}, -2.0, 2.0));
        Tensor w0;
        std::vector<Tensor> deltas;
        reformulate(candidates, &w0, &deltas);
        Tensor sum = Tensor::zeros(w0.shape());
        for (const Tensor& d : deltas) sum += d;
        CHECK(sum.max_abs() < 1e-12);
    }
}

TEST_CASE("mean-plus-offset form reproduces the mixed kernel for any simplex") {
    Rng rng(18);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t s = (rep % 3 == 0) ? 2 : (rep % 3 == 1) ? 4 : 8;
        VanillaDynConv dc = random_vanilla(rng, s, 2, 2, 3, 4);
        Tensor w0;
        std::vector<Tensor> deltas;
        reformulate(dc.candidates, &w0, &deltas);
        // Random simplex via normalized positive draws.
        Tensor pi({s});
        double total = 0.0;
        for (std::size_t i = 0; i < s; ++i) {
            pi[i] = rng.uniform(0.05, 1.0);
            total += pi[i];
        }
        for (std::size_t i = 0; i < s; ++i) pi[i] /= total;
        Tensor direct = mix_candidates(dc, pi);
        Tensor reform = w0;
        for (std::size_t i = 0; i < s; ++i) reform.axpy(pi[i], deltas[i]);
        Tensor diff = direct;
        diff -= reform;
        CHECK(diff.max_abs() < 1e-10);
    }
}

TEST_CASE("zero input drives the affinity to half the column sums of the second layer") {
    Rng rng(19);
    DcdcKernelSet ks = make_dcdc(2, 4, 3, 8, 3, 4, rng);
    Tensor x = Tensor::zeros({8, 5, 5});
    Tensor phi = affinity(ks, x);
    CHECK(phi.extent(0) == 3);
    CHECK(phi.extent(1) == 3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double want = 0.0;
            for (std::size_t h = 0; h < ks.w_fc2.extent(1); ++h)
                want += 0.5 * ks.w_fc2.at(i * 3 + j, h);
            CHECK(phi.at(i, j) == doctest::Approx(want).epsilon(1e-14));
        }
}

TEST_CASE("a zero second layer forces a zero affinity for every input") {
    Rng rng(20);
    DcdcKernelSet ks = make_dcdc(2, 4, 3, 8, 4, 2, rng);
    ks.w_fc2.fill(0.0);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor x = rng.uniform_tensor({8, 4, 6}, -3.0, 3.0);
        CHECK(affinity(ks, x).max_abs() == 0.0);
    }
}

TEST_CASE("the affinity matches a scalar-loop MLP at the default latent sizes") {
    Rng rng(21);
    const std::size_t latent = 8, reduction = 4, c = 64;
    DcdcKernelSet ks = make_dcdc(2, 8, 3, c, latent, reduction, rng);
    Tensor x = rng.uniform_tensor({c, 6, 5}, -1.0, 1.0);
    Tensor phi = affinity(ks, x);
    CHECK(phi.extent(0) == 8);
    CHECK(phi.extent(1) == 8);

    Tensor g = oracle::gap(x);
    const std::size_t hidden_dim = c / reduction;
    std::vector<double> hidden(hidden_dim);
    for (std::size_t i = 0; i < hidden_dim; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += ks.w_fc1.at(i, j) * g[j];
        hidden[i] = 1.0 / (1.0 + std::exp(-acc));
    }
    for (std::size_t i = 0; i < latent; ++i)
        for (std::size_t j = 0; j < latent; ++j) {
            double acc = 0.0;
            for (std::size_t h = 0; h < hidden_dim; ++h)
                acc += ks.w_fc2.at(i * latent + j, h) * hidden[h];
            CHECK(std::abs(phi.at(i, j) - acc) < 1e-12);
        }
}

TEST_CASE("construction rejects conditioning channels not divisible by the reduction") {
    Rng rng(22);
    CHECK_THROWS_AS(make_dcdc(2, 4, 3, 10, 4, 4, rng), std::invalid_argument);
}

TEST_CASE("a zero basis or zero affinity leaves only the static kernel") {
    Rng rng(23);
    DcdcKernelSet ks = make_dcdc(3, 2, 3, 4, 3, 2, rng);
    Tensor phi = rng.uniform_tensor({3, 3}, -1.0, 1.0);

    DcdcKernelSet zero_p = ks;
    zero_p.p.fill(0.0);
    Tensor got = assemble_kernel(zero_p, phi);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == ks.w0[i]);

    Tensor zero_phi = Tensor::zeros({3, 3});
    got = assemble_kernel(ks, zero_phi);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == ks.w0[i]);
}

TEST_CASE("kernel assembly equals the explicit rank-one double sum") {
    Rng rng(24);
    const std::size_t latent = 3, cout = 4, cin = 2, k = 3;
    DcdcKernelSet ks = make_dcdc(cout, cin, k, 6, latent, 2, rng);
    Tensor phi = rng.uniform_tensor({latent, latent}, -1.0, 1.0);
    Tensor got = assemble_kernel(ks, phi);

    // W = W0 + sum_i sum_j phi_ij * outer(P[:,i], Q[:,j]), rows of Q indexed by
    // the row-major flattening of [Cin,k,k].
    Tensor want = ks.w0;
    for (std::size_t i = 0; i < latent; ++i)
        for (std::size_t j = 0; j < latent; ++j)
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            want.at(co, ci, ky, kx) += phi.at(i, j) * ks.p.at(co, i) *
                                                       ks.q.at((ci * k + ky) * k + kx, j);
    Tensor diff = got;
    diff -= want;
    CHECK(diff.max_abs() < 1e-12);
}

TEST_CASE("zeroed static kernel and basis produce constant half attention") {
    Rng rng(25);
    DcdcKernelSet ks = make_dcdc(2, 4, 3, 4, 3, 2, rng);
    ks.w0.fill(0.0);
    ks.p.fill(0.0);
    Tensor x = rng.uniform_tensor({4, 5, 6}, -2.0, 2.0);
    Tensor maps = dcdc_forward(ks, x);
    for (std::size_t i = 0; i < maps.size(); ++i) CHECK(maps[i] == 0.5);
}

TEST_CASE("two attention channels on a 32x16x16 feature preserve the spatial grid") {
    Rng rng(26);
    DcdcKernelSet ks = make_dcdc(2, 32, 3, 32, 8, 4, rng);
    Tensor x = rng.uniform_tensor({32, 16, 16}, -1.0, 1.0);
    Tensor maps = dcdc_forward(ks, x);
    CHECK(maps.extent(0) == 2);
    CHECK(maps.extent(1) == 16);
    CHECK(maps.extent(2) == 16);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        CHECK(maps[i] > 0.0);
        CHECK(maps[i] < 1.0);
    }
}

TEST_CASE("the forward pass equals the composition of the piecewise oracles") {
    Rng rng(27);
    DcdcKernelSet ks = make_dcdc(2, 6, 3, 6, 4, 3, rng);
    Tensor x = rng.uniform_tensor({6, 7, 5}, -1.0, 1.0);
    Tensor maps = dcdc_forward(ks, x);

    Tensor phi = affinity(ks, x);
    Tensor kernel = assemble_kernel(ks, phi);
    Tensor pre = oracle::naive_conv2d(x, kernel, 1, 1);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const double want = 1.0 / (1.0 + std::exp(-pre[i]));
        CHECK(std::abs(maps[i] - want) < 1e-10);
    }
}

TEST_CASE("different inputs produce different assembled kernels") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        DcdcKernelSet ks = make_dcdc(2, 4, 3, 4, 3, 2, rng);
        Tensor x1 = rng.uniform_tensor({4, 5, 5}, -1.0, 1.0);
        Tensor x2 = rng.uniform_tensor({4, 5, 5}, -1.0, 1.0);
        Tensor k1 = assemble_kernel(ks, affinity(ks, x1));
        Tensor k2 = assemble_kernel(ks, affinity(ks, x2));
        Tensor diff = k1;
        diff -= k2;
        CHECK(diff.max_abs() > 0.0);
    }
}

TEST_CASE("the decomposed generator is smaller than four-candidate mixing") {
    const std::size_t n_dcdc = dcdc_param_count(128, 128, 3, 128, 8, 4);
    const std::size_t n_vanilla = vanilla_param_count(128, 128, 3, 128, 4);
    CHECK(n_dcdc < n_vanilla);
}

TEST_CASE("generator backward matches finite differences end to end") {
    Rng rng(28);
    DcdcKernelSet base = make_dcdc(2, 4, 3, 4, 2, 2, rng);
    Tensor x = rng.uniform_tensor({4, 4, 4}, -1.0, 1.0);
    Tensor probe = rng.uniform_tensor({2, 4, 4}, -1.0, 1.0);

    DiffOp op;
    op.name = "dcdc_forward";
    op.param_names = {"w0", "p", "q", "fc1", "fc2", "x"};
    auto rebuild = [base](const std::vector<Tensor>& p) {
        DcdcKernelSet ks = base;
        ks.w0 = p[0];
        ks.p = p[1];
        ks.q = p[2];
        ks.w_fc1 = p[3];
        ks.w_fc2 = p[4];
        return ks;
    };
    op.forward = [rebuild, probe](const std::vector<Tensor>& p) {
        return dot(dcdc_forward(rebuild(p), p[5]), probe);
    };
    op.backward = [rebuild, probe](const std::vector<Tensor>& p) {
        DcdcKernelSet ks = rebuild(p);
        DcdcCache cache;
        dcdc_forward(ks, p[5], &cache);
        DcdcGrads g = dcdc_backward(ks, p[5], cache, probe);
        return std::vector<Tensor>{g.w0, g.p, g.q, g.w_fc1, g.w_fc2, g.x};
    };
    std::vector<Tensor> params = {base.w0, base.p, base.q, base.w_fc1, base.w_fc2, x};
    GradReport rep = finite_diff_check(op, params, 1e-5, 1e-4);
    INFO(rep.summary_line());
    CHECK(rep.pass);
}

TEST_CASE("vanilla backward matches finite differences") {
    Rng rng(29);
    VanillaDynConv base = random_vanilla(rng, 3, 2, 4, 3, 4);
    Tensor x = rng.uniform_tensor({4, 4, 4}, -1.0, 1.0);
    Tensor probe = rng.uniform_tensor({2, 4, 4}, -1.0, 1.0);

    DiffOp op;
    op.name = "vanilla_forward";
    op.param_names = {"cand0", "cand1", "cand2", "attn", "x"};
    auto rebuild = [base](const std::vector<Tensor>& p) {
        VanillaDynConv dc = base;
        dc.candidates = {p[0], p[1], p[2]};
        dc.attn_weight = p[3];
        return dc;
    };
    op.forward = [rebuild, probe](const std::vector<Tensor>& p) {
        return dot(vanilla_forward(rebuild(p), p[4]), probe);
    };
    op.backward = [rebuild, probe](const std::vector<Tensor>& p) {
        VanillaDynConv dc = rebuild(p);
        VanillaCache cache;
        vanilla_forward(dc, p[4], &cache);
        VanillaGrads g = vanilla_backward(dc, p[4], cache, probe);
        return std::vector<Tensor>{g.candidates[0], g.candidates[1], g.candidates[2],
                                   g.attn_weight, g.x};
    };
    std::vector<Tensor> params = {base.candidates[0], base.candidates[1], base.candidates[2],
                                  base.attn_weight, x};
    GradReport rep = finite_diff_check(op, params, 1e-5, 1e-4);
    INFO(rep.summary_line());
    CHECK(rep.pass);
}
