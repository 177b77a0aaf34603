#include "gci/dcdc.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "gci/errors.hpp"

namespace gci {

namespace {

// Flattens a [Cout,Cin,k,k] kernel view into a [Cout, Cin*k*k] matrix (pure
// reshape, row-major layouts coincide).
Tensor kernel_as_matrix(const Tensor& kernel) {
    return Tensor::from_data({kernel.extent(0), kernel.extent(1) * kernel.extent(2) * kernel.extent(3)},
                             std::vector<double>(kernel.data(), kernel.data() + kernel.size()));
}

Tensor matrix_as_kernel(const Tensor& mat, std::size_t cout, std::size_t cin, std::size_t k) {
    return Tensor::from_data({cout, cin, k, k},
                             std::vector<double>(mat.data(), mat.data() + mat.size()));
}

}  // namespace

void VanillaDynConv::validate() const {
    if (candidates.empty())
        throw std::invalid_argument("VanillaDynConv: need at least one candidate kernel");
    for (const Tensor& w : candidates) {
        if (w.rank() != 4)
            throw std::invalid_argument("VanillaDynConv: candidate must be rank 4, got " +
                                        w.shape_str());
        if (!w.same_shape(candidates.front()))
            throw std::invalid_argument("VanillaDynConv: candidate shape " + w.shape_str() +
                                        " differs from " + candidates.front().shape_str());
    }
    if (attn_weight.rank() != 2 || attn_weight.extent(0) != candidates.size())
        throw std::invalid_argument("VanillaDynConv: attention weight must be [S,C] with S = " +
                                    std::to_string(candidates.size()) + ", got " +
                                    attn_weight.shape_str());
}

Tensor attention_scores(const VanillaDynConv& dc, const Tensor& x) {
    dc.validate();
    if (x.rank() != 3 || x.extent(0) != dc.attn_weight.extent(1))
        throw std::invalid_argument("attention_scores: input channels " + x.shape_str() +
                                    " do not match attention weight " +
                                    dc.attn_weight.shape_str());
    return softmax(matvec(dc.attn_weight, global_avg_pool(x)));
}

Tensor mix_candidates(const VanillaDynConv& dc, const Tensor& pi) {
    dc.validate();
    if (pi.rank() != 1 || pi.size() != dc.candidates.size())
        throw std::invalid_argument("mix_candidates: score vector " + pi.shape_str() +
                                    " does not match S = " +
                                    std::to_string(dc.candidates.size()));
    Tensor out = Tensor::zeros(dc.candidates.front().shape());
    for (std::size_t s = 0; s < dc.candidates.size(); ++s) out.axpy(pi[s], dc.candidates[s]);
    ensure_finite(out, "mix_candidates output");
    return out;
}

Tensor vanilla_kernel(const VanillaDynConv& dc, const Tensor& x) {
    return mix_candidates(dc, attention_scores(dc, x));
}

void reformulate(const std::vector<Tensor>& candidates, Tensor* w0, std::vector<Tensor>* deltas) {
    if (candidates.empty())
        throw std::invalid_argument("reformulate: need at least one candidate");
    Tensor mean = Tensor::zeros(candidates.front().shape());
    for (const Tensor& w : candidates) mean.axpy(1.0 / static_cast<double>(candidates.size()), w);
    if (deltas) {
        deltas->clear();
        for (const Tensor& w : candidates) {
            Tensor d = w;
            d -= mean;
            deltas->push_back(std::move(d));
        }
    }
    if (w0) *w0 = std::move(mean);
}

void DcdcKernelSet::validate() const {
    if (w0.rank() != 4) throw std::invalid_argument("DcdcKernelSet: w0 must be rank 4");
    const std::size_t l = latent();
    if (p.rank() != 2 || p.extent(0) != cout())
        throw std::invalid_argument("DcdcKernelSet: P must be [Cout,L], got " + p.shape_str());
    if (q.rank() != 2 || q.extent(0) != ksize() * ksize() * cin() || q.extent(1) != l)
        throw std::invalid_argument("DcdcKernelSet: Q must be [k*k*Cin,L], got " + q.shape_str());
    if (w_fc1.rank() != 2)
        throw std::invalid_argument("DcdcKernelSet: W_fc1 must be rank 2");
    if (w_fc2.rank() != 2 || w_fc2.extent(0) != l * l || w_fc2.extent(1) != w_fc1.extent(0))
        throw std::invalid_argument("DcdcKernelSet: W_fc2 must be [L*L,C/r], got " +
                                    w_fc2.shape_str());
}

DcdcKernelSet make_dcdc(std::size_t cout, std::size_t cin, std::size_t k, std::size_t cond_c,
                        std::size_t latent, std::size_t reduction, Rng& rng) {
    if (latent < 1) throw std::invalid_argument("make_dcdc: latent dimension must be >= 1");
    if (reduction < 1 || cond_c % reduction != 0)
        throw std::invalid_argument("make_dcdc: conditioning channels " + std::to_string(cond_c) +
                                    " not divisible by reduction ratio " +
                                    std::to_string(reduction));
    DcdcKernelSet ks;
    const double w0_bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
    ks.w0 = rng.uniform_tensor({cout, cin, k, k}, -w0_bound, w0_bound);
    const double p_bound = std::sqrt(6.0 / static_cast<double>(cout + latent));
    ks.p = rng.uniform_tensor({cout, latent}, -p_bound, p_bound);
    const double q_bound = std::sqrt(6.0 / static_cast<double>(k * k * cin + latent));
    ks.q = rng.uniform_tensor({k * k * cin, latent}, -q_bound, q_bound);
    const std::size_t hidden = cond_c / reduction;
    const double f1_bound = std::sqrt(6.0 / static_cast<double>(cond_c + hidden));
    ks.w_fc1 = rng.uniform_tensor({hidden, cond_c}, -f1_bound, f1_bound);
    const double f2_bound = std::sqrt(6.0 / static_cast<double>(hidden + latent * latent));
    ks.w_fc2 = rng.uniform_tensor({latent * latent, hidden}, -f2_bound, f2_bound);
    ks.validate();
    return ks;
}

Tensor affinity(const DcdcKernelSet& ks, const Tensor& x, DcdcCache* cache) {
    ks.validate();
    if (x.rank() != 3 || x.extent(0) != ks.cond_channels())
        throw std::invalid_argument("affinity: input " + x.shape_str() +
                                    " does not provide the " +
                                    std::to_string(ks.cond_channels()) +
                                    " conditioning channels");
    const std::size_t l = ks.latent();
    Tensor gap = global_avg_pool(x);
    Tensor fc1_pre = matvec(ks.w_fc1, gap);
    Tensor hidden = sigmoid(fc1_pre);
    Tensor phi_flat = matvec(ks.w_fc2, hidden);
    Tensor phi = Tensor::from_data({l, l}, std::vector<double>(phi_flat.data(),
                                                               phi_flat.data() + phi_flat.size()));
    if (cache) {
        cache->gap = std::move(gap);
        cache->fc1_pre = std::move(fc1_pre);
        cache->hidden = std::move(hidden);
        cache->phi = phi;
    }
    return phi;
}

Tensor assemble_kernel(const DcdcKernelSet& ks, const Tensor& phi) {
    ks.validate();
    const std::size_t l = ks.latent();
    if (phi.rank() != 2 || phi.extent(0) != l || phi.extent(1) != l)
        throw std::invalid_argument("assemble_kernel: affinity must be [L,L] with L = " +
                                    std::to_string(l) + ", got " + phi.shape_str());
    // P[Cout,L] * phi[L,L] * Q^T[L, k*k*Cin], then reinterpret rows as kernels.
    Tensor low_rank = matmul(matmul(ks.p, phi), transpose(ks.q));
    Tensor kernel = matrix_as_kernel(low_rank, ks.cout(), ks.cin(), ks.ksize());
    kernel += ks.w0;
    ensure_finite(kernel, "assemble_kernel output");
    return kernel;
}

void assemble_kernel_backward(const DcdcKernelSet& ks, const Tensor& phi,
                              const Tensor& upstream_kernel, Tensor* d_p, Tensor* d_phi,
                              Tensor* d_q) {
    Tensor d_mat = kernel_as_matrix(upstream_kernel);       // [Cout, k*k*Cin]
    Tensor pphi = matmul(ks.p, phi);                        // [Cout, L]
    if (d_p) *d_p = matmul(matmul(d_mat, ks.q), transpose(phi));   // D*Q*phi^T
    if (d_phi) *d_phi = matmul(transpose(ks.p), matmul(d_mat, ks.q));  // P^T*D*Q
    if (d_q) *d_q = matmul(transpose(d_mat), pphi);         // D^T*(P*phi)
}

void affinity_backward(const DcdcKernelSet& ks, const Tensor& x, const DcdcCache& cache,
                       const Tensor& d_phi, Tensor* d_fc1, Tensor* d_fc2, Tensor* d_x) {
    Tensor d_phi_flat = Tensor::from_data(
        {d_phi.size()}, std::vector<double>(d_phi.data(), d_phi.data() + d_phi.size()));
    if (d_fc2) *d_fc2 = outer(d_phi_flat, cache.hidden);
    Tensor d_hidden = matvec_t(ks.w_fc2, d_phi_flat);
    // sigmoid'(z) = h*(1-h)
    Tensor d_pre(d_hidden.shape());
    for (std::size_t i = 0; i < d_pre.size(); ++i)
        d_pre[i] = d_hidden[i] * cache.hidden[i] * (1.0 - cache.hidden[i]);
    if (d_fc1) *d_fc1 = outer(d_pre, cache.gap);
    if (d_x) {
        Tensor d_gap = matvec_t(ks.w_fc1, d_pre);
        *d_x = global_avg_pool_grad(x, d_gap);
    }
}

Tensor dcdc_forward(const DcdcKernelSet& ks, const Tensor& x, DcdcCache* cache) {
    DcdcCache local;
    DcdcCache* c = cache ? cache : &local;
    Tensor phi = affinity(ks, x, c);
    Tensor kernel = assemble_kernel(ks, phi);
    const int pad = static_cast<int>((ks.ksize() - 1) / 2);
    Tensor pre_act = conv2d(x, kernel, 1, pad);
    Tensor maps = sigmoid(pre_act);
    c->kernel = std::move(kernel);
    c->pre_act = std::move(pre_act);
    c->maps = maps;
    return maps;
}

DcdcGrads dcdc_backward(const DcdcKernelSet& ks, const Tensor& x, const DcdcCache& cache,
                        const Tensor& upstream_maps) {
    if (!upstream_maps.same_shape(cache.maps))
        throw std::invalid_argument("dcdc_backward: upstream shape " + upstream_maps.shape_str() +
                                    " != maps shape " + cache.maps.shape_str());
    // Through the sigmoid.
    Tensor d_pre(cache.maps.shape());
    for (std::size_t i = 0; i < d_pre.size(); ++i)
        d_pre[i] = upstream_maps[i] * cache.maps[i] * (1.0 - cache.maps[i]);

    const int pad = static_cast<int>((ks.ksize() - 1) / 2);
    DcdcGrads g;
    Tensor d_kernel = conv2d_grad_kernel(x, cache.kernel, d_pre, 1, pad);
    g.x = conv2d_grad_input(x, cache.kernel, d_pre, 1, pad);

    g.w0 = d_kernel;  // kernel = w0 + low-rank term
    Tensor d_phi;
    assemble_kernel_backward(ks, cache.phi, d_kernel, &g.p, &d_phi, &g.q);
    Tensor d_x_aff;
    affinity_backward(ks, x, cache, d_phi, &g.w_fc1, &g.w_fc2, &d_x_aff);
    g.x += d_x_aff;
    return g;
}

Tensor vanilla_forward(const VanillaDynConv& dc, const Tensor& x, VanillaCache* cache) {
    dc.validate();
    VanillaCache local;
    VanillaCache* c = cache ? cache : &local;
    c->gap = global_avg_pool(x);
    c->scores = matvec(dc.attn_weight, c->gap);
    c->pi = softmax(c->scores);
    c->kernel = mix_candidates(dc, c->pi);
    const int pad = static_cast<int>((c->kernel.extent(2) - 1) / 2);
    c->pre_act = conv2d(x, c->kernel, 1, pad);
    c->maps = sigmoid(c->pre_act);
    return c->maps;
}

VanillaGrads vanilla_backward(const VanillaDynConv& dc, const Tensor& x,
                              const VanillaCache& cache, const Tensor& upstream_maps) {
    Tensor d_pre(cache.maps.shape());
    for (std::size_t i = 0; i < d_pre.size(); ++i)
        d_pre[i] = upstream_maps[i] * cache.maps[i] * (1.0 - cache.maps[i]);

    const int pad = static_cast<int>((cache.kernel.extent(2) - 1) / 2);
    VanillaGrads g;
    Tensor d_kernel = conv2d_grad_kernel(x, cache.kernel, d_pre, 1, pad);
    g.x = conv2d_grad_input(x, cache.kernel, d_pre, 1, pad);

    const std::size_t s_count = dc.candidates.size();
    Tensor d_pi({s_count});
    g.candidates.reserve(s_count);
    for (std::size_t s = 0; s < s_count; ++s) {
        d_pi[s] = dot(d_kernel, dc.candidates[s]);
        Tensor dw = d_kernel;
        dw *= cache.pi[s];
        g.candidates.push_back(std::move(dw));
    }
    Tensor d_scores = softmax_grad(cache.pi, d_pi);
    g.attn_weight = outer(d_scores, cache.gap);
    Tensor d_gap = matvec_t(dc.attn_weight, d_scores);
    g.x += global_avg_pool_grad(x, d_gap);
    return g;
}

std::size_t dcdc_param_count(std::size_t cout, std::size_t cin, std::size_t k,
                             std::size_t cond_c, std::size_t latent, std::size_t reduction) {
    const std::size_t hidden = cond_c / reduction;
    return cout * cin * k * k          // W0
           + cout * latent             // P
           + k * k * cin * latent      // Q
           + hidden * cond_c           // W_fc1
           + latent * latent * hidden; // W_fc2
}

std::size_t vanilla_param_count(std::size_t cout, std::size_t cin, std::size_t k,
                                std::size_t cond_c, std::size_t s) {
    return s * cout * cin * k * k  // candidates
           + s * cond_c;           // attention head
}

}  // namespace gci
