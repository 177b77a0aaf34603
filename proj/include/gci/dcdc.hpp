#ifndef GCI_DCDC_HPP_
#define GCI_DCDC_HPP_

#include <cstddef>
#include <vector>

#include "gci/rng.hpp"
#include "gci/tensor.hpp"

namespace gci {

/// Classic dynamic convolution: S static candidate kernels mixed by
/// input-conditioned softmax scores. Kept as an algebraic reference and as an
/// ablation arm; the decomposed generator below is the production path.
struct VanillaDynConv {
    std::vector<Tensor> candidates;  // S tensors [Cout,Cin,k,k], shared shape
    Tensor attn_weight;              // [S, C]; scores = attn_weight * GAP(X)

    std::size_t num_candidates() const { return candidates.size(); }
    void validate() const;  // throws on inconsistent shapes
};

/// Mixing scores pi(X) = softmax(attn_weight * GAP(X)); entries in (0,1), sum 1.
Tensor attention_scores(const VanillaDynConv& dc, const Tensor& x);

/// Sum_s pi[s] * W_s for an explicitly supplied simplex vector.
Tensor mix_candidates(const VanillaDynConv& dc, const Tensor& pi);

/// The full sample-adaptive kernel: mix_candidates(dc, attention_scores(dc, x)).
Tensor vanilla_kernel(const VanillaDynConv& dc, const Tensor& x);

/// Rewrites candidates as a sample-agnostic mean kernel plus zero-sum offsets:
/// w0 = mean(W_s), deltas[s] = W_s - w0.
void reformulate(const std::vector<Tensor>& candidates, Tensor* w0, std::vector<Tensor>* deltas);

/// Decomposed sample-adaptive kernel generator. The per-sample kernel is
///   W(X) = W0 + unflatten(P * Phi(X) * Q^T)
/// with Phi an L x L affinity matrix produced by a bias-free two-layer MLP on
/// the globally pooled input. Q is stored flattened as (k*k*Cin) x L, rows
/// indexed by the row-major flattening of [Cin,k,k] so unflattening is a pure
/// reinterpretation of the matrix product's rows.
struct DcdcKernelSet {
    Tensor w0;     // [Cout,Cin,k,k]
    Tensor p;      // [Cout, L]
    Tensor q;      // [k*k*Cin, L]
    Tensor w_fc1;  // [C/r, C]  (C = channels of the conditioning feature)
    Tensor w_fc2;  // [L*L, C/r]

    std::size_t cout() const { return w0.extent(0); }
    std::size_t cin() const { return w0.extent(1); }
    std::size_t ksize() const { return w0.extent(2); }
    std::size_t latent() const { return p.extent(1); }
    std::size_t cond_channels() const { return w_fc1.extent(1); }

    void validate() const;  // throws on inconsistent shapes
};

/// Builds a kernel set with He/Glorot-style uniform init, seeded. C must be
/// divisible by r.
DcdcKernelSet make_dcdc(std::size_t cout, std::size_t cin, std::size_t k, std::size_t cond_c,
                        std::size_t latent, std::size_t reduction, Rng& rng);

/// Intermediate values of one dcdc_forward, retained for the backward pass.
struct DcdcCache {
    Tensor gap;      // [C]
    Tensor fc1_pre;  // [C/r], pre-sigmoid
    Tensor hidden;   // [C/r], sigmoid(fc1_pre)
    Tensor phi;      // [L,L]
    Tensor kernel;   // [Cout,Cin,k,k], assembled
    Tensor pre_act;  // [Cout,H,W], conv output before the sigmoid
    Tensor maps;     // [Cout,H,W], final attention maps
};

/// Phi(X) = reshape(W_fc2 * sigmoid(W_fc1 * GAP(X)), L x L), row-major reshape.
Tensor affinity(const DcdcKernelSet& ks, const Tensor& x, DcdcCache* cache = nullptr);

/// W(X) = W0 + unflatten(P * phi * Q^T).
Tensor assemble_kernel(const DcdcKernelSet& ks, const Tensor& phi);

/// sigmoid(conv2d(x, W(X), stride 1, pad (k-1)/2)): shape-preserving attention
/// maps in (0,1), one per output channel.
Tensor dcdc_forward(const DcdcKernelSet& ks, const Tensor& x, DcdcCache* cache = nullptr);

/// Gradients of a scalar objective w.r.t. every kernel-set parameter and the
/// conditioning input, given d(objective)/d(maps).
struct DcdcGrads {
    Tensor w0, p, q, w_fc1, w_fc2;
    Tensor x;
};

DcdcGrads dcdc_backward(const DcdcKernelSet& ks, const Tensor& x, const DcdcCache& cache,
                        const Tensor& upstream_maps);

/// Gradient of <upstream, assemble_kernel(ks, phi)> w.r.t. (P, phi, Q).
/// Shared by dcdc_backward and the standalone kernel-assembly gradcheck.
void assemble_kernel_backward(const DcdcKernelSet& ks, const Tensor& phi,
                              const Tensor& upstream_kernel, Tensor* d_p, Tensor* d_phi,
                              Tensor* d_q);

/// Gradient of the affinity output back to (W_fc1, W_fc2, x).
void affinity_backward(const DcdcKernelSet& ks, const Tensor& x, const DcdcCache& cache,
                       const Tensor& d_phi, Tensor* d_fc1, Tensor* d_fc2, Tensor* d_x);

// --- Vanilla path training support (ablation arm) ---

struct VanillaCache {
    Tensor gap;      // [C]
    Tensor scores;   // [S] pre-softmax
    Tensor pi;       // [S]
    Tensor kernel;   // mixed kernel
    Tensor pre_act;  // conv output before sigmoid
    Tensor maps;
};

/// sigmoid(conv2d(x, vanilla_kernel(dc, x), stride 1, pad (k-1)/2)).
Tensor vanilla_forward(const VanillaDynConv& dc, const Tensor& x, VanillaCache* cache = nullptr);

struct VanillaGrads {
    std::vector<Tensor> candidates;
    Tensor attn_weight;
    Tensor x;
};

VanillaGrads vanilla_backward(const VanillaDynConv& dc, const Tensor& x,
                              const VanillaCache& cache, const Tensor& upstream_maps);

/// Total parameter count helpers for the efficiency comparison.
std::size_t dcdc_param_count(std::size_t cout, std::size_t cin, std::size_t k,
                             std::size_t cond_c, std::size_t latent, std::size_t reduction);
std::size_t vanilla_param_count(std::size_t cout, std::size_t cin, std::size_t k,
                                std::size_t cond_c, std::size_t s);

}  // namespace gci

#endif  // GCI_DCDC_HPP_
