#ifndef GCI_CIL_HPP_
#define GCI_CIL_HPP_

#include <cstddef>
#include <vector>

#include "gci/dcdc.hpp"
#include "gci/rng.hpp"
#include "gci/tensor.hpp"

namespace gci {

enum class AttentionKind { Factual, Counterfactual };

/// M spatial attention maps over a feature map, all values strictly in (0,1).
struct AttentionMaps {
    AttentionKind kind = AttentionKind::Factual;
    Tensor maps;  // [M,H,W]

    std::size_t channels() const { return maps.extent(0); }
};

/// Runs the generator on the shared backbone feature. Factual and
/// counterfactual generators are independently parameterized instances of the
/// same mechanism; only the tag differs here.
AttentionMaps generate_attention(const DcdcKernelSet& gen, const Tensor& x, AttentionKind kind,
                                 DcdcCache* cache = nullptr);

/// Counterfactual maps drawn from a fixed distribution instead of a learned
/// generator (ablation arm): uniform(0,1) or sigmoid-squashed standard normal.
enum class PredefDist { Uniform, Normal };
AttentionMaps predefined_counterfactual(const std::vector<std::size_t>& shape, PredefDist dist,
                                        Rng& rng);

/// Factual/counterfactual likelihoods and their difference.
/// y_e = y_f - y_cf holds elementwise by construction.
struct EffectLogits {
    Tensor y_f;   // [K]
    Tensor y_cf;  // [K]
    Tensor y_e;   // [K]
};

EffectLogits make_effect_logits(Tensor y_f, Tensor y_cf);

/// Saved intermediates for the likelihood backward pass.
struct InterventionCache {
    Tensor pooled_f;   // [M, C]: spatially pooled attended feature per map
    Tensor pooled_cf;  // [M, C]
};

/// For each attention channel m: attend (X * A_m broadcast over feature
/// channels), pool spatially, apply the shared linear head; the branch logit
/// vector is the mean over the M channels. head is [K, C], bias-free.
EffectLogits intervention_likelihoods(const Tensor& x, const AttentionMaps& a,
                                      const AttentionMaps& c_att, const Tensor& head,
                                      InterventionCache* cache = nullptr);

/// Gradients of a scalar objective through intervention_likelihoods, given
/// d(objective)/d(y_f) and d(objective)/d(y_cf). Accumulates into d_head and
/// d_x (which must be pre-sized, zero or holding other contributions).
void intervention_backward(const Tensor& x, const AttentionMaps& a, const AttentionMaps& c_att,
                           const Tensor& head, const InterventionCache& cache,
                           const Tensor& d_y_f, const Tensor& d_y_cf, Tensor* d_head,
                           Tensor* d_x, Tensor* d_a, Tensor* d_c);

/// Cross-entropy of softmax(y_e) against the label; log-sum-exp with max
/// subtraction so a zero effect vector gives exactly ln(K).
double counterfactual_loss(const EffectLogits& e, std::size_t label);

/// d(loss)/d(y_e) = softmax(y_e) - onehot(label).
Tensor counterfactual_loss_grad(const EffectLogits& e, std::size_t label);

/// Plain cross-entropy over arbitrary logits (used by the no-CIL baseline,
/// where the factual likelihood itself is trained).
double cross_entropy(const Tensor& logits, std::size_t label);
Tensor cross_entropy_grad(const Tensor& logits, std::size_t label);

}  // namespace gci

#endif  // GCI_CIL_HPP_
