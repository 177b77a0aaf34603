#include "gci/cil.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "gci/errors.hpp"

namespace gci {

AttentionMaps generate_attention(const DcdcKernelSet& gen, const Tensor& x, AttentionKind kind,
                                 DcdcCache* cache) {
    AttentionMaps out;
    out.kind = kind;
    out.maps = dcdc_forward(gen, x, cache);
    return out;
}

AttentionMaps predefined_counterfactual(const std::vector<std::size_t>& shape, PredefDist dist,
                                        Rng& rng) {
    if (shape.size() != 3)
        throw std::invalid_argument("predefined_counterfactual: shape must be [M,H,W]");
    AttentionMaps out;
    out.kind = AttentionKind::Counterfactual;
    out.maps = Tensor(shape);
    for (std::size_t i = 0; i < out.maps.size(); ++i) {
        out.maps[i] = dist == PredefDist::Uniform ? rng.uniform() : sigmoid(rng.normal());
    }
    return out;
}

EffectLogits make_effect_logits(Tensor y_f, Tensor y_cf) {
    if (!y_f.same_shape(y_cf))
        throw std::invalid_argument("make_effect_logits: shape mismatch " + y_f.shape_str() +
                                    " vs " + y_cf.shape_str());
    EffectLogits e;
    e.y_e = Tensor(y_f.shape());
    for (std::size_t i = 0; i < y_f.size(); ++i) e.y_e[i] = y_f[i] - y_cf[i];
    e.y_f = std::move(y_f);
    e.y_cf = std::move(y_cf);
    return e;
}

namespace {

// Pooled attended features for one branch: out[m] = GAP(x * maps[m]).
Tensor pooled_attended(const Tensor& x, const Tensor& maps) {
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t m_count = maps.extent(0);
    Tensor pooled({m_count, c});
    const double inv_cells = 1.0 / static_cast<double>(h * w);
    for (std::size_t m = 0; m < m_count; ++m) {
        for (std::size_t ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) acc += x.at(ci, i, j) * maps.at(m, i, j);
            pooled.at(m, ci) = acc * inv_cells;
        }
    }
    return pooled;
}

// Mean over M of head * pooled[m].
Tensor branch_logits(const Tensor& head, const Tensor& pooled) {
    const std::size_t m_count = pooled.extent(0), c = pooled.extent(1), k = head.extent(0);
    Tensor y = Tensor::zeros({k});
    for (std::size_t m = 0; m < m_count; ++m) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            double acc = 0.0;
            for (std::size_t ci = 0; ci < c; ++ci) acc += head.at(ki, ci) * pooled.at(m, ci);
            y[ki] += acc;
        }
    }
    y *= 1.0 / static_cast<double>(m_count);
    return y;
}

}  // namespace

EffectLogits intervention_likelihoods(const Tensor& x, const AttentionMaps& a,
                                      const AttentionMaps& c_att, const Tensor& head,
                                      InterventionCache* cache) {
    if (x.rank() != 3)
        throw std::invalid_argument("intervention_likelihoods: feature must be [C,H,W]");
    if (!a.maps.same_shape(c_att.maps))
        throw std::invalid_argument("intervention_likelihoods: factual maps " +
                                    a.maps.shape_str() + " != counterfactual maps " +
                                    c_att.maps.shape_str());
    if (a.maps.rank() != 3 || a.maps.extent(1) != x.extent(1) || a.maps.extent(2) != x.extent(2))
        throw std::invalid_argument("intervention_likelihoods: maps " + a.maps.shape_str() +
                                    " do not cover feature " + x.shape_str());
    if (head.rank() != 2 || head.extent(1) != x.extent(0))
        throw std::invalid_argument("intervention_likelihoods: head " + head.shape_str() +
                                    " does not accept " + std::to_string(x.extent(0)) +
                                    " channels");

    Tensor pooled_f = pooled_attended(x, a.maps);
    Tensor pooled_cf = pooled_attended(x, c_att.maps);
    EffectLogits e = make_effect_logits(branch_logits(head, pooled_f),
                                        branch_logits(head, pooled_cf));
    ensure_finite(e.y_f, "intervention factual logits");
    ensure_finite(e.y_cf, "intervention counterfactual logits");
    if (cache) {
        cache->pooled_f = std::move(pooled_f);
        cache->pooled_cf = std::move(pooled_cf);
    }
    return e;
}

namespace {

// Backward of one branch: given d_y [K], accumulate d_head, d_x, d_maps.
void branch_backward(const Tensor& x, const Tensor& maps, const Tensor& head,
                     const Tensor& pooled, const Tensor& d_y, Tensor* d_head, Tensor* d_x,
                     Tensor* d_maps) {
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t m_count = maps.extent(0), k = head.extent(0);
    const double inv_m = 1.0 / static_cast<double>(m_count);
    const double inv_cells = 1.0 / static_cast<double>(h * w);
    for (std::size_t m = 0; m < m_count; ++m) {
        // d_pooled[m] = head^T d_y / M; d_head += d_y/M (x) pooled[m].
        std::vector<double> d_pooled(c, 0.0);
        for (std::size_t ki = 0; ki < k; ++ki) {
            const double dy = d_y[ki] * inv_m;
            if (dy == 0.0) continue;
            for (std::size_t ci = 0; ci < c; ++ci) {
                d_pooled[ci] += dy * head.at(ki, ci);
                if (d_head) d_head->at(ki, ci) += dy * pooled.at(m, ci);
            }
        }
        // Through the spatial mean and the elementwise attention product.
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double dp = d_pooled[ci] * inv_cells;
            if (dp == 0.0) continue;
            for (std::size_t i = 0; i < h; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    if (d_x) d_x->at(ci, i, j) += dp * maps.at(m, i, j);
                    if (d_maps) d_maps->at(m, i, j) += dp * x.at(ci, i, j);
                }
            }
        }
    }
}

}  // namespace

void intervention_backward(const Tensor& x, const AttentionMaps& a, const AttentionMaps& c_att,
                           const Tensor& head, const InterventionCache& cache,
                           const Tensor& d_y_f, const Tensor& d_y_cf, Tensor* d_head,
                           Tensor* d_x, Tensor* d_a, Tensor* d_c) {
    if (d_a) *d_a = Tensor::zeros(a.maps.shape());
    if (d_c) *d_c = Tensor::zeros(c_att.maps.shape());
    branch_backward(x, a.maps, head, cache.pooled_f, d_y_f, d_head, d_x, d_a);
    branch_backward(x, c_att.maps, head, cache.pooled_cf, d_y_cf, d_head, d_x, d_c);
}

double cross_entropy(const Tensor& logits, std::size_t label) {
    if (logits.rank() != 1 || logits.size() == 0)
        throw std::invalid_argument("cross_entropy: logits must be a non-empty vector");
    if (label >= logits.size())
        throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(logits.size()) +
                                    " classes");
    double m = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
    double acc = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) acc += std::exp(logits[i] - m);
    const double loss = m + std::log(acc) - logits[label];
    ensure_finite(loss, "cross_entropy");
    return loss;
}

Tensor cross_entropy_grad(const Tensor& logits, std::size_t label) {
    Tensor g = softmax(logits);
    g[label] -= 1.0;
    return g;
}

double counterfactual_loss(const EffectLogits& e, std::size_t label) {
    return cross_entropy(e.y_e, label);
}

Tensor counterfactual_loss_grad(const EffectLogits& e, std::size_t label) {
    return cross_entropy_grad(e.y_e, label);
}

}  // namespace gci
