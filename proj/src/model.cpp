#include "gci/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "gci/diversity.hpp"
#include "gci/errors.hpp"
#include "gci/threads.hpp"

namespace gci {

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

Tensor backbone_frame_forward(const Backbone& bb, const Tensor& frame, BackboneCache* cache) {
    if (frame.rank() != 3)
        throw std::invalid_argument("backbone: frame must be [C,H,W], got " + frame.shape_str());
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
        cache->act.clear();
        cache->pool_idx.clear();
    }
    Tensor x = frame;
    for (const ConvBlock& blk : bb.blocks) {
        if (cache) cache->inputs.push_back(x);
        Tensor pre = conv2d(x, blk.weight, 1, 1);
        const std::size_t c = pre.extent(0);
        const std::size_t cells = pre.extent(1) * pre.extent(2);
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double b = blk.bias[ci];
            double* row = pre.data() + ci * cells;
            for (std::size_t i = 0; i < cells; ++i) row[i] += b;
        }
        Tensor act = leaky_relu(pre, bb.slope);
        if (cache) cache->pre.push_back(std::move(pre));
        if (blk.pool) {
            std::vector<std::size_t> idx;
            Tensor pooled = max_pool2x2(act, &idx);
            if (cache) {
                cache->act.push_back(std::move(act));
                cache->pool_idx.push_back(std::move(idx));
            }
            x = std::move(pooled);
        } else {
            if (cache) {
                cache->act.push_back(act);
                cache->pool_idx.emplace_back();
            }
            x = std::move(act);
        }
    }
    return x;
}

void backbone_frame_backward(const Backbone& bb, const BackboneCache& cache, const Tensor& d_out,
                             std::vector<Tensor>* d_weights, std::vector<Tensor>* d_biases) {
    const std::size_t n = bb.blocks.size();
    Tensor d = d_out;
    for (std::size_t ri = 0; ri < n; ++ri) {
        const std::size_t bi = n - 1 - ri;
        const ConvBlock& blk = bb.blocks[bi];
        if (blk.pool) d = max_pool2x2_grad(cache.act[bi], d, cache.pool_idx[bi]);
        Tensor d_pre = leaky_relu_grad(cache.pre[bi], d, bb.slope);
        (*d_weights)[bi] += conv2d_grad_kernel(cache.inputs[bi], blk.weight, d_pre, 1, 1);
        const std::size_t c = d_pre.extent(0);
        const std::size_t cells = d_pre.extent(1) * d_pre.extent(2);
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double* row = d_pre.data() + ci * cells;
            double acc = 0.0;
            for (std::size_t i = 0; i < cells; ++i) acc += row[i];
            (*d_biases)[bi][ci] += acc;
        }
        if (bi > 0) d = conv2d_grad_input(cache.inputs[bi], blk.weight, d_pre, 1, 1);
    }
}

Tensor backbone_forward(const Backbone& bb, const Tensor& seq,
                        std::vector<BackboneCache>* caches) {
    if (seq.rank() != 4)
        throw std::invalid_argument("backbone: sequence must be [T,Cin,H,W], got " +
                                    seq.shape_str());
    const std::size_t t = seq.extent(0);
    if (t == 0) throw std::invalid_argument("backbone: empty sequence");
    if (caches) caches->resize(t);
    Tensor out;
    const std::size_t cin = seq.extent(1), h = seq.extent(2), w = seq.extent(3);
    const std::size_t frame_size = cin * h * w;
    for (std::size_t ti = 0; ti < t; ++ti) {
        Tensor frame = Tensor::from_data(
            {cin, h, w}, std::vector<double>(seq.data() + ti * frame_size,
                                             seq.data() + (ti + 1) * frame_size));
        Tensor feat = backbone_frame_forward(bb, frame, caches ? &(*caches)[ti] : nullptr);
        if (ti == 0) {
            out = Tensor::zeros({t, feat.extent(0), feat.extent(1), feat.extent(2)});
        }
        std::copy(feat.data(), feat.data() + feat.size(), out.data() + ti * feat.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding head
// ---------------------------------------------------------------------------

Tensor embed(const Tensor& feat, const EmbeddingHead& head, EmbedCache* cache) {
    if (feat.rank() != 3)
        throw std::invalid_argument("embed: feature must be [C,H,W], got " + feat.shape_str());
    const std::size_t b_count = head.strip_weight.size();
    if (b_count == 0) throw std::invalid_argument("embed: no strip maps configured");
    const std::size_t c = feat.extent(0), h = feat.extent(1), w = feat.extent(2);
    if (h % b_count != 0)
        throw std::invalid_argument("embed: height " + std::to_string(h) +
                                    " not divisible into " + std::to_string(b_count) +
                                    " strips");
    const std::size_t strip_h = h / b_count;
    const std::size_t d_dim = head.strip_weight.front().extent(0);
    if (cache) {
        cache->strip_vec.assign(b_count, Tensor());
        cache->max_idx.assign(b_count, {});
    }
    Tensor out({b_count, d_dim});
    for (std::size_t b = 0; b < b_count; ++b) {
        const Tensor& wmat = head.strip_weight[b];
        if (wmat.rank() != 2 || wmat.extent(0) != d_dim || wmat.extent(1) != c)
            throw std::invalid_argument("embed: strip map " + std::to_string(b) + " shape " +
                                        wmat.shape_str() + " incompatible with feature " +
                                        feat.shape_str());
        Tensor s({c});
        std::vector<std::size_t> idx(c, 0);
        const std::size_t row0 = b * strip_h;
        for (std::size_t ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            double best = feat.at(ci, row0, 0);
            std::size_t best_at = (ci * h + row0) * w;
            for (std::size_t i = row0; i < row0 + strip_h; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    const double v = feat.at(ci, i, j);
                    acc += v;
                    if (v > best) {
                        best = v;
                        best_at = (ci * h + i) * w + j;
                    }
                }
            }
            s[ci] = acc / static_cast<double>(strip_h * w) + best;
            idx[ci] = best_at;
        }
        Tensor e = matvec(wmat, s);
        std::copy(e.data(), e.data() + d_dim, out.data() + b * d_dim);
        if (cache) {
            cache->strip_vec[b] = std::move(s);
            cache->max_idx[b] = std::move(idx);
        }
    }
    ensure_finite(out, "embed output");
    return out;
}

void embed_backward(const Tensor& feat, const EmbeddingHead& head, const EmbedCache& cache,
                    const Tensor& d_emb, std::vector<Tensor>* d_weights, Tensor* d_feat) {
    const std::size_t b_count = head.strip_weight.size();
    const std::size_t c = feat.extent(0), h = feat.extent(1), w = feat.extent(2);
    const std::size_t strip_h = h / b_count;
    const std::size_t d_dim = head.strip_weight.front().extent(0);
    for (std::size_t b = 0; b < b_count; ++b) {
        Tensor d_e({d_dim});
        std::copy(d_emb.data() + b * d_dim, d_emb.data() + (b + 1) * d_dim, d_e.data());
        if (d_weights) (*d_weights)[b] += outer(d_e, cache.strip_vec[b]);
        if (!d_feat) continue;
        Tensor d_s = matvec_t(head.strip_weight[b], d_e);
        const std::size_t row0 = b * strip_h;
        const double inv_cells = 1.0 / static_cast<double>(strip_h * w);
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double spread = d_s[ci] * inv_cells;
            for (std::size_t i = row0; i < row0 + strip_h; ++i)
                for (std::size_t j = 0; j < w; ++j) d_feat->at(ci, i, j) += spread;
            (*d_feat)[cache.max_idx[b][ci]] += d_s[ci];
        }
    }
}

// ---------------------------------------------------------------------------
// Batch-hard triplet loss
// ---------------------------------------------------------------------------

double triplet_loss(const Tensor& embeddings, const std::vector<std::size_t>& labels,
                    double margin, Tensor* d_embeddings) {
    if (embeddings.rank() != 3)
        throw std::invalid_argument("triplet_loss: embeddings must be [N,B,D], got " +
                                    embeddings.shape_str());
    const std::size_t n = embeddings.extent(0), b_count = embeddings.extent(1),
                      d_dim = embeddings.extent(2);
    if (labels.size() != n)
        throw std::invalid_argument("triplet_loss: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(n) + " embeddings");
    // Batch composition: >= 2 identities, every identity with >= 2 samples.
    std::map<std::size_t, std::size_t> counts;
    for (std::size_t l : labels) ++counts[l];
    if (counts.size() < 2)
        throw std::invalid_argument("triplet_loss: batch needs >= 2 identities");
    for (const auto& [label, cnt] : counts) {
        if (cnt < 2)
            throw std::invalid_argument("triplet_loss: identity " + std::to_string(label) +
                                        " has a single sample in the batch");
    }

    auto strip_dist = [&](std::size_t i, std::size_t j, std::size_t b) {
        const double* ei = embeddings.data() + (i * b_count + b) * d_dim;
        const double* ej = embeddings.data() + (j * b_count + b) * d_dim;
        double acc = 0.0;
        for (std::size_t k = 0; k < d_dim; ++k) {
            const double diff = ei[k] - ej[k];
            acc += diff * diff;
        }
        return std::sqrt(acc);
    };

    struct ActiveTerm {
        std::size_t anchor, strip, pos, neg;
        double d_pos, d_neg;
    };
    std::vector<ActiveTerm> active;
    double loss_sum = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < b_count; ++b) {
            double hardest_pos = -1.0, hardest_neg = 0.0;
            std::size_t pos_at = a, neg_at = a;
            bool neg_seen = false;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == a) continue;
                const double dist = strip_dist(a, j, b);
                if (labels[j] == labels[a]) {
                    if (dist > hardest_pos) {
                        hardest_pos = dist;
                        pos_at = j;
                    }
                } else if (!neg_seen || dist < hardest_neg) {
                    hardest_neg = dist;
                    neg_at = j;
                    neg_seen = true;
                }
            }
            const double term = hardest_pos - hardest_neg + margin;
            if (term > 0.0) {
                loss_sum += term;
                active.push_back({a, b, pos_at, neg_at, hardest_pos, hardest_neg});
            }
        }
    }
    if (d_embeddings) *d_embeddings = Tensor::zeros(embeddings.shape());
    if (active.empty()) return 0.0;
    const double scale = 1.0 / static_cast<double>(active.size());
    if (d_embeddings) {
        for (const ActiveTerm& t : active) {
            double* d_a = d_embeddings->data() + (t.anchor * b_count + t.strip) * d_dim;
            const double* e_a = embeddings.data() + (t.anchor * b_count + t.strip) * d_dim;
            if (t.d_pos > 0.0) {
                double* d_p = d_embeddings->data() + (t.pos * b_count + t.strip) * d_dim;
                const double* e_p = embeddings.data() + (t.pos * b_count + t.strip) * d_dim;
                const double c = scale / t.d_pos;
                for (std::size_t k = 0; k < d_dim; ++k) {
                    const double g = c * (e_a[k] - e_p[k]);
                    d_a[k] += g;
                    d_p[k] -= g;
                }
            }
            if (t.d_neg > 0.0) {
                double* d_n = d_embeddings->data() + (t.neg * b_count + t.strip) * d_dim;
                const double* e_n = embeddings.data() + (t.neg * b_count + t.strip) * d_dim;
                const double c = scale / t.d_neg;
                for (std::size_t k = 0; k < d_dim; ++k) {
                    const double g = c * (e_a[k] - e_n[k]);
                    d_a[k] -= g;
                    d_n[k] += g;
                }
            }
        }
    }
    return loss_sum * scale;
}

// ---------------------------------------------------------------------------
// Attention generators
// ---------------------------------------------------------------------------

Tensor generator_forward(const Generator& gen, const Tensor& x, Rng& rng, GenCache* cache) {
    switch (gen.mode) {
        case GenMode::Decomposed: {
            Tensor maps = dcdc_forward(gen.dcdc, x, cache ? &cache->dcdc : nullptr);
            if (cache) cache->maps = maps;
            return maps;
        }
        case GenMode::Vanilla: {
            Tensor maps = vanilla_forward(gen.vanilla, x, cache ? &cache->vanilla : nullptr);
            if (cache) cache->maps = maps;
            return maps;
        }
        case GenMode::Static: {
            const int pad = static_cast<int>((gen.static_kernel.extent(2) - 1) / 2);
            Tensor pre = conv2d(x, gen.static_kernel, 1, pad);
            Tensor maps = sigmoid(pre);
            if (cache) {
                cache->static_pre = std::move(pre);
                cache->maps = maps;
            }
            return maps;
        }
        case GenMode::Predefined: {
            AttentionMaps maps = predefined_counterfactual(
                {gen.predef_channels, x.extent(1), x.extent(2)}, gen.dist, rng);
            if (cache) cache->maps = maps.maps;
            return maps.maps;
        }
    }
    throw std::logic_error("generator_forward: unreachable");
}

void generator_backward(const Generator& gen, const Tensor& x, const GenCache& cache,
                        const Tensor& d_maps, const std::string& prefix,
                        std::map<std::string, Tensor>* grads, Tensor* d_x) {
    auto accum = [grads](const std::string& name, Tensor g) {
        Tensor& slot = (*grads)[name];
        if (slot.empty())
            slot = std::move(g);
        else
            slot += g;
    };
    switch (gen.mode) {
        case GenMode::Decomposed: {
            DcdcGrads g = dcdc_backward(gen.dcdc, x, cache.dcdc, d_maps);
            accum(prefix + ".w0", std::move(g.w0));
            accum(prefix + ".p", std::move(g.p));
            accum(prefix + ".q", std::move(g.q));
            accum(prefix + ".fc1", std::move(g.w_fc1));
            accum(prefix + ".fc2", std::move(g.w_fc2));
            if (d_x) *d_x += g.x;
            return;
        }
        case GenMode::Vanilla: {
            VanillaGrads g = vanilla_backward(gen.vanilla, x, cache.vanilla, d_maps);
            for (std::size_t s = 0; s < g.candidates.size(); ++s)
                accum(prefix + ".cand" + std::to_string(s), std::move(g.candidates[s]));
            accum(prefix + ".attn", std::move(g.attn_weight));
            if (d_x) *d_x += g.x;
            return;
        }
        case GenMode::Static: {
            Tensor d_pre(cache.maps.shape());
            for (std::size_t i = 0; i < d_pre.size(); ++i)
                d_pre[i] = d_maps[i] * cache.maps[i] * (1.0 - cache.maps[i]);
            const int pad = static_cast<int>((gen.static_kernel.extent(2) - 1) / 2);
            accum(prefix + ".kernel", conv2d_grad_kernel(x, gen.static_kernel, d_pre, 1, pad));
            if (d_x) *d_x += conv2d_grad_input(x, gen.static_kernel, d_pre, 1, pad);
            return;
        }
        case GenMode::Predefined:
            return;  // nothing learnable, nothing flows back
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

LossBundle total_loss(double l_cf, double l_tri, double l_div, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    LossBundle b;
    b.l_cf = l_cf;
    b.l_tri = l_tri;
    b.l_div = l_div;
    b.lambda = lambda;
    b.total = l_cf + l_tri + lambda * l_div;
    ensure_finite(b.total, "total loss");
    return b;
}

namespace {

void register_generator(const std::string& prefix, Generator& gen,
                        std::vector<std::pair<std::string, Tensor*>>* out) {
    switch (gen.mode) {
        case GenMode::Decomposed:
            out->emplace_back(prefix + ".w0", &gen.dcdc.w0);
            out->emplace_back(prefix + ".p", &gen.dcdc.p);
            out->emplace_back(prefix + ".q", &gen.dcdc.q);
            out->emplace_back(prefix + ".fc1", &gen.dcdc.w_fc1);
            out->emplace_back(prefix + ".fc2", &gen.dcdc.w_fc2);
            return;
        case GenMode::Vanilla:
            for (std::size_t s = 0; s < gen.vanilla.candidates.size(); ++s)
                out->emplace_back(prefix + ".cand" + std::to_string(s),
                                  &gen.vanilla.candidates[s]);
            out->emplace_back(prefix + ".attn", &gen.vanilla.attn_weight);
            return;
        case GenMode::Static:
            out->emplace_back(prefix + ".kernel", &gen.static_kernel);
            return;
        case GenMode::Predefined:
            return;
    }
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> GciModel::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
        out.emplace_back("backbone.conv" + std::to_string(i) + ".weight",
                         &backbone.blocks[i].weight);
        out.emplace_back("backbone.conv" + std::to_string(i) + ".bias",
                         &backbone.blocks[i].bias);
    }
    for (std::size_t b = 0; b < head.strip_weight.size(); ++b)
        out.emplace_back("embed.strip" + std::to_string(b) + ".weight", &head.strip_weight[b]);
    out.emplace_back("classifier.weight", &classifier);
    register_generator("gen_f", gen_f, &out);
    register_generator("gen_cf", gen_cf, &out);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> GciModel::parameters() const {
    auto mutable_params = const_cast<GciModel*>(this)->parameters();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mutable_params.size());
    for (auto& [name, t] : mutable_params) out.emplace_back(name, t);
    return out;
}

namespace {

Generator make_generator(const ModelConfig& cfg, GenMode mode, Rng& rng) {
    Generator gen;
    gen.mode = mode;
    gen.dist = cfg.predef_dist;
    gen.predef_channels = cfg.attn_channels;
    const std::size_t c = cfg.channels.back();
    const std::size_t m = cfg.attn_channels;
    switch (mode) {
        case GenMode::Decomposed:
            gen.dcdc = make_dcdc(m, c, 3, c, cfg.latent, cfg.reduction, rng);
            break;
        case GenMode::Vanilla: {
            const double bound = std::sqrt(6.0 / static_cast<double>(c * 9));
            for (std::size_t s = 0; s < cfg.vanilla_s; ++s)
                gen.vanilla.candidates.push_back(
                    rng.uniform_tensor({m, c, 3, 3}, -bound, bound));
            const double abound = std::sqrt(6.0 / static_cast<double>(c + cfg.vanilla_s));
            gen.vanilla.attn_weight = rng.uniform_tensor({cfg.vanilla_s, c}, -abound, abound);
            break;
        }
        case GenMode::Static: {
            const double bound = std::sqrt(6.0 / static_cast<double>(c * 9));
            gen.static_kernel = rng.uniform_tensor({m, c, 3, 3}, -bound, bound);
            break;
        }
        case GenMode::Predefined:
            break;
    }
    return gen;
}

}  // namespace

GciModel make_model(const ModelConfig& cfg) {
    if (cfg.channels.empty()) throw ConfigError("model: channel plan must not be empty");
    if (cfg.pools.size() != cfg.channels.size())
        throw ConfigError("model: pool plan length " + std::to_string(cfg.pools.size()) +
                          " != channel plan length " + std::to_string(cfg.channels.size()));
    if (cfg.classes < 2) throw ConfigError("model: need at least 2 classes");
    if (cfg.strips < 1) throw ConfigError("model: need at least 1 strip");
    if (cfg.attn_channels < 1) throw ConfigError("model: need at least 1 attention channel");
    if (cfg.factual_mode == GenMode::Predefined)
        throw ConfigError("model: the factual generator cannot be a predefined distribution");

    GciModel m;
    m.cfg = cfg;
    Rng rng(cfg.init_seed);
    m.backbone.slope = cfg.slope;
    std::size_t cin = 1;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        ConvBlock blk;
        const std::size_t cout = cfg.channels[i];
        const double bound = std::sqrt(6.0 / static_cast<double>(cin * 9));
        blk.weight = rng.uniform_tensor({cout, cin, 3, 3}, -bound, bound);
        blk.bias = Tensor::zeros({cout});
        blk.pool = cfg.pools[i];
        m.backbone.blocks.push_back(std::move(blk));
        cin = cout;
    }
    const std::size_t c_out = cfg.channels.back();
    for (std::size_t b = 0; b < cfg.strips; ++b) {
        const double bound = std::sqrt(6.0 / static_cast<double>(c_out + cfg.embed_dim));
        m.head.strip_weight.push_back(
            rng.uniform_tensor({cfg.embed_dim, c_out}, -bound, bound));
    }
    const double cbound = std::sqrt(6.0 / static_cast<double>(c_out + cfg.classes));
    m.classifier = rng.uniform_tensor({cfg.classes, c_out}, -cbound, cbound);
    m.gen_f = make_generator(cfg, cfg.factual_mode, rng);
    m.gen_cf = make_generator(cfg, cfg.counterfactual_mode, rng);
    return m;
}

Tensor infer_embedding(const GciModel& m, const Tensor& seq) {
    Tensor feats = backbone_forward(m.backbone, seq, nullptr);
    Tensor pooled = temporal_max(feats, nullptr);
    return embed(pooled, m.head, nullptr);
}

namespace {

struct PerSample {
    std::vector<BackboneCache> frames;
    Tensor feats;
    std::vector<std::size_t> tmax_idx;
    Tensor pooled;
    EmbedCache ecache;
    Tensor embedding;
    GenCache f_cache, cf_cache;
    AttentionMaps a, c;
    InterventionCache icache;
    EffectLogits logits;
};

}  // namespace

LossBundle model_forward_backward(GciModel& m, const std::vector<Tensor>& sequences,
                                  const std::vector<std::size_t>& labels, Rng& cf_rng,
                                  std::map<std::string, Tensor>* grads,
                                  std::vector<SampleForward>* details) {
    const std::size_t n = sequences.size();
    if (n == 0) throw std::invalid_argument("model: empty batch");
    if (labels.size() != n)
        throw std::invalid_argument("model: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(n) + " sequences");
    for (std::size_t l : labels) {
        if (l >= m.cfg.classes)
            throw std::invalid_argument("model: label " + std::to_string(l) +
                                        " out of range for " + std::to_string(m.cfg.classes) +
                                        " classes");
    }
    const bool want_grads = grads != nullptr;
    std::vector<PerSample> ps(n);

    // Phase 1: heavy per-sample feature extraction, sample-parallel.
    parallel_for(n, [&](std::size_t i) {
        PerSample& s = ps[i];
        s.feats = backbone_forward(m.backbone, sequences[i], want_grads ? &s.frames : nullptr);
        s.pooled = temporal_max(s.feats, want_grads ? &s.tmax_idx : nullptr);
        s.embedding = embed(s.pooled, m.head, want_grads ? &s.ecache : nullptr);
    });

    // Phase 2: attention generation; sequential so predefined draws consume
    // the stream in sample order no matter the worker count.
    for (std::size_t i = 0; i < n; ++i) {
        PerSample& s = ps[i];
        s.a.kind = AttentionKind::Factual;
        s.a.maps = generator_forward(m.gen_f, s.pooled, cf_rng, &s.f_cache);
        s.c.kind = AttentionKind::Counterfactual;
        s.c.maps = generator_forward(m.gen_cf, s.pooled, cf_rng, &s.cf_cache);
        s.logits = intervention_likelihoods(s.pooled, s.a, s.c, m.classifier, &s.icache);
    }

    // Loss terms, fixed reduction order.
    const std::size_t b_count = m.head.strip_weight.size();
    const std::size_t d_dim = m.head.strip_weight.front().extent(0);
    Tensor batch_emb({n, b_count, d_dim});
    for (std::size_t i = 0; i < n; ++i)
        std::copy(ps[i].embedding.data(), ps[i].embedding.data() + b_count * d_dim,
                  batch_emb.data() + i * b_count * d_dim);
    Tensor d_emb;
    const double l_tri =
        triplet_loss(batch_emb, labels, m.cfg.margin, want_grads ? &d_emb : nullptr);

    double l_cf = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        l_cf += m.cfg.cil_on ? counterfactual_loss(ps[i].logits, labels[i])
                             : cross_entropy(ps[i].logits.y_f, labels[i]);
    }
    l_cf /= static_cast<double>(n);

    // Diversity over whichever generators carry low-rank bases.
    double l_div = 0.0;
    const bool f_dec = m.gen_f.mode == GenMode::Decomposed;
    const bool c_dec = m.gen_cf.mode == GenMode::Decomposed;
    DiversityTerm div_term;
    if (f_dec && c_dec) {
        div_term = diversity_loss(m.gen_f.dcdc.p, m.gen_f.dcdc.q, m.gen_cf.dcdc.p,
                                  m.gen_cf.dcdc.q);
        l_div = div_term.value;
    } else if (f_dec || c_dec) {
        const DcdcKernelSet& ks = f_dec ? m.gen_f.dcdc : m.gen_cf.dcdc;
        div_term = diversity_loss(ks.p, ks.q, Tensor::zeros({1, 1}), Tensor::zeros({1, 1}));
        l_div = div_term.value;
    }
    const double lambda_eff = m.cfg.dc_on ? m.cfg.lambda : 0.0;

    if (want_grads) {
        // Fixed gradient schema: every registered parameter gets a slot.
        for (auto& [name, t] : m.parameters()) {
            auto it = grads->find(name);
            if (it == grads->end())
                (*grads)[name] = Tensor::zeros(t->shape());
            else if (!it->second.same_shape(*t))
                it->second = Tensor::zeros(t->shape());
        }

        // Per-sample backward into private slots, then ordered reduction.
        std::vector<std::map<std::string, Tensor>> slots(n);
        const double inv_n = 1.0 / static_cast<double>(n);
        parallel_for(n, [&](std::size_t i) {
            PerSample& s = ps[i];
            std::map<std::string, Tensor>& g = slots[i];
            // Loss head gradients.
            Tensor d_y_f, d_y_cf;
            if (m.cfg.cil_on) {
                Tensor d_y_e = counterfactual_loss_grad(s.logits, labels[i]);
                d_y_e *= inv_n;
                d_y_f = d_y_e;
                d_y_cf = d_y_e;
                d_y_cf *= -1.0;
            } else {
                d_y_f = cross_entropy_grad(s.logits.y_f, labels[i]);
                d_y_f *= inv_n;
                d_y_cf = Tensor::zeros(d_y_f.shape());
            }
            Tensor d_pooled = Tensor::zeros(s.pooled.shape());
            Tensor d_head_cls = Tensor::zeros(m.classifier.shape());
            Tensor d_a, d_c;
            intervention_backward(s.pooled, s.a, s.c, m.classifier, s.icache, d_y_f, d_y_cf,
                                  &d_head_cls, &d_pooled, &d_a, &d_c);
            g["classifier.weight"] = std::move(d_head_cls);
            generator_backward(m.gen_f, s.pooled, s.f_cache, d_a, "gen_f", &g, &d_pooled);
            if (!m.cfg.cf_grad_cutoff)
                generator_backward(m.gen_cf, s.pooled, s.cf_cache, d_c, "gen_cf", &g,
                                   &d_pooled);

            // Embedding branch.
            Tensor d_emb_i({b_count, d_dim});
            std::copy(d_emb.data() + i * b_count * d_dim,
                      d_emb.data() + (i + 1) * b_count * d_dim, d_emb_i.data());
            std::vector<Tensor> d_strips;
            for (const Tensor& wmat : m.head.strip_weight)
                d_strips.push_back(Tensor::zeros(wmat.shape()));
            embed_backward(s.pooled, m.head, s.ecache, d_emb_i, &d_strips, &d_pooled);
            for (std::size_t b = 0; b < b_count; ++b)
                g["embed.strip" + std::to_string(b) + ".weight"] = std::move(d_strips[b]);

            // Temporal max routing, then per-frame backbone backward.
            const std::size_t t = s.feats.extent(0);
            const std::size_t cell = s.pooled.size();
            std::vector<Tensor> d_w, d_b;
            for (const ConvBlock& blk : m.backbone.blocks) {
                d_w.push_back(Tensor::zeros(blk.weight.shape()));
                d_b.push_back(Tensor::zeros(blk.bias.shape()));
            }
            Tensor d_frame_out(s.pooled.shape());
            for (std::size_t ti = 0; ti < t; ++ti) {
                d_frame_out.fill(0.0);
                bool any = false;
                for (std::size_t j = 0; j < cell; ++j) {
                    if (s.tmax_idx[j] == ti && d_pooled[j] != 0.0) {
                        d_frame_out[j] = d_pooled[j];
                        any = true;
                    }
                }
                if (!any) continue;
                backbone_frame_backward(m.backbone, s.frames[ti], d_frame_out, &d_w, &d_b);
            }
            for (std::size_t bi = 0; bi < m.backbone.blocks.size(); ++bi) {
                g["backbone.conv" + std::to_string(bi) + ".weight"] = std::move(d_w[bi]);
                g["backbone.conv" + std::to_string(bi) + ".bias"] = std::move(d_b[bi]);
            }
        });
        for (std::size_t i = 0; i < n; ++i) {
            for (auto& [name, g] : slots[i]) (*grads)[name] += g;
        }

        // Diversity gradients act directly on the bases.
        if (lambda_eff != 0.0 && (f_dec || c_dec)) {
            if (f_dec && c_dec) {
                (*grads)["gen_f.p"].axpy(lambda_eff, div_term.gradients[0]);
                (*grads)["gen_f.q"].axpy(lambda_eff, div_term.gradients[1]);
                (*grads)["gen_cf.p"].axpy(lambda_eff, div_term.gradients[2]);
                (*grads)["gen_cf.q"].axpy(lambda_eff, div_term.gradients[3]);
            } else {
                const std::string prefix = f_dec ? "gen_f" : "gen_cf";
                (*grads)[prefix + ".p"].axpy(lambda_eff, div_term.gradients[0]);
                (*grads)[prefix + ".q"].axpy(lambda_eff, div_term.gradients[1]);
            }
        }
    }

    if (details) {
        details->clear();
        for (PerSample& s : ps) {
            SampleForward sf;
            sf.pooled = std::move(s.pooled);
            sf.embedding = std::move(s.embedding);
            sf.factual = std::move(s.a);
            sf.counterfactual = std::move(s.c);
            sf.logits = std::move(s.logits);
            details->push_back(std::move(sf));
        }
    }
    return total_loss(l_cf, l_tri, l_div, lambda_eff);
}

}  // namespace gci
