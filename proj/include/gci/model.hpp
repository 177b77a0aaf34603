#ifndef GCI_MODEL_HPP_
#define GCI_MODEL_HPP_

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gci/cil.hpp"
#include "gci/dcdc.hpp"
#include "gci/rng.hpp"
#include "gci/tensor.hpp"

namespace gci {

// ---------------------------------------------------------------------------
// Backbone: per-frame 3x3 conv blocks (leaky activation, optional 2x2 pool),
// applied frame-by-frame and reduced by temporal max pooling.
// ---------------------------------------------------------------------------

struct ConvBlock {
    Tensor weight;  // [Cout,Cin,3,3]
    Tensor bias;    // [Cout]
    bool pool = false;
};

struct Backbone {
    std::vector<ConvBlock> blocks;
    double slope = 0.01;  // leaky activation slope
};

struct BackboneCache {
    std::vector<Tensor> inputs;   // input of each block
    std::vector<Tensor> pre;      // conv output + bias, before the activation
    std::vector<Tensor> act;      // activation output (pool input where pooled)
    std::vector<std::vector<std::size_t>> pool_idx;  // winner indices, pooled blocks only
};

/// One frame [Cin,H,W] through every block.
Tensor backbone_frame_forward(const Backbone& bb, const Tensor& frame, BackboneCache* cache);

/// Accumulates d(objective)/d(weight|bias) for one frame into d_weights/d_biases
/// (pre-sized, zero or carrying other frames' contributions).
void backbone_frame_backward(const Backbone& bb, const BackboneCache& cache, const Tensor& d_out,
                             std::vector<Tensor>* d_weights, std::vector<Tensor>* d_biases);

/// Whole sequence [T,1,H,W] -> [T,C',H',W'].
Tensor backbone_forward(const Backbone& bb, const Tensor& seq,
                        std::vector<BackboneCache>* caches);

// ---------------------------------------------------------------------------
// Embedding head: horizontal strips, mean+max pooled, one linear map each.
// ---------------------------------------------------------------------------

struct EmbeddingHead {
    std::vector<Tensor> strip_weight;  // B tensors [D, C]
};

struct EmbedCache {
    std::vector<Tensor> strip_vec;                    // per strip: mean+max vector [C]
    std::vector<std::vector<std::size_t>> max_idx;    // per strip, per channel: winning flat cell
};

/// feat [C,H,W] -> [B,D]; H must be divisible by the strip count.
Tensor embed(const Tensor& feat, const EmbeddingHead& head, EmbedCache* cache);

void embed_backward(const Tensor& feat, const EmbeddingHead& head, const EmbedCache& cache,
                    const Tensor& d_emb, std::vector<Tensor>* d_weights, Tensor* d_feat);

// ---------------------------------------------------------------------------
// Batch-hard triplet loss over strip embeddings.
// ---------------------------------------------------------------------------

/// embeddings [N,B,D], labels size N. Per anchor and strip, hardest positive /
/// hardest negative by Euclidean distance, hinged at the margin; the loss is
/// the mean over terms that are strictly positive (0 if none). If
/// d_embeddings is non-null it receives the gradient.
double triplet_loss(const Tensor& embeddings, const std::vector<std::size_t>& labels,
                    double margin, Tensor* d_embeddings = nullptr);

// ---------------------------------------------------------------------------
// Attention generators (factual / counterfactual) in their ablation variants.
// ---------------------------------------------------------------------------

enum class GenMode {
    Decomposed,  // low-rank sample-adaptive kernel (production path)
    Vanilla,     // candidate-mixing dynamic convolution
    Static,      // one learned static kernel
    Predefined,  // fixed random distribution (counterfactual ablation only)
};

struct Generator {
    GenMode mode = GenMode::Decomposed;
    DcdcKernelSet dcdc;       // Decomposed
    VanillaDynConv vanilla;   // Vanilla
    Tensor static_kernel;     // Static: [M,C,3,3]
    PredefDist dist = PredefDist::Uniform;  // Predefined
    std::size_t predef_channels = 1;        // map count M for the Predefined mode
};

struct GenCache {
    DcdcCache dcdc;
    VanillaCache vanilla;
    Tensor static_pre;  // Static path pre-activation
    Tensor maps;
};

/// Runs the generator; Predefined mode draws from rng.
Tensor generator_forward(const Generator& gen, const Tensor& x, Rng& rng, GenCache* cache);

/// Accumulates parameter gradients into the named slots of `grads` under the
/// given prefix ("gen_f"/"gen_cf") and adds the input gradient to d_x.
/// Predefined mode contributes nothing.
void generator_backward(const Generator& gen, const Tensor& x, const GenCache& cache,
                        const Tensor& d_maps, const std::string& prefix,
                        std::map<std::string, Tensor>* grads, Tensor* d_x);

// ---------------------------------------------------------------------------
// The full model.
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::vector<std::size_t> channels = {32, 64, 128, 128};
    std::vector<bool> pools = {true, true, true, false};
    std::size_t strips = 4;        // B
    std::size_t embed_dim = 64;    // D
    std::size_t classes = 4;       // K
    std::size_t attn_channels = 2; // M
    std::size_t latent = 8;        // L
    std::size_t reduction = 4;     // r
    std::size_t vanilla_s = 4;     // candidate count for the Vanilla arm
    double lambda = 0.1;
    double margin = 0.2;
    double slope = 0.01;
    bool cil_on = true;            // off: plain CE on the factual likelihood
    GenMode factual_mode = GenMode::Decomposed;
    GenMode counterfactual_mode = GenMode::Decomposed;
    PredefDist predef_dist = PredefDist::Uniform;
    bool dc_on = true;             // diversity constraint in the total loss
    bool cf_grad_cutoff = false;   // ablation: no gradient into the counterfactual generator
    std::uint64_t init_seed = 1;
};

struct LossBundle {
    double l_cf = 0.0;
    double l_tri = 0.0;
    double l_div = 0.0;
    double lambda = 0.0;
    double total = 0.0;  // l_cf + l_tri + lambda * l_div, assembled literally
};

/// Assembles the bundle; total is computed as the literal three-term sum.
LossBundle total_loss(double l_cf, double l_tri, double l_div, double lambda);

struct GciModel {
    ModelConfig cfg;
    Backbone backbone;
    EmbeddingHead head;
    Tensor classifier;  // [K, C']
    Generator gen_f;
    Generator gen_cf;

    /// Stable name -> tensor registry (training, checkpoints, gradcheck all
    /// share this order). Predefined generators contribute no parameters.
    std::vector<std::pair<std::string, Tensor*>> parameters();
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;
};

/// Seeded construction; all weights drawn from cfg.init_seed.
GciModel make_model(const ModelConfig& cfg);

/// Inference path: backbone -> temporal max -> strip embedding. No attention
/// generator is consulted, so counterfactual parameters cannot influence it.
Tensor infer_embedding(const GciModel& m, const Tensor& seq);

/// Per-sample byproducts of the training forward (exposed for tests/tools).
struct SampleForward {
    Tensor pooled;          // temporally pooled backbone feature [C',H',W']
    Tensor embedding;       // [B,D]
    AttentionMaps factual;
    AttentionMaps counterfactual;
    EffectLogits logits;
};

/// Full training-step computation: forward every sample, assemble the three
/// loss terms, and (when grads != nullptr) run the complete hand-written
/// backward pass, accumulating into name-keyed gradient tensors. cf_rng feeds
/// predefined counterfactual draws; pass a generator seeded per iteration for
/// reproducible runs. If details != nullptr it receives per-sample outputs.
LossBundle model_forward_backward(GciModel& m, const std::vector<Tensor>& sequences,
                                  const std::vector<std::size_t>& labels, Rng& cf_rng,
                                  std::map<std::string, Tensor>* grads,
                                  std::vector<SampleForward>* details = nullptr);

}  // namespace gci

#endif  // GCI_MODEL_HPP_
