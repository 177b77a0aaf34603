#ifndef GCI_TRAIN_EVAL_HPP_
#define GCI_TRAIN_EVAL_HPP_

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gci/config.hpp"
#include "gci/data_synth.hpp"
#include "gci/model.hpp"
#include "gci/rng.hpp"
#include "gci/tensor.hpp"

namespace gci {

// ---------------------------------------------------------------------------
// Adam optimizer over the named parameter registry.
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    std::size_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

/// One bias-corrected Adam update. Every parameter needs a same-shaped entry
/// in `grads`; a non-finite gradient raises a NumericError naming the
/// parameter. A zero gradient leaves the parameter bit-identical.
void adam_step(AdamState& state, const std::vector<std::pair<std::string, Tensor*>>& params,
               const std::map<std::string, Tensor>& grads);

// ---------------------------------------------------------------------------
// Training configuration, presets, and the training loop.
// ---------------------------------------------------------------------------

/// Ablation switches composing the study arms: counterfactual training as a
/// whole, generative factual attention, generative counterfactual attention,
/// kernel decomposition, and the diversity constraint.
struct AblationSwitches {
    bool cil_on = true;
    bool gfa_on = true;
    bool gca_on = true;
    bool md_on = true;
    bool dc_on = true;
};

struct TrainConfig {
    std::string preset = "custom";
    std::size_t iterations = 200;
    std::size_t batch_p = 2;  // identities per batch
    std::size_t batch_k = 4;  // sequences per identity
    double lr = 1e-4;
    double lambda = 0.1;
    double margin = 0.2;
    std::vector<std::size_t> channels = {32, 64, 128, 128};
    std::vector<bool> pools = {true, true, true, false};
    std::size_t strips = 4;
    std::size_t embed_dim = 64;
    std::size_t attn_channels = 2;
    std::size_t latent = 8;
    std::size_t reduction = 4;
    std::size_t vanilla_s = 4;
    double slope = 0.01;
    std::uint64_t seed = 1;
    AblationSwitches sw;
    bool timing = false;  // wall_ms column stays 0 unless enabled (reproducible logs)
    std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
    bool cf_grad_cutoff = false;
};

/// Named presets (desk-scale architecture plus a switch pattern):
/// overfit, confounder_full, confounder_nocil, table5_baseline, table5_cil,
/// table5_cil_gfa, table5_cil_gca, table5_full, table6_dyconv, table6_md,
/// table6_md_dc. Unknown names raise ConfigError.
TrainConfig preset_config(const std::string& name);

/// Maps switches onto generator modes: factual = gfa ? (md ? decomposed :
/// candidate-mixing) : static; counterfactual = gca ? (md ? decomposed :
/// candidate-mixing) : predefined.
ModelConfig model_config_for(const TrainConfig& cfg, std::size_t classes);

struct TrainRow {
    std::size_t iteration = 0;
    double l_cf = 0.0;
    double l_tri = 0.0;
    double l_div = 0.0;
    double total = 0.0;
    double wall_ms = 0.0;
};

struct TrainResult {
    GciModel model;
    std::vector<TrainRow> log;
};

std::string csv_header();
std::string csv_line(const TrainRow& row);

/// `#`-prefixed first line of metrics.csv recording the resolved switch
/// pattern, so every log is self-describing about its study arm.
std::string run_header(const TrainConfig& cfg);

/// Trains on the given records (labels define the identities). When out_dir
/// is non-empty it receives metrics.csv and checkpoint.gci. Deterministic in
/// (config, data): identical runs produce identical logs and checkpoints.
/// A non-finite loss aborts with a NumericError naming the iteration.
TrainResult train(const TrainConfig& cfg, const std::vector<SampleRecord>& records,
                  const std::string& out_dir = "");

// ---------------------------------------------------------------------------
// Evaluation: gallery / probe retrieval with strip-mean distance.
// ---------------------------------------------------------------------------

struct EvalReport {
    double rank1 = 0.0;
    double rank5 = 0.0;
    double mean_overlap = -1.0;  // negative until computed
    std::size_t evaluated = 0;
    std::size_t excluded = 0;  // probes whose identity has no gallery entry
};

/// Mean over strips of the Euclidean distance between [B,D] embeddings.
double strip_distance(const Tensor& a, const Tensor& b);

/// The first sequence of every identity becomes the gallery, the rest probes.
void split_gallery_probe(const std::vector<SampleRecord>& records,
                         std::vector<SampleRecord>* gallery,
                         std::vector<SampleRecord>* probe);

/// Rank-k retrieval of probe identities against the gallery. When
/// with_overlap is set, the factual attention of each probe is scored against
/// its confounder mask and averaged.
EvalReport evaluate(const GciModel& model, const std::vector<SampleRecord>& gallery,
                    const std::vector<SampleRecord>& probe, bool with_overlap = false);

/// Attention maps [M,H',W'] of one sequence (backbone -> temporal max ->
/// generator). rng feeds predefined draws only.
Tensor attention_maps(const GciModel& model, const Tensor& seq, bool factual, Rng& rng);

/// Writes the first input frame and each attention map as PGM files
/// (factual_<m>.pgm, optionally counterfactual_<m>.pgm). Every map is min-max
/// scaled to 0..255; a constant map becomes uniform 128.
void export_attention(const GciModel& model, const Tensor& seq, const std::string& out_dir,
                      bool include_counterfactual, std::uint64_t draw_seed = 1);

// ---------------------------------------------------------------------------
// Run-configuration files (section.key=value) for the CLI.
// ---------------------------------------------------------------------------

const std::set<std::string>& allowed_run_keys();
TrainConfig train_config_from(const ConfigFile& file);
DatasetSpec dataset_spec_from(const ConfigFile& file);

}  // namespace gci

#endif  // GCI_TRAIN_EVAL_HPP_
