#include "gci/train_eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "gci/checkpoint.hpp"
#include "gci/errors.hpp"
#include "gci/pgm.hpp"

namespace fs = std::filesystem;

namespace gci {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(AdamState& state, const std::vector<std::pair<std::string, Tensor*>>& params,
               const std::map<std::string, Tensor>& grads) {
    state.step += 1;
    const double b1 = state.cfg.beta1;
    const double b2 = state.cfg.beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (const auto& [name, param] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) {
            throw std::invalid_argument("adam: missing gradient for parameter '" + name + "'");
        }
        const Tensor& g = git->second;
        if (!g.same_shape(*param)) {
            throw std::invalid_argument("adam: gradient shape mismatch for parameter '" + name +
                                        "'");
        }
        Tensor& m = state.m.try_emplace(name, Tensor::zeros(param->shape())).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor::zeros(param->shape())).first->second;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double gi = g[i];
            if (!std::isfinite(gi)) {
                throw NumericError("adam: non-finite gradient for parameter '" + name + "'");
            }
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            const double m_hat = m[i] / bias1;
            const double v_hat = v[i] / bias2;
            (*param)[i] -= state.cfg.lr * m_hat / (std::sqrt(v_hat) + state.cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Presets and model-config mapping
// ---------------------------------------------------------------------------

namespace {

TrainConfig desk_base() {
    TrainConfig tc;
    tc.channels = {8, 16, 32, 32};
    tc.pools = {true, true, true, false};
    tc.strips = 4;
    tc.embed_dim = 32;
    tc.attn_channels = 2;
    tc.latent = 8;
    tc.reduction = 4;
    tc.vanilla_s = 4;
    tc.batch_p = 2;
    tc.batch_k = 4;
    return tc;
}

}  // namespace

TrainConfig preset_config(const std::string& name) {
    if (name == "custom") return TrainConfig{};
    TrainConfig tc = desk_base();
    tc.preset = name;
    if (name == "overfit") {
        tc.iterations = 2000;
        return tc;
    }
    if (name == "confounder_full" || name == "confounder_nocil") {
        tc.iterations = 400;
        tc.sw.cil_on = name == "confounder_full";
        return tc;
    }
    if (name == "table5_baseline") {
        tc.iterations = 300;
        tc.sw = {false, false, false, false, false};
        return tc;
    }
    if (name == "table5_cil") {
        tc.iterations = 300;
        tc.sw = {true, false, false, false, false};
        return tc;
    }
    if (name == "table5_cil_gfa") {
        tc.iterations = 300;
        tc.sw = {true, true, false, true, true};
        return tc;
    }
    if (name == "table5_cil_gca") {
        tc.iterations = 300;
        tc.sw = {true, false, true, true, true};
        return tc;
    }
    if (name == "table5_full") {
        tc.iterations = 300;
        tc.sw = {true, true, true, true, true};
        return tc;
    }
    if (name == "table6_dyconv") {
        tc.iterations = 300;
        tc.sw = {true, true, true, false, false};
        return tc;
    }
    if (name == "table6_md") {
        tc.iterations = 300;
        tc.sw = {true, true, true, true, false};
        return tc;
    }
    if (name == "table6_md_dc") {
        tc.iterations = 300;
        tc.sw = {true, true, true, true, true};
        return tc;
    }
    throw ConfigError("train: unknown preset '" + name + "'");
}

ModelConfig model_config_for(const TrainConfig& cfg, std::size_t classes) {
    ModelConfig mc;
    mc.channels = cfg.channels;
    mc.pools = cfg.pools;
    mc.strips = cfg.strips;
    mc.embed_dim = cfg.embed_dim;
    mc.classes = classes;
    mc.attn_channels = cfg.attn_channels;
    mc.latent = cfg.latent;
    mc.reduction = cfg.reduction;
    mc.vanilla_s = cfg.vanilla_s;
    mc.lambda = cfg.lambda;
    mc.margin = cfg.margin;
    mc.slope = cfg.slope;
    mc.cil_on = cfg.sw.cil_on;
    mc.factual_mode =
        cfg.sw.gfa_on ? (cfg.sw.md_on ? GenMode::Decomposed : GenMode::Vanilla) : GenMode::Static;
    mc.counterfactual_mode =
        cfg.sw.gca_on ? (cfg.sw.md_on ? GenMode::Decomposed : GenMode::Vanilla)
                      : GenMode::Predefined;
    mc.dc_on = cfg.sw.dc_on;
    mc.cf_grad_cutoff = cfg.cf_grad_cutoff;
    mc.init_seed = cfg.seed;
    return mc;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

std::string csv_header() {
    return "iteration,l_cf,l_tri,l_div,total,wall_ms";
}

std::string run_header(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "# preset=" << cfg.preset << " seed=" << cfg.seed << " iterations=" << cfg.iterations
        << " cil=" << (cfg.sw.cil_on ? 1 : 0) << " gfa=" << (cfg.sw.gfa_on ? 1 : 0)
        << " gca=" << (cfg.sw.gca_on ? 1 : 0) << " md=" << (cfg.sw.md_on ? 1 : 0)
        << " dc=" << (cfg.sw.dc_on ? 1 : 0);
    return out.str();
}

std::string csv_line(const TrainRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.3f", row.iteration, row.l_cf,
                  row.l_tri, row.l_div, row.total, row.wall_ms);
    return buf;
}

TrainResult train(const TrainConfig& cfg, const std::vector<SampleRecord>& records,
                  const std::string& out_dir) {
    if (records.empty()) {
        throw ConfigError("train: no training records");
    }
    if (cfg.iterations == 0) {
        throw ConfigError("train: iterations must be positive");
    }
    if (cfg.batch_p < 2 || cfg.batch_k < 2) {
        throw ConfigError("train: the batch needs at least 2 identities and 2 sequences each");
    }
    std::size_t classes = 0;
    for (const SampleRecord& rec : records) {
        classes = std::max(classes, rec.label + 1);
    }
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < records.size(); ++i) {
        by_class[records[i].label].push_back(i);
    }
    std::vector<std::size_t> populated;
    for (std::size_t c = 0; c < classes; ++c) {
        if (!by_class[c].empty()) populated.push_back(c);
    }
    if (populated.size() < 2) {
        throw ConfigError("train: need at least 2 identities, got " +
                          std::to_string(populated.size()));
    }

    TrainResult result{make_model(model_config_for(cfg, classes)), {}};
    auto params = result.model.parameters();
    AdamState opt;
    opt.cfg.lr = cfg.lr;

    std::ofstream csv;
    if (!out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) {
            throw IoError("train: cannot create '" + out_dir + "': " + ec.message());
        }
        csv.open(out_dir + "/metrics.csv", std::ios::binary);
        if (!csv) {
            throw IoError("train: cannot open '" + out_dir + "/metrics.csv' for writing");
        }
        csv << run_header(cfg) << "\n";
        csv << csv_header() << "\n";
    }

    const std::size_t batch_p = std::min<std::size_t>(cfg.batch_p, populated.size());
    Rng sampler(Rng::mix(cfg.seed, 0x5A3Bu));
    result.log.reserve(cfg.iterations);

    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        const auto start = std::chrono::steady_clock::now();

        std::vector<std::size_t> ids = populated;
        sampler.shuffle(ids);
        ids.resize(batch_p);
        std::vector<Tensor> sequences;
        std::vector<std::size_t> labels;
        sequences.reserve(batch_p * cfg.batch_k);
        labels.reserve(batch_p * cfg.batch_k);
        for (std::size_t id : ids) {
            const auto& pool = by_class[id];
            std::vector<std::size_t> picks = pool;
            sampler.shuffle(picks);
            for (std::size_t k = 0; k < cfg.batch_k; ++k) {
                const std::size_t rec_idx =
                    k < picks.size() ? picks[k]
                                     : pool[sampler.uniform_index(pool.size())];
                sequences.push_back(records[rec_idx].sequence);
                labels.push_back(records[rec_idx].label);
            }
        }

        Rng cf_rng(Rng::mix(cfg.seed, 0xCFu, iter));
        std::map<std::string, Tensor> grads;
        const LossBundle bundle =
            model_forward_backward(result.model, sequences, labels, cf_rng, &grads);
        if (!std::isfinite(bundle.total)) {
            throw NumericError("train: non-finite loss at iteration " + std::to_string(iter));
        }
        adam_step(opt, params, grads);

        TrainRow row;
        row.iteration = iter;
        row.l_cf = bundle.l_cf;
        row.l_tri = bundle.l_tri;
        row.l_div = bundle.l_div;
        row.total = bundle.total;
        if (cfg.timing) {
            const auto end = std::chrono::steady_clock::now();
            row.wall_ms =
                std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(end - start)
                    .count();
        }
        result.log.push_back(row);
        if (csv.is_open()) {
            csv << csv_line(row) << "\n";
        }
        if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
            (iter + 1) % cfg.checkpoint_every == 0) {
            save_model_checkpoint(out_dir + "/checkpoint.gci", result.model);
        }
    }

    if (!out_dir.empty()) {
        save_model_checkpoint(out_dir + "/checkpoint.gci", result.model);
        csv.close();
        if (!csv) {
            throw IoError("train: metrics write failed under '" + out_dir + "'");
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

double strip_distance(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b) || a.rank() != 2) {
        throw std::invalid_argument("strip_distance: embeddings must share one [B,D] shape");
    }
    const std::size_t strips = a.extent(0);
    const std::size_t dim = a.extent(1);
    double acc = 0.0;
    for (std::size_t s = 0; s < strips; ++s) {
        double sq = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            const double diff = a.at(s, d) - b.at(s, d);
            sq += diff * diff;
        }
        acc += std::sqrt(sq);
    }
    return acc / static_cast<double>(strips);
}

void split_gallery_probe(const std::vector<SampleRecord>& records,
                         std::vector<SampleRecord>* gallery,
                         std::vector<SampleRecord>* probe) {
    gallery->clear();
    probe->clear();
    std::set<std::size_t> seen;
    for (const SampleRecord& rec : records) {
        if (seen.insert(rec.label).second) {
            gallery->push_back(rec);
        } else {
            probe->push_back(rec);
        }
    }
}

Tensor attention_maps(const GciModel& model, const Tensor& seq, bool factual, Rng& rng) {
    const Tensor feats = backbone_forward(model.backbone, seq, nullptr);
    const Tensor pooled = temporal_max(feats, nullptr);
    const Generator& gen = factual ? model.gen_f : model.gen_cf;
    return generator_forward(gen, pooled, rng, nullptr);
}

EvalReport evaluate(const GciModel& model, const std::vector<SampleRecord>& gallery,
                    const std::vector<SampleRecord>& probe, bool with_overlap) {
    if (gallery.empty() || probe.empty()) {
        throw ConfigError("evaluate: gallery and probe must both be non-empty");
    }
    std::vector<Tensor> gal_emb;
    gal_emb.reserve(gallery.size());
    std::set<std::size_t> gal_ids;
    for (const SampleRecord& rec : gallery) {
        gal_emb.push_back(infer_embedding(model, rec.sequence));
        gal_ids.insert(rec.label);
    }

    EvalReport report;
    std::size_t hits1 = 0;
    std::size_t hits5 = 0;
    double overlap_sum = 0.0;
    std::size_t overlap_n = 0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const SampleRecord& rec = probe[i];
        if (gal_ids.count(rec.label) == 0) {
            ++report.excluded;
            continue;
        }
        const Tensor emb = infer_embedding(model, rec.sequence);
        std::vector<std::pair<double, std::size_t>> dist;
        dist.reserve(gallery.size());
        for (std::size_t g = 0; g < gallery.size(); ++g) {
            dist.emplace_back(strip_distance(emb, gal_emb[g]), g);
        }
        std::sort(dist.begin(), dist.end());
        if (gallery[dist[0].second].label == rec.label) ++hits1;
        const std::size_t k = std::min<std::size_t>(5, dist.size());
        for (std::size_t r = 0; r < k; ++r) {
            if (gallery[dist[r].second].label == rec.label) {
                ++hits5;
                break;
            }
        }
        ++report.evaluated;
        if (with_overlap && rec.confounder_mask.size() > 0 &&
            rec.confounder_mask.max_abs() > 0.0) {
            Rng rng(Rng::mix(0x0B5Eu, i));
            const Tensor maps = attention_maps(model, rec.sequence, true, rng);
            overlap_sum += confounder_overlap(maps, rec.confounder_mask);
            ++overlap_n;
        }
    }
    if (report.evaluated == 0) {
        throw ConfigError("evaluate: no probe identity appears in the gallery");
    }
    report.rank1 = static_cast<double>(hits1) / static_cast<double>(report.evaluated);
    report.rank5 = static_cast<double>(hits5) / static_cast<double>(report.evaluated);
    if (overlap_n > 0) {
        report.mean_overlap = overlap_sum / static_cast<double>(overlap_n);
    }
    return report;
}

void export_attention(const GciModel& model, const Tensor& seq, const std::string& out_dir,
                      bool include_counterfactual, std::uint64_t draw_seed) {
    if (seq.rank() != 4) {
        throw std::invalid_argument("export_attention: sequence must be [T,1,H,W]");
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("export_attention: cannot create '" + out_dir + "': " + ec.message());
    }

    Tensor frame({seq.extent(2), seq.extent(3)});
    for (std::size_t r = 0; r < frame.extent(0); ++r) {
        for (std::size_t c = 0; c < frame.extent(1); ++c) {
            frame.at(r, c) = seq.at(0, 0, r, c) * 255.0;
        }
    }
    write_pgm(out_dir + "/input.pgm", frame);

    auto write_maps = [&](const Tensor& maps, const std::string& stem) {
        const std::size_t h = maps.extent(1);
        const std::size_t w = maps.extent(2);
        for (std::size_t m = 0; m < maps.extent(0); ++m) {
            double lo = maps.at(m, 0, 0);
            double hi = lo;
            for (std::size_t i = 0; i < h; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    lo = std::min(lo, maps.at(m, i, j));
                    hi = std::max(hi, maps.at(m, i, j));
                }
            }
            Tensor img({h, w});
            const double span = hi - lo;
            for (std::size_t i = 0; i < h; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    img.at(i, j) =
                        span == 0.0 ? 128.0 : (maps.at(m, i, j) - lo) / span * 255.0;
                }
            }
            write_pgm(out_dir + "/" + stem + "_" + std::to_string(m) + ".pgm", img);
        }
    };

    Rng f_rng(Rng::mix(draw_seed, 0xFAu));
    write_maps(attention_maps(model, seq, true, f_rng), "factual");
    if (include_counterfactual) {
        Rng cf_rng(Rng::mix(draw_seed, 0xCFu));
        write_maps(attention_maps(model, seq, false, cf_rng), "counterfactual");
    }
}

// ---------------------------------------------------------------------------
// Run-configuration files
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_list(const std::string& raw) {
    std::vector<std::string> parts;
    std::string item;
    std::istringstream in(raw);
    while (std::getline(in, item, ',')) {
        if (!item.empty()) parts.push_back(item);
    }
    return parts;
}

std::vector<std::size_t> size_list(const ConfigFile& file, const std::string& key,
                                   const std::vector<std::size_t>& fallback) {
    if (!file.has(key)) return fallback;
    std::vector<std::size_t> out;
    for (const std::string& item : split_list(file.values.at(key))) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(item.c_str(), &end, 10);
        if (end == item.c_str() || *end != '\0') {
            throw ConfigError("config: key '" + key + "' has a non-integer list entry '" + item +
                              "'");
        }
        out.push_back(static_cast<std::size_t>(v));
    }
    if (out.empty()) {
        throw ConfigError("config: key '" + key + "' has an empty list");
    }
    return out;
}

std::vector<bool> bool_list(const ConfigFile& file, const std::string& key,
                            const std::vector<bool>& fallback) {
    if (!file.has(key)) return fallback;
    std::vector<bool> out;
    for (const std::string& item : split_list(file.values.at(key))) {
        if (item == "1" || item == "true" || item == "on") {
            out.push_back(true);
        } else if (item == "0" || item == "false" || item == "off") {
            out.push_back(false);
        } else {
            throw ConfigError("config: key '" + key + "' has a non-boolean list entry '" + item +
                              "'");
        }
    }
    if (out.empty()) {
        throw ConfigError("config: key '" + key + "' has an empty list");
    }
    return out;
}

}  // namespace

const std::set<std::string>& allowed_run_keys() {
    static const std::set<std::string> keys = {
        "model.channels",       "model.pools",          "model.strips",
        "model.embed_dim",      "model.slope",          "dcdc.latent",
        "dcdc.reduction",       "dcdc.vanilla_s",       "cil.attn_channels",
        "data.classes",         "data.train_per_class", "data.test_per_class",
        "data.frames",          "data.height",          "data.width",
        "data.marker_size",     "data.signal_top",      "data.marker_value",
        "data.noise",           "data.freq_step",       "data.train_corr",
        "data.test_corr",       "data.seed",            "train.preset",
        "train.iterations",     "train.batch_p",        "train.batch_k",
        "train.lr",             "train.lambda",         "train.margin",
        "train.seed",           "train.timing",         "train.checkpoint_every",
        "train.cf_grad_cutoff", "train.cil_on",         "train.gfa_on",
        "train.gca_on",         "train.md_on",          "train.dc_on",
    };
    return keys;
}

TrainConfig train_config_from(const ConfigFile& file) {
    require_known_keys(file, allowed_run_keys());
    TrainConfig tc = preset_config(config_string(file, "train.preset", "custom"));
    tc.channels = size_list(file, "model.channels", tc.channels);
    tc.pools = bool_list(file, "model.pools", tc.pools);
    if (tc.channels.size() != tc.pools.size()) {
        throw ConfigError("config: model.channels and model.pools must have the same length");
    }
    tc.strips = config_size(file, "model.strips", tc.strips);
    tc.embed_dim = config_size(file, "model.embed_dim", tc.embed_dim);
    tc.slope = config_double(file, "model.slope", tc.slope);
    tc.latent = config_size(file, "dcdc.latent", tc.latent);
    tc.reduction = config_size(file, "dcdc.reduction", tc.reduction);
    tc.vanilla_s = config_size(file, "dcdc.vanilla_s", tc.vanilla_s);
    tc.attn_channels = config_size(file, "cil.attn_channels", tc.attn_channels);
    tc.iterations = config_size(file, "train.iterations", tc.iterations);
    tc.batch_p = config_size(file, "train.batch_p", tc.batch_p);
    tc.batch_k = config_size(file, "train.batch_k", tc.batch_k);
    tc.lr = config_double(file, "train.lr", tc.lr);
    tc.lambda = config_double(file, "train.lambda", tc.lambda);
    tc.margin = config_double(file, "train.margin", tc.margin);
    tc.seed = config_u64(file, "train.seed", tc.seed);
    tc.timing = config_bool(file, "train.timing", tc.timing);
    tc.checkpoint_every = config_size(file, "train.checkpoint_every", tc.checkpoint_every);
    tc.cf_grad_cutoff = config_bool(file, "train.cf_grad_cutoff", tc.cf_grad_cutoff);
    tc.sw.cil_on = config_bool(file, "train.cil_on", tc.sw.cil_on);
    tc.sw.gfa_on = config_bool(file, "train.gfa_on", tc.sw.gfa_on);
    tc.sw.gca_on = config_bool(file, "train.gca_on", tc.sw.gca_on);
    tc.sw.md_on = config_bool(file, "train.md_on", tc.sw.md_on);
    tc.sw.dc_on = config_bool(file, "train.dc_on", tc.sw.dc_on);
    return tc;
}

DatasetSpec dataset_spec_from(const ConfigFile& file) {
    require_known_keys(file, allowed_run_keys());
    DatasetSpec spec;
    spec.num_classes = config_size(file, "data.classes", spec.num_classes);
    spec.train_per_class = config_size(file, "data.train_per_class", spec.train_per_class);
    spec.test_per_class = config_size(file, "data.test_per_class", spec.test_per_class);
    spec.frames = config_size(file, "data.frames", spec.frames);
    spec.height = config_size(file, "data.height", spec.height);
    spec.width = config_size(file, "data.width", spec.width);
    spec.marker_size = config_size(file, "data.marker_size", spec.marker_size);
    spec.signal_top = config_size(file, "data.signal_top", spec.signal_top);
    spec.marker_value = config_double(file, "data.marker_value", spec.marker_value);
    spec.noise = config_double(file, "data.noise", spec.noise);
    spec.freq_step = config_double(file, "data.freq_step", spec.freq_step);
    spec.train_corr = config_double(file, "data.train_corr", spec.train_corr);
    spec.test_corr = config_double(file, "data.test_corr", spec.test_corr);
    spec.seed = config_u64(file, "data.seed", spec.seed);
    return spec;
}

}  // namespace gci
