#include "gci/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "gci/errors.hpp"

namespace gci {

namespace {

constexpr char kMagic[4] = {'G', 'C', 'I', '1'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(out, bits);
}

class Reader {
public:
    Reader(const std::string& bytes, std::size_t start, const std::string& path)
        : bytes_(bytes), path_(path), pos_(start) {}

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(
                     static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        }
        pos_ += 8;
        return v;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(
                     static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    double f64() {
        const std::uint64_t bits = u64();
        double v = 0.0;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw IoError("checkpoint: truncated file '" + path_ + "'");
        }
    }

    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

bool is_meta(const std::string& name) {
    return name.rfind("meta.", 0) == 0;
}

bool is_counterfactual(const std::string& name) {
    return name.rfind("gen_cf.", 0) == 0;
}

GenMode mode_from_entries(const std::map<std::string, Tensor>& entries,
                          const std::string& prefix) {
    if (entries.count(prefix + ".w0")) return GenMode::Decomposed;
    if (entries.count(prefix + ".cand0")) return GenMode::Vanilla;
    if (entries.count(prefix + ".kernel")) return GenMode::Static;
    return GenMode::Predefined;
}

const Tensor& require_entry(const std::map<std::string, Tensor>& entries,
                            const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) {
        throw IoError("checkpoint: missing record '" + name + "'");
    }
    return it->second;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& entries) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u64(out, entries.size());
    for (const auto& [name, tensor] : entries) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        put_u32(out, static_cast<std::uint32_t>(tensor->rank()));
        for (std::size_t d = 0; d < tensor->rank(); ++d) {
            put_u64(out, tensor->extent(d));
        }
        for (std::size_t i = 0; i < tensor->size(); ++i) {
            put_f64(out, (*tensor)[i]);
        }
    }
    std::ofstream file(path, std::ios::binary);
    if (!file) {
        throw IoError("checkpoint: cannot open '" + path + "' for writing");
    }
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) {
        throw IoError("checkpoint: write failed for '" + path + "'");
    }
}

void save_model_checkpoint(const std::string& path, const GciModel& model) {
    std::vector<std::pair<std::string, const Tensor*>> entries = model.parameters();
    Tensor pools({model.cfg.pools.size()});
    for (std::size_t i = 0; i < model.cfg.pools.size(); ++i) {
        pools[i] = model.cfg.pools[i] ? 1.0 : 0.0;
    }
    Tensor slope({1});
    slope[0] = model.cfg.slope;
    Tensor predef({2});
    predef[0] = model.cfg.predef_dist == PredefDist::Uniform ? 0.0 : 1.0;
    predef[1] = static_cast<double>(model.cfg.attn_channels);
    entries.emplace_back("meta.pools", &pools);
    entries.emplace_back("meta.slope", &slope);
    entries.emplace_back("meta.predef", &predef);
    save_checkpoint(path, entries);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw IoError("checkpoint: cannot open '" + path + "' for reading");
    }
    std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(kMagic) ||
        std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError("checkpoint: '" + path + "' does not start with the GCI1 magic");
    }
    Reader reader(bytes, sizeof(kMagic), path);
    const std::uint64_t count = reader.u64();
    std::map<std::string, Tensor> entries;
    for (std::uint64_t r = 0; r < count; ++r) {
        const std::uint32_t name_len = reader.u32();
        const std::string name = reader.str(name_len);
        const std::uint32_t rank = reader.u32();
        if (rank > 8) {
            throw IoError("checkpoint: record '" + name + "' in '" + path +
                          "' has implausible rank " + std::to_string(rank));
        }
        std::vector<std::size_t> shape(rank);
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::size_t>(reader.u64());
            total *= shape[d];
        }
        Tensor t = Tensor::zeros(shape);
        for (std::size_t i = 0; i < total; ++i) {
            t[i] = reader.f64();
        }
        if (!entries.emplace(name, std::move(t)).second) {
            throw IoError("checkpoint: duplicate record '" + name + "' in '" + path + "'");
        }
    }
    if (!reader.done()) {
        throw IoError("checkpoint: trailing bytes in '" + path + "'");
    }
    return entries;
}

void apply_checkpoint(GciModel& model, const std::map<std::string, Tensor>& entries) {
    auto params = model.parameters();
    std::map<std::string, Tensor*> by_name;
    for (auto& [name, tensor] : params) {
        by_name.emplace(name, tensor);
    }
    for (const auto& [name, tensor] : entries) {
        if (is_meta(name)) continue;
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw IoError("checkpoint: unknown record '" + name + "'");
        }
        if (it->second->shape() != tensor.shape()) {
            throw IoError("checkpoint: shape mismatch for record '" + name + "'");
        }
        *it->second = tensor;
    }
    for (const auto& [name, tensor] : by_name) {
        (void)tensor;
        if (entries.count(name) == 0 && !is_counterfactual(name)) {
            throw IoError("checkpoint: missing record '" + name + "'");
        }
    }
}

GciModel model_from_checkpoint(const std::map<std::string, Tensor>& entries) {
    ModelConfig cfg;
    const Tensor& pools = require_entry(entries, "meta.pools");
    const Tensor& slope = require_entry(entries, "meta.slope");
    const Tensor& predef = require_entry(entries, "meta.predef");

    cfg.channels.clear();
    cfg.pools.clear();
    for (std::size_t i = 0;; ++i) {
        auto it = entries.find("backbone.conv" + std::to_string(i) + ".weight");
        if (it == entries.end()) break;
        cfg.channels.push_back(it->second.extent(0));
    }
    if (cfg.channels.empty()) {
        throw IoError("checkpoint: no backbone records found");
    }
    if (pools.size() != cfg.channels.size()) {
        throw IoError("checkpoint: meta.pools does not match the backbone depth");
    }
    for (std::size_t i = 0; i < pools.size(); ++i) {
        cfg.pools.push_back(pools[i] != 0.0);
    }
    cfg.slope = slope[0];

    std::size_t strips = 0;
    while (entries.count("embed.strip" + std::to_string(strips) + ".weight")) ++strips;
    if (strips == 0) {
        throw IoError("checkpoint: no strip-embedding records found");
    }
    cfg.strips = strips;
    cfg.embed_dim = require_entry(entries, "embed.strip0.weight").extent(0);
    cfg.classes = require_entry(entries, "classifier.weight").extent(0);

    cfg.factual_mode = mode_from_entries(entries, "gen_f");
    cfg.counterfactual_mode = mode_from_entries(entries, "gen_cf");
    cfg.predef_dist = predef[0] == 0.0 ? PredefDist::Uniform : PredefDist::Normal;
    cfg.attn_channels = static_cast<std::size_t>(predef[1]);

    const std::size_t cond = cfg.channels.back();
    auto decomposed_dims = [&](const std::string& prefix) {
        cfg.attn_channels = require_entry(entries, prefix + ".w0").extent(0);
        cfg.latent = require_entry(entries, prefix + ".p").extent(1);
        const std::size_t hidden = require_entry(entries, prefix + ".fc1").extent(0);
        cfg.reduction = hidden == 0 ? 1 : cond / hidden;
    };
    if (cfg.factual_mode == GenMode::Decomposed) {
        decomposed_dims("gen_f");
    } else if (cfg.counterfactual_mode == GenMode::Decomposed) {
        decomposed_dims("gen_cf");
    }
    if (cfg.factual_mode == GenMode::Vanilla || cfg.counterfactual_mode == GenMode::Vanilla) {
        const std::string prefix = cfg.factual_mode == GenMode::Vanilla ? "gen_f" : "gen_cf";
        std::size_t s = 0;
        while (entries.count(prefix + ".cand" + std::to_string(s))) ++s;
        cfg.vanilla_s = s;
        cfg.attn_channels = require_entry(entries, prefix + ".cand0").extent(0);
    }
    if (cfg.factual_mode == GenMode::Static) {
        cfg.attn_channels = require_entry(entries, "gen_f.kernel").extent(0);
    }
    cfg.init_seed = 1;

    GciModel model = make_model(cfg);
    apply_checkpoint(model, entries);
    return model;
}

}  // namespace gci
