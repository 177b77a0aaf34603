#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "gci/data_synth.hpp"
#include "gci/errors.hpp"
#include "gci/pgm.hpp"
#include "gci/rng.hpp"
#include "gci/train_eval.hpp"

using namespace gci;
namespace fs = std::filesystem;

namespace {

DatasetSpec tiny_data_spec(std::uint64_t seed = 7) {
    DatasetSpec spec;
    spec.num_classes = 2;
    spec.train_per_class = 3;
    spec.test_per_class = 2;
    spec.frames = 2;
    spec.height = 8;
    spec.width = 8;
    spec.marker_size = 3;
    spec.signal_top = 4;
    spec.seed = seed;
    return spec;
}

TrainConfig tiny_train_config(std::uint64_t seed = 3) {
    TrainConfig tc;
    tc.channels = {3, 4};
    tc.pools = {true, false};
    tc.strips = 2;
    tc.embed_dim = 3;
    tc.attn_channels = 2;
    tc.latent = 2;
    tc.reduction = 2;
    tc.vanilla_s = 2;
    tc.iterations = 4;
    tc.batch_p = 2;
    tc.batch_k = 2;
    tc.lr = 1e-3;
    tc.seed = seed;
    return tc;
}

std::vector<SampleRecord> split_of(const std::vector<SampleRecord>& records, Split split) {
    std::vector<SampleRecord> out;
    for (const SampleRecord& rec : records) {
        if (rec.split == split) out.push_back(rec);
    }
    return out;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("adam leaves parameters bit-identical under a zero gradient") {
    Tensor w({3});
    w[0] = 1.5;
    w[1] = -2.25;
    w[2] = 0.0;
    const Tensor before = w;
    AdamState st;
    st.cfg.lr = 0.1;
    std::map<std::string, Tensor> grads;
    grads.emplace("w", Tensor({3}));
    std::vector<std::pair<std::string, Tensor*>> params{{"w", &w}};
    adam_step(st, params, grads);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(w[i] == before[i]);
    }
    CHECK(st.step == 1);
}

TEST_CASE("adam first step moves a unit-gradient weight by about minus lr") {
    Tensor w({1});
    w[0] = 1.0;
    AdamState st;
    st.cfg.lr = 0.1;
    std::map<std::string, Tensor> grads;
    Tensor g({1});
    g[0] = 1.0;
    grads.emplace("w", g);
    std::vector<std::pair<std::string, Tensor*>> params{{"w", &w}};
    adam_step(st, params, grads);
    const double expected = 1.0 - 0.1 / (1.0 + 1e-8);
    CHECK(w[0] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("ten adam steps on a quadratic match a scalar reference trace") {
    Tensor w({1});
    w[0] = 1.0;
    AdamState st;
    st.cfg.lr = 0.1;
    std::vector<std::pair<std::string, Tensor*>> params{{"w", &w}};

    double ref_w = 1.0;
    double ref_m = 0.0;
    double ref_v = 0.0;
    for (int step = 1; step <= 10; ++step) {
        std::map<std::string, Tensor> grads;
        Tensor g({1});
        g[0] = 2.0 * w[0];
        grads.emplace("w", g);
        adam_step(st, params, grads);

        const double rg = 2.0 * ref_w;
        ref_m = 0.9 * ref_m + (1.0 - 0.9) * rg;
        ref_v = 0.999 * ref_v + (1.0 - 0.999) * rg * rg;
        const double m_hat = ref_m / (1.0 - std::pow(0.9, static_cast<double>(step)));
        const double v_hat = ref_v / (1.0 - std::pow(0.999, static_cast<double>(step)));
        ref_w -= 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
        CHECK(std::abs(w[0] - ref_w) <= 1e-12);
    }
    CHECK(w[0] < 1.0);
}

TEST_CASE("adam rejects non-finite, missing, and mis-shaped gradients by name") {
    Tensor w({2});
    AdamState st;
    std::vector<std::pair<std::string, Tensor*>> params{{"layer.weight", &w}};

    std::map<std::string, Tensor> grads;
    Tensor g({2});
    g[1] = std::numeric_limits<double>::quiet_NaN();
    grads.emplace("layer.weight", g);
    CHECK_THROWS_WITH_AS(adam_step(st, params, grads), doctest::Contains("layer.weight"),
                         NumericError);

    std::map<std::string, Tensor> missing;
    CHECK_THROWS_WITH_AS(adam_step(st, params, missing), doctest::Contains("layer.weight"),
                         std::invalid_argument);

    std::map<std::string, Tensor> bad_shape;
    bad_shape.emplace("layer.weight", Tensor({3}));
    CHECK_THROWS_AS(adam_step(st, params, bad_shape), std::invalid_argument);
}

TEST_CASE("presets fix the ablation switch patterns") {
    CHECK_THROWS_AS(preset_config("no_such_preset"), ConfigError);
    CHECK(preset_config("overfit").iterations == 2000);

    const TrainConfig base = preset_config("table5_baseline");
    CHECK_FALSE(base.sw.cil_on);
    CHECK_FALSE(base.sw.gfa_on);
    CHECK_FALSE(base.sw.gca_on);
    CHECK_FALSE(base.sw.dc_on);

    const TrainConfig cil = preset_config("table5_cil");
    CHECK(cil.sw.cil_on);
    CHECK_FALSE(cil.sw.gfa_on);

    const TrainConfig gfa = preset_config("table5_cil_gfa");
    CHECK(gfa.sw.gfa_on);
    CHECK_FALSE(gfa.sw.gca_on);

    const TrainConfig gca = preset_config("table5_cil_gca");
    CHECK_FALSE(gca.sw.gfa_on);
    CHECK(gca.sw.gca_on);

    const TrainConfig dyconv = preset_config("table6_dyconv");
    CHECK_FALSE(dyconv.sw.md_on);
    CHECK_FALSE(dyconv.sw.dc_on);

    const TrainConfig md = preset_config("table6_md");
    CHECK(md.sw.md_on);
    CHECK_FALSE(md.sw.dc_on);

    const TrainConfig md_dc = preset_config("table6_md_dc");
    CHECK(md_dc.sw.md_on);
    CHECK(md_dc.sw.dc_on);

    CHECK(preset_config("confounder_full").sw.cil_on);
    CHECK_FALSE(preset_config("confounder_nocil").sw.cil_on);
}

TEST_CASE("training runs, logs every iteration, and lowers nothing to non-finite") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config();
    TrainResult result = train(tc, records);
    REQUIRE(result.log.size() == tc.iterations);
    for (std::size_t i = 0; i < result.log.size(); ++i) {
        CHECK(result.log[i].iteration == i);
        CHECK(std::isfinite(result.log[i].total));
        CHECK(result.log[i].wall_ms == 0.0);
        CHECK(result.log[i].total ==
              result.log[i].l_cf + result.log[i].l_tri + 0.1 * result.log[i].l_div);
    }
    // parameters moved away from their initialization
    GciModel fresh = make_model(model_config_for(tc, 2));
    auto trained = result.model.parameters();
    auto initial = fresh.parameters();
    double diff = 0.0;
    for (std::size_t i = 0; i < trained.size(); ++i) {
        for (std::size_t j = 0; j < trained[i].second->size(); ++j) {
            diff = std::max(diff,
                            std::abs((*trained[i].second)[j] - (*initial[i].second)[j]));
        }
    }
    CHECK(diff > 0.0);
}

TEST_CASE("training is deterministic including its run-directory artifacts") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config();
    fs::path dir_a = fresh_dir("gci_train_det_a");
    fs::path dir_b = fresh_dir("gci_train_det_b");
    TrainResult ra = train(tc, records, dir_a.string());
    TrainResult rb = train(tc, records, dir_b.string());

    REQUIRE(ra.log.size() == rb.log.size());
    for (std::size_t i = 0; i < ra.log.size(); ++i) {
        CHECK(ra.log[i].total == rb.log[i].total);
        CHECK(ra.log[i].l_cf == rb.log[i].l_cf);
        CHECK(ra.log[i].l_tri == rb.log[i].l_tri);
        CHECK(ra.log[i].l_div == rb.log[i].l_div);
    }
    CHECK(slurp(dir_a / "metrics.csv") == slurp(dir_b / "metrics.csv"));
    CHECK(slurp(dir_a / "checkpoint.gci") == slurp(dir_b / "checkpoint.gci"));

    const std::string csv = slurp(dir_a / "metrics.csv");
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == run_header(tc));
    CHECK(line.find("cil=1") != std::string::npos);
    std::getline(lines, line);
    CHECK(line == csv_header());
    std::size_t rows = 0;
    while (std::getline(lines, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == tc.iterations);
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("a different seed changes the training trajectory") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config(3);
    TrainConfig other = tiny_train_config(4);
    TrainResult ra = train(tc, records);
    TrainResult rb = train(other, records);
    bool differs = false;
    for (std::size_t i = 0; i < ra.log.size(); ++i) {
        if (ra.log[i].total != rb.log[i].total) differs = true;
    }
    CHECK(differs);
}

TEST_CASE("training without counterfactual learning keeps the log schema") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config();
    tc.sw = {false, false, false, false, false};
    TrainResult result = train(tc, records);
    REQUIRE(result.log.size() == tc.iterations);
    for (const TrainRow& row : result.log) {
        CHECK(std::isfinite(row.l_cf));
        CHECK(row.l_div == 0.0);
    }
    const std::string line = csv_line(result.log.back());
    std::size_t commas = 0;
    for (char ch : line) {
        if (ch == ',') ++commas;
    }
    CHECK(commas == 5);
}

TEST_CASE("training validates its inputs") {
    TrainConfig tc = tiny_train_config();
    CHECK_THROWS_AS(train(tc, {}), ConfigError);

    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig bad_batch = tc;
    bad_batch.batch_k = 1;
    CHECK_THROWS_AS(train(bad_batch, records), ConfigError);

    std::vector<SampleRecord> one_class;
    for (const SampleRecord& rec : records) {
        if (rec.label == 0) one_class.push_back(rec);
    }
    CHECK_THROWS_AS(train(tc, one_class), ConfigError);

    TrainConfig no_iters = tc;
    no_iters.iterations = 0;
    CHECK_THROWS_AS(train(no_iters, records), ConfigError);
}

TEST_CASE("gradient cutoff freezes the counterfactual generator when diversity is off") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config();
    tc.sw.dc_on = false;
    tc.cf_grad_cutoff = true;
    TrainResult cut = train(tc, records);
    GciModel fresh = make_model(model_config_for(tc, 2));
    for (const char* name : {"gen_cf.w0", "gen_cf.p", "gen_cf.q", "gen_cf.fc1", "gen_cf.fc2"}) {
        const Tensor* trained = nullptr;
        const Tensor* init = nullptr;
        for (auto& [n, t] : cut.model.parameters()) {
            if (n == name) trained = t;
        }
        for (auto& [n, t] : fresh.parameters()) {
            if (n == name) init = t;
        }
        REQUIRE(trained != nullptr);
        REQUIRE(init != nullptr);
        for (std::size_t i = 0; i < trained->size(); ++i) {
            CHECK((*trained)[i] == (*init)[i]);
        }
    }

    TrainConfig open = tiny_train_config();
    open.sw.dc_on = false;
    TrainResult moved = train(open, records);
    double diff = 0.0;
    for (auto& [n, t] : moved.model.parameters()) {
        if (std::string(n).rfind("gen_cf.", 0) != 0) continue;
        for (auto& [fn, ft] : fresh.parameters()) {
            if (fn == n) {
                for (std::size_t i = 0; i < t->size(); ++i) {
                    diff = std::max(diff, std::abs((*t)[i] - (*ft)[i]));
                }
            }
        }
    }
    CHECK(diff > 0.0);
}

TEST_CASE("strip distance averages per-strip euclidean distances") {
    Tensor a({2, 2});
    Tensor b({2, 2});
    b.at(0, 0) = 3.0;
    b.at(0, 1) = 4.0;
    CHECK(strip_distance(a, b) == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(strip_distance(a, a) == 0.0);
    Tensor c({3, 2});
    CHECK_THROWS_AS(strip_distance(a, c), std::invalid_argument);
}

TEST_CASE("gallery takes the first sequence of every identity") {
    auto records = generate(tiny_data_spec());
    std::vector<SampleRecord> gallery;
    std::vector<SampleRecord> probe;
    split_gallery_probe(records, &gallery, &probe);
    CHECK(gallery.size() == 2);
    CHECK(gallery[0].label != gallery[1].label);
    CHECK(probe.size() == records.size() - 2);
}

TEST_CASE("evaluating the gallery against itself gives perfect rank-1") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config();
    GciModel model = make_model(model_config_for(tc, 2));
    EvalReport report = evaluate(model, records, records);
    CHECK(report.rank1 == 1.0);
    CHECK(report.rank5 == 1.0);
    CHECK(report.evaluated == records.size());
    CHECK(report.excluded == 0);
    CHECK(report.mean_overlap < 0.0);
}

TEST_CASE("probes without a gallery identity are excluded and counted") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    std::vector<SampleRecord> gallery;
    std::vector<SampleRecord> probe = records;
    for (const SampleRecord& rec : records) {
        if (rec.label == 0) gallery.push_back(rec);
    }
    TrainConfig tc = tiny_train_config();
    GciModel model = make_model(model_config_for(tc, 2));
    EvalReport report = evaluate(model, gallery, probe);
    std::size_t label1 = 0;
    for (const SampleRecord& rec : probe) {
        if (rec.label == 1) ++label1;
    }
    CHECK(report.excluded == label1);
    CHECK(report.evaluated == probe.size() - label1);

    CHECK_THROWS_AS(evaluate(model, gallery, std::vector<SampleRecord>{probe[3]}), ConfigError);
}

TEST_CASE("overlap evaluation scores factual attention against the sample masks") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config();
    GciModel model = make_model(model_config_for(tc, 2));
    EvalReport report = evaluate(model, records, records, true);
    CHECK(report.mean_overlap >= 0.0);
    CHECK(report.mean_overlap <= 1.0);
}

TEST_CASE("attention map extraction matches the generator applied to pooled features") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config();
    GciModel model = make_model(model_config_for(tc, 2));
    Rng rng(1);
    const Tensor maps = attention_maps(model, records[0].sequence, true, rng);
    REQUIRE(maps.rank() == 3);
    CHECK(maps.extent(0) == 2);
    CHECK(maps.extent(1) == 4);
    CHECK(maps.extent(2) == 4);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        CHECK(maps[i] > 0.0);
        CHECK(maps[i] < 1.0);
    }
}

TEST_CASE("attention export writes an input view plus one file per map") {
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    TrainConfig tc = tiny_train_config();
    GciModel model = make_model(model_config_for(tc, 2));
    fs::path dir = fresh_dir("gci_attn_export");
    export_attention(model, records[0].sequence, dir.string(), true);
    CHECK(fs::exists(dir / "input.pgm"));
    CHECK(fs::exists(dir / "factual_0.pgm"));
    CHECK(fs::exists(dir / "factual_1.pgm"));
    CHECK(fs::exists(dir / "counterfactual_0.pgm"));
    CHECK(fs::exists(dir / "counterfactual_1.pgm"));
    CHECK_FALSE(fs::exists(dir / "factual_2.pgm"));

    // re-read each map and confirm the quantization error bound of one level
    Rng rng(Rng::mix(1, 0xFAu));
    const Tensor maps = attention_maps(model, records[0].sequence, true, rng);
    for (std::size_t m = 0; m < 2; ++m) {
        double lo = maps.at(m, 0, 0);
        double hi = lo;
        for (std::size_t i = 0; i < maps.extent(1); ++i) {
            for (std::size_t j = 0; j < maps.extent(2); ++j) {
                lo = std::min(lo, maps.at(m, i, j));
                hi = std::max(hi, maps.at(m, i, j));
            }
        }
        const Tensor img =
            read_pgm((dir / ("factual_" + std::to_string(m) + ".pgm")).string());
        for (std::size_t i = 0; i < maps.extent(1); ++i) {
            for (std::size_t j = 0; j < maps.extent(2); ++j) {
                const double norm = (maps.at(m, i, j) - lo) / (hi - lo);
                CHECK(std::abs(img.at(i, j) / 255.0 - norm) <= 1.0 / 255.0);
            }
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("constant attention maps export as uniform mid-gray") {
    TrainConfig tc = tiny_train_config();
    tc.sw.gfa_on = false;  // static factual generator
    GciModel model = make_model(model_config_for(tc, 2));
    model.gen_f.static_kernel.fill(0.0);  // zero kernel -> constant sigmoid(0) = 0.5 maps
    auto records = split_of(generate(tiny_data_spec()), Split::Train);
    fs::path dir = fresh_dir("gci_attn_const");
    export_attention(model, records[0].sequence, dir.string(), false);
    const Tensor img = read_pgm((dir / "factual_0.pgm").string());
    for (std::size_t i = 0; i < img.size(); ++i) {
        CHECK(img[i] == 128.0);
    }
    fs::remove_all(dir);
}

TEST_CASE("csv rows hold six columns that survive a parse round trip") {
    CHECK(csv_header() == "iteration,l_cf,l_tri,l_div,total,wall_ms");
    TrainRow row;
    row.iteration = 12;
    row.l_cf = 1.375;
    row.l_tri = 0.2;
    row.l_div = -3.5000000000000004;
    row.total = row.l_cf + row.l_tri + 0.1 * row.l_div;
    const std::string line = csv_line(row);
    std::istringstream in(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(in, field, ',')) {
        fields.push_back(field);
    }
    REQUIRE(fields.size() == 6);
    CHECK(std::strtoull(fields[0].c_str(), nullptr, 10) == 12);
    CHECK(std::strtod(fields[1].c_str(), nullptr) == row.l_cf);
    CHECK(std::strtod(fields[2].c_str(), nullptr) == row.l_tri);
    CHECK(std::strtod(fields[3].c_str(), nullptr) == row.l_div);
    CHECK(std::strtod(fields[4].c_str(), nullptr) == row.total);
    CHECK(std::strtod(fields[5].c_str(), nullptr) == 0.0);
}
