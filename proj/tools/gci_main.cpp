// Command-line front end: synthetic data generation, training, retrieval
// evaluation, gradient verification, and attention export.
//
// Exit codes: 0 success, 1 verification/numeric failure, 2 usage or
// configuration error, 3 I/O error.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gci/checkpoint.hpp"
#include "gci/config.hpp"
#include "gci/data_synth.hpp"
#include "gci/diffops.hpp"
#include "gci/errors.hpp"
#include "gci/gradcheck.hpp"
#include "gci/model.hpp"
#include "gci/pgm.hpp"
#include "gci/rng.hpp"
#include "gci/train_eval.hpp"

namespace fs = std::filesystem;
using namespace gci;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerification = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    out << text;
    if (!out) {
        throw IoError("write failed for '" + path + "'");
    }
}

std::vector<SampleRecord> records_for_split(const std::string& dir, Split split) {
    std::vector<SampleRecord> out;
    for (SampleRecord& rec : load_dataset(dir)) {
        if (rec.split == split) out.push_back(std::move(rec));
    }
    return out;
}

std::string report_text(const EvalReport& report) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "rank1=%.17g\nrank5=%.17g\nevaluated=%zu\nexcluded=%zu\noverlap=%.17g\n",
                  report.rank1, report.rank5, report.evaluated, report.excluded,
                  report.mean_overlap);
    return buf;
}

std::string report_csv(const EvalReport& report) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "rank1,rank5,evaluated,excluded,overlap\n"
                  "%.17g,%.17g,%zu,%zu,%.17g\n",
                  report.rank1, report.rank5, report.evaluated, report.excluded,
                  report.mean_overlap);
    return buf;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
    const ConfigFile file = load_config_file(spec_path);
    const DatasetSpec spec = dataset_spec_from(file);
    const std::vector<SampleRecord> records = generate(spec);
    write_dataset(out_dir, records);
    write_text(out_dir + "/spec_echo.txt", file.raw_text);
    std::cout << "wrote " << records.size() << " sequences to " << out_dir << "\n";
    return kExitOk;
}

AblationSwitches apply_ablation(AblationSwitches sw, const std::string& name) {
    if (name.empty() || name == "none") return sw;
    if (name == "no-cil") {
        sw.cil_on = false;
    } else if (name == "no-gfa") {
        sw.gfa_on = false;
    } else if (name == "no-gca") {
        sw.gca_on = false;
    } else if (name == "no-md") {
        sw.md_on = false;
    } else if (name == "no-dc") {
        sw.dc_on = false;
    } else {
        throw ConfigError("unknown ablation '" + name +
                          "' (expected none|no-cil|no-gfa|no-gca|no-md|no-dc)");
    }
    return sw;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& ablation) {
    const ConfigFile file = load_config_file(config_path);
    TrainConfig tc = train_config_from(file);
    tc.sw = apply_ablation(tc.sw, ablation);

    const std::vector<SampleRecord> train_set = records_for_split(data_dir, Split::Train);
    if (train_set.empty()) {
        throw ConfigError("train: no records in the train split of '" + data_dir + "'");
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("cannot create '" + out_dir + "': " + ec.message());
    }
    write_text(out_dir + "/config_echo.txt", file.raw_text);

    std::cout << run_header(tc) << "\n";
    TrainResult result = train(tc, train_set, out_dir);
    std::cout << "trained " << tc.iterations << " iterations; final total="
              << result.log.back().total << "\n";

    std::vector<SampleRecord> gallery;
    std::vector<SampleRecord> probe;
    split_gallery_probe(train_set, &gallery, &probe);
    std::string summary;
    if (!probe.empty()) {
        const EvalReport report = evaluate(result.model, gallery, probe, false);
        char line[128];
        std::snprintf(line, sizeof(line), "train rank-1=%.17g\n", report.rank1);
        summary += line;
    }
    const std::vector<SampleRecord> test_set = records_for_split(data_dir, Split::Test);
    if (!test_set.empty()) {
        std::vector<SampleRecord> t_gallery;
        std::vector<SampleRecord> t_probe;
        split_gallery_probe(test_set, &t_gallery, &t_probe);
        if (!t_probe.empty()) {
            const EvalReport report = evaluate(result.model, t_gallery, t_probe, true);
            char line[160];
            std::snprintf(line, sizeof(line), "test rank-1=%.17g\ntest overlap=%.17g\n",
                          report.rank1, report.mean_overlap);
            summary += line;
        }
    }
    write_text(out_dir + "/summary.txt", summary);
    std::cout << summary;
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& gallery_dir,
             const std::string& probe_dir, const std::string& csv_path) {
    const GciModel model = model_from_checkpoint(load_checkpoint(checkpoint_path));
    const std::vector<SampleRecord> gallery = load_dataset(gallery_dir);
    const std::vector<SampleRecord> probe = load_dataset(probe_dir);
    const EvalReport report = evaluate(model, gallery, probe, true);
    std::cout << report_text(report);
    if (!csv_path.empty()) {
        write_text(csv_path, report_csv(report));
    }
    return kExitOk;
}

int cmd_gradcheck(double eps, double rel_tol, std::uint64_t seed, const std::string& flip) {
    std::printf("gradcheck eps=%.1e rel_tol=%.1e seed=%llu\n", eps, rel_tol,
                static_cast<unsigned long long>(seed));
    bool all_pass = true;
    bool flip_used = flip.empty();
    for (RegisteredOp& reg : standard_diffops(seed)) {
        if (reg.op.name == flip) {
            flip_used = true;
            auto original = reg.op.backward;
            reg.op.backward = [original](const std::vector<Tensor>& params) {
                std::vector<Tensor> grads = original(params);
                for (Tensor& g : grads) g *= -1.0;
                return grads;
            };
        }
        const GradReport report = finite_diff_check(reg.op, reg.params, eps, rel_tol);
        std::printf("%s\n", report.summary_line().c_str());
        all_pass = all_pass && report.pass;
    }
    if (!flip_used) {
        throw ConfigError("gradcheck: --flip names no registered op: '" + flip + "'");
    }
    std::printf("gradcheck: %s\n", all_pass ? "PASS" : "FAIL");
    return all_pass ? kExitOk : kExitVerification;
}

Tensor sequence_from_dir(const std::string& dir) {
    if (!fs::is_directory(dir)) {
        throw IoError("sample '" + dir + "' is not a directory");
    }
    std::vector<fs::path> frames;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".pgm" &&
            entry.path().filename() != "mask.pgm") {
            frames.push_back(entry.path());
        }
    }
    std::sort(frames.begin(), frames.end());
    if (frames.empty()) {
        throw IoError("sample '" + dir + "' holds no .pgm frames");
    }
    Tensor seq;
    for (std::size_t f = 0; f < frames.size(); ++f) {
        const Tensor img = read_pgm(frames[f].string());
        if (f == 0) {
            seq = Tensor({frames.size(), 1, img.extent(0), img.extent(1)});
        } else if (img.extent(0) != seq.extent(2) || img.extent(1) != seq.extent(3)) {
            throw IoError("sample frame size mismatch at '" + frames[f].string() + "'");
        }
        for (std::size_t r = 0; r < img.extent(0); ++r) {
            for (std::size_t c = 0; c < img.extent(1); ++c) {
                seq.at(f, 0, r, c) = img.at(r, c) / 255.0;
            }
        }
    }
    return seq;
}

int cmd_export_attention(const std::string& checkpoint_path, const std::string& sample_dir,
                         const std::string& out_dir, bool counterfactual,
                         std::uint64_t draw_seed) {
    const GciModel model = model_from_checkpoint(load_checkpoint(checkpoint_path));
    const Tensor seq = sequence_from_dir(sample_dir);
    export_attention(model, seq, out_dir, counterfactual, draw_seed);
    std::cout << "wrote attention maps to " << out_dir << "\n";
    return kExitOk;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"gait recognition with counterfactual intervention and "
                 "diversity-constrained dynamic attention kernels"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_spec;
    std::string synth_out;
    synth->add_option("--spec", synth_spec, "dataset spec file (key=value)")->required();
    synth->add_option("--out", synth_out, "output dataset directory")->required();

    auto* train_cmd = app.add_subcommand("train", "train a model on a dataset directory");
    std::string train_config;
    std::string train_data;
    std::string train_out;
    std::string train_ablation;
    train_cmd->add_option("--config", train_config, "run configuration file")->required();
    train_cmd->add_option("--data", train_data, "dataset directory (from synth)")->required();
    train_cmd->add_option("--out", train_out, "run output directory")->required();
    train_cmd->add_option("--ablation", train_ablation,
                          "switch override: none|no-cil|no-gfa|no-gca|no-md|no-dc");

    auto* eval_cmd = app.add_subcommand("eval", "rank gallery/probe retrieval");
    std::string eval_ckpt;
    std::string eval_gallery;
    std::string eval_probe;
    std::string eval_csv;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--gallery", eval_gallery, "gallery dataset directory")->required();
    eval_cmd->add_option("--probe", eval_probe, "probe dataset directory")->required();
    eval_cmd->add_option("--csv", eval_csv, "also write the report as CSV");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    double grad_eps = 1e-5;
    double grad_tol = 1e-4;
    std::uint64_t grad_seed = 1;
    std::string grad_flip;
    grad_cmd->add_option("--eps", grad_eps, "central-difference step");
    grad_cmd->add_option("--rel-tol", grad_tol, "relative error tolerance");
    grad_cmd->add_option("--seed", grad_seed, "fixture seed");
    grad_cmd->add_option("--flip", grad_flip,
                         "negate the named op's analytic gradient (harness self-test)");

    auto* export_cmd = app.add_subcommand("export-attention", "write attention maps as PGM");
    std::string export_ckpt;
    std::string export_sample;
    std::string export_out;
    bool export_cf = false;
    std::uint64_t export_seed = 1;
    export_cmd->add_option("--checkpoint", export_ckpt, "model checkpoint")->required();
    export_cmd->add_option("--sample", export_sample, "directory of PGM frames")->required();
    export_cmd->add_option("--out", export_out, "output directory")->required();
    export_cmd->add_flag("--counterfactual", export_cf, "also export counterfactual maps");
    export_cmd->add_option("--draw-seed", export_seed, "seed for predefined attention draws");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    if (synth->parsed()) return cmd_synth(synth_spec, synth_out);
    if (train_cmd->parsed()) return cmd_train(train_config, train_data, train_out, train_ablation);
    if (eval_cmd->parsed()) return cmd_eval(eval_ckpt, eval_gallery, eval_probe, eval_csv);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_eps, grad_tol, grad_seed, grad_flip);
    if (export_cmd->parsed()) {
        return cmd_export_attention(export_ckpt, export_sample, export_out, export_cf,
                                    export_seed);
    }
    return kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitVerification;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitVerification;
    }
}
