#include "gci/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "gci/errors.hpp"
#include "gci/pgm.hpp"
#include "gci/rng.hpp"

namespace fs = std::filesystem;

namespace gci {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t split_code(Split split) {
    return split == Split::Train ? 1u : 2u;
}

const char* split_word(Split split) {
    return split == Split::Train ? "train" : "test";
}

void validate(const DatasetSpec& spec) {
    if (spec.num_classes < 2) {
        throw ConfigError("dataset: num_classes must be at least 2, got " +
                          std::to_string(spec.num_classes));
    }
    if (spec.frames < 2) {
        throw ConfigError("dataset: frames must be at least 2, got " +
                          std::to_string(spec.frames));
    }
    if (spec.train_per_class == 0 || spec.test_per_class == 0) {
        throw ConfigError("dataset: sequences per class must be positive");
    }
    if (spec.marker_size == 0) {
        throw ConfigError("dataset: marker_size must be positive");
    }
    if (spec.marker_value <= 0.0 || spec.marker_value > 1.0) {
        throw ConfigError("dataset: marker_value must lie in (0,1]");
    }
    if (spec.noise < 0.0 || spec.noise > 0.49) {
        throw ConfigError("dataset: noise must lie in [0,0.49]");
    }
    if (spec.freq_step <= 0.0) {
        throw ConfigError("dataset: freq_step must be positive");
    }
    if (spec.train_corr < 0.0 || spec.train_corr > 1.0) {
        throw ConfigError("dataset: train_corr must lie in [0,1]");
    }
    if (spec.test_corr > 1.0) {
        throw ConfigError("dataset: test_corr must lie in [0,1] (or be negative for 1/K)");
    }
    if (spec.marker_size > spec.signal_top) {
        throw ConfigError("dataset: marker region (rows [0," + std::to_string(spec.marker_size) +
                          ")) overlaps signal region (rows [" + std::to_string(spec.signal_top) +
                          "," + std::to_string(spec.height) + "))");
    }
    if (spec.signal_top + 4 > spec.height) {
        throw ConfigError("dataset: signal region (rows [" + std::to_string(spec.signal_top) +
                          "," + std::to_string(spec.height) + ")) needs at least 4 rows");
    }
    if (spec.width < spec.marker_size) {
        throw ConfigError("dataset: frame width too small for the marker");
    }
    if (spec.num_classes > 1) {
        const std::size_t span = spec.width - spec.marker_size;
        if (span / (spec.num_classes - 1) < spec.marker_size) {
            throw ConfigError("dataset: marker slots overlap; widen the frame or shrink "
                              "marker_size (width " + std::to_string(spec.width) + ", " +
                              std::to_string(spec.num_classes) + " slots of size " +
                              std::to_string(spec.marker_size) + ")");
        }
    }
}

std::size_t pick_marker_slot(Rng& rng, std::size_t label, std::size_t k, double corr) {
    if (rng.uniform() < corr) return label;
    const std::size_t other = static_cast<std::size_t>(rng.uniform_index(k - 1));
    return other >= label ? other + 1 : other;
}

SampleRecord make_sample(const DatasetSpec& spec, Split split, std::size_t label,
                         std::size_t index) {
    Rng rng(Rng::mix(spec.seed, split_code(split), label, index));
    const std::size_t t = spec.frames;
    const std::size_t h = spec.height;
    const std::size_t w = spec.width;

    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const std::size_t slot = pick_marker_slot(rng, label, spec.num_classes,
                                              effective_corr(spec, split));
    const std::size_t slot_col = marker_slot_column(spec, slot);

    const double band = static_cast<double>(h - spec.signal_top);
    const double amp = band / 2.0 - 1.0;
    const double freq = 1.0 + spec.freq_step * static_cast<double>(label);

    SampleRecord rec;
    rec.label = label;
    rec.split = split;
    rec.sequence = Tensor({t, 1, h, w});
    rec.confounder_mask = Tensor({h, w});
    for (std::size_t r = 0; r < spec.marker_size; ++r) {
        for (std::size_t c = 0; c < spec.marker_size; ++c) {
            rec.confounder_mask.at(r, slot_col + c) = 1.0;
        }
    }

    for (std::size_t f = 0; f < t; ++f) {
        const double walk = 2.0 * kPi * static_cast<double>(f) / static_cast<double>(t);
        for (std::size_t x = 0; x < w; ++x) {
            const double wave = std::sin(2.0 * kPi * freq * static_cast<double>(x) /
                                             static_cast<double>(w) +
                                         phase + walk);
            const double boundary = static_cast<double>(spec.signal_top) +
                                    amp * 0.5 * (1.0 + wave);
            for (std::size_t r = 0; r < h; ++r) {
                const bool body = static_cast<double>(r) >= boundary;
                const double noise = spec.noise * rng.uniform();
                rec.sequence.at(f, 0, r, x) = body ? 1.0 - noise : noise;
            }
        }
        for (std::size_t r = 0; r < spec.marker_size; ++r) {
            for (std::size_t c = 0; c < spec.marker_size; ++c) {
                rec.sequence.at(f, 0, r, slot_col + c) = spec.marker_value;
            }
        }
    }
    return rec;
}

std::string sequence_rel_dir(const SampleRecord& rec, std::size_t index) {
    std::ostringstream out;
    out << split_word(rec.split) << "/c" << rec.label << "/s" << index;
    return out.str();
}

std::string frame_name(std::size_t f) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04zu.pgm", f);
    return buf;
}

}  // namespace

double effective_corr(const DatasetSpec& spec, Split split) {
    const double corr = split == Split::Train ? spec.train_corr : spec.test_corr;
    if (corr < 0.0) return 1.0 / static_cast<double>(spec.num_classes);
    return corr;
}

std::size_t marker_slot_column(const DatasetSpec& spec, std::size_t slot) {
    if (spec.num_classes <= 1) return 0;
    const std::size_t span = spec.width - spec.marker_size;
    return slot * span / (spec.num_classes - 1);
}

std::vector<SampleRecord> generate(const DatasetSpec& spec) {
    validate(spec);
    std::vector<SampleRecord> records;
    records.reserve(spec.num_classes * (spec.train_per_class + spec.test_per_class));
    for (Split split : {Split::Train, Split::Test}) {
        const std::size_t per_class =
            split == Split::Train ? spec.train_per_class : spec.test_per_class;
        for (std::size_t label = 0; label < spec.num_classes; ++label) {
            for (std::size_t index = 0; index < per_class; ++index) {
                records.push_back(make_sample(spec, split, label, index));
            }
        }
    }
    return records;
}

void write_dataset(const std::string& dir, const std::vector<SampleRecord>& records) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("dataset: cannot create directory '" + dir + "': " + ec.message());
    }
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) {
        throw IoError("dataset: cannot open '" + dir + "/manifest.txt' for writing");
    }
    std::size_t per_key_index = 0;
    std::size_t prev_label = 0;
    Split prev_split = Split::Train;
    bool first = true;
    for (const SampleRecord& rec : records) {
        if (first || rec.label != prev_label || rec.split != prev_split) {
            per_key_index = 0;
            prev_label = rec.label;
            prev_split = rec.split;
            first = false;
        }
        const std::string rel = sequence_rel_dir(rec, per_key_index);
        ++per_key_index;
        const std::string seq_dir = dir + "/" + rel;
        fs::create_directories(seq_dir, ec);
        if (ec) {
            throw IoError("dataset: cannot create directory '" + seq_dir + "': " + ec.message());
        }
        const std::size_t t = rec.sequence.extent(0);
        const std::size_t h = rec.sequence.extent(2);
        const std::size_t w = rec.sequence.extent(3);
        Tensor frame({h, w});
        for (std::size_t f = 0; f < t; ++f) {
            for (std::size_t r = 0; r < h; ++r) {
                for (std::size_t c = 0; c < w; ++c) {
                    frame.at(r, c) = rec.sequence.at(f, 0, r, c) * 255.0;
                }
            }
            write_pgm(seq_dir + "/" + frame_name(f), frame);
        }
        Tensor mask_img = rec.confounder_mask;
        mask_img *= 255.0;
        write_pgm(seq_dir + "/mask.pgm", mask_img);
        manifest << rel << " " << rec.label << " " << split_word(rec.split) << " " << t << "\n";
    }
    if (!manifest) {
        throw IoError("dataset: manifest write failed under '" + dir + "'");
    }
}

std::vector<SampleRecord> load_dataset(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) {
        throw IoError("dataset: cannot open '" + dir + "/manifest.txt' for reading");
    }
    std::vector<SampleRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream in(line);
        std::string rel;
        std::string split_name;
        long label = -1;
        long frames = -1;
        if (!(in >> rel >> label >> split_name >> frames) || label < 0 || frames <= 0 ||
            (split_name != "train" && split_name != "test")) {
            throw IoError("dataset: malformed manifest line " + std::to_string(line_no) +
                          " in '" + dir + "/manifest.txt'");
        }
        const std::string seq_dir = dir + "/" + rel;
        SampleRecord rec;
        rec.label = static_cast<std::size_t>(label);
        rec.split = split_name == "train" ? Split::Train : Split::Test;
        for (std::size_t f = 0; f < static_cast<std::size_t>(frames); ++f) {
            Tensor img = read_pgm(seq_dir + "/" + frame_name(f));
            const std::size_t h = img.extent(0);
            const std::size_t w = img.extent(1);
            if (f == 0) {
                rec.sequence = Tensor({static_cast<std::size_t>(frames), 1, h, w});
            } else if (h != rec.sequence.extent(2) || w != rec.sequence.extent(3)) {
                throw IoError("dataset: frame size mismatch in '" + seq_dir + "'");
            }
            for (std::size_t r = 0; r < h; ++r) {
                for (std::size_t c = 0; c < w; ++c) {
                    rec.sequence.at(f, 0, r, c) = img.at(r, c) / 255.0;
                }
            }
        }
        Tensor mask = read_pgm(seq_dir + "/mask.pgm");
        rec.confounder_mask = Tensor({mask.extent(0), mask.extent(1)});
        for (std::size_t i = 0; i < mask.size(); ++i) {
            rec.confounder_mask[i] = mask[i] >= 128.0 ? 1.0 : 0.0;
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) {
        throw IoError("dataset: empty manifest in '" + dir + "'");
    }
    return records;
}

std::vector<SampleRecord> load_silhouette_dir(const std::string& dir, std::size_t min_frames) {
    if (!fs::is_directory(dir)) {
        throw IoError("silhouettes: '" + dir + "' is not a directory");
    }
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory()) ids.push_back(entry.path().filename().string());
    }
    std::sort(ids.begin(), ids.end());

    std::vector<SampleRecord> records;
    std::size_t ref_h = 0;
    std::size_t ref_w = 0;
    for (std::size_t label = 0; label < ids.size(); ++label) {
        const fs::path id_dir = fs::path(dir) / ids[label];
        std::vector<fs::path> seq_dirs;
        for (const auto& cond : fs::directory_iterator(id_dir)) {
            if (!cond.is_directory()) continue;
            for (const auto& view : fs::directory_iterator(cond.path())) {
                if (view.is_directory()) seq_dirs.push_back(view.path());
            }
        }
        std::sort(seq_dirs.begin(), seq_dirs.end());
        for (const fs::path& seq_dir : seq_dirs) {
            std::vector<fs::path> frames;
            for (const auto& f : fs::directory_iterator(seq_dir)) {
                if (f.is_regular_file() && f.path().extension() == ".pgm") {
                    frames.push_back(f.path());
                }
            }
            std::sort(frames.begin(), frames.end());
            if (frames.size() < min_frames) {
                std::cerr << "warning: skipping '" << seq_dir.string() << "': only "
                          << frames.size() << " frame(s), need " << min_frames << "\n";
                continue;
            }
            SampleRecord rec;
            rec.label = label;
            rec.split = Split::Train;
            for (std::size_t f = 0; f < frames.size(); ++f) {
                Tensor img = read_pgm(frames[f].string());
                const std::size_t h = img.extent(0);
                const std::size_t w = img.extent(1);
                if (ref_h == 0) {
                    ref_h = h;
                    ref_w = w;
                }
                if (h != ref_h || w != ref_w) {
                    throw IoError("silhouettes: frame size mismatch at '" + frames[f].string() +
                                  "' (expected " + std::to_string(ref_w) + "x" +
                                  std::to_string(ref_h) + ", got " + std::to_string(w) + "x" +
                                  std::to_string(h) + ")");
                }
                if (f == 0) rec.sequence = Tensor({frames.size(), 1, h, w});
                for (std::size_t r = 0; r < h; ++r) {
                    for (std::size_t c = 0; c < w; ++c) {
                        rec.sequence.at(f, 0, r, c) = img.at(r, c) >= 128.0 ? 1.0 : 0.0;
                    }
                }
            }
            rec.confounder_mask = Tensor({ref_h, ref_w});
            records.push_back(std::move(rec));
        }
    }
    if (records.empty()) {
        throw IoError("silhouettes: no usable sequences under '" + dir + "'");
    }
    return records;
}

double confounder_overlap(const Tensor& attention, const Tensor& mask) {
    if (attention.rank() != 3) {
        throw std::invalid_argument("confounder_overlap: attention must be [M,h,w]");
    }
    if (mask.rank() != 2) {
        throw std::invalid_argument("confounder_overlap: mask must be [H,W]");
    }
    const std::size_t m = attention.extent(0);
    const std::size_t h = attention.extent(1);
    const std::size_t w = attention.extent(2);
    const std::size_t mask_h = mask.extent(0);
    const std::size_t mask_w = mask.extent(1);
    if (m == 0 || h == 0 || w == 0 || mask_h == 0 || mask_w == 0) {
        throw std::invalid_argument("confounder_overlap: empty attention or mask");
    }
    double acc = 0.0;
    for (std::size_t map = 0; map < m; ++map) {
        double inside = 0.0;
        double total = 0.0;
        for (std::size_t i = 0; i < mask_h; ++i) {
            const std::size_t src_i = i * h / mask_h;
            for (std::size_t j = 0; j < mask_w; ++j) {
                const std::size_t src_j = j * w / mask_w;
                const double a = attention.at(map, src_i, src_j);
                total += a;
                inside += a * mask.at(i, j);
            }
        }
        if (total == 0.0) {
            throw NumericError("confounder_overlap: attention map " + std::to_string(map) +
                               " sums to zero; the overlap ratio is undefined");
        }
        acc += inside / total;
    }
    return acc / static_cast<double>(m);
}

}  // namespace gci
