#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "gci/data_synth.hpp"
#include "gci/errors.hpp"
#include "gci/pgm.hpp"
#include "gci/rng.hpp"
#include "gci/tensor.hpp"

using namespace gci;
namespace fs = std::filesystem;

namespace {

DatasetSpec small_spec() {
    DatasetSpec spec;
    spec.num_classes = 4;
    spec.train_per_class = 6;
    spec.test_per_class = 6;
    spec.frames = 4;
    spec.height = 32;
    spec.width = 16;
    spec.seed = 11;
    return spec;
}

std::size_t marker_rule_predict(const DatasetSpec& spec, const SampleRecord& rec) {
    std::size_t best = 0;
    double best_sum = -1.0;
    for (std::size_t slot = 0; slot < spec.num_classes; ++slot) {
        const std::size_t col = marker_slot_column(spec, slot);
        double sum = 0.0;
        for (std::size_t r = 0; r < spec.marker_size; ++r) {
            for (std::size_t c = 0; c < spec.marker_size; ++c) {
                sum += rec.sequence.at(0, 0, r, col + c);
            }
        }
        if (sum > best_sum) {
            best_sum = sum;
            best = slot;
        }
    }
    return best;
}

double marker_rule_accuracy(const DatasetSpec& spec, const std::vector<SampleRecord>& records,
                            Split split) {
    std::size_t hits = 0;
    std::size_t n = 0;
    for (const SampleRecord& rec : records) {
        if (rec.split != split) continue;
        ++n;
        if (marker_rule_predict(spec, rec) == rec.label) ++hits;
    }
    REQUIRE(n > 0);
    return static_cast<double>(hits) / static_cast<double>(n);
}

std::uint64_t tensor_hash(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double v = t[i];
        std::uint64_t bits = 0;
        std::memcpy(&bits, &v, sizeof(bits));
        h = (h ^ bits) * 1099511628211ull;
    }
    return h;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::vector<std::string> relative_files(const fs::path& root) {
    std::vector<std::string> rel;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (entry.is_regular_file()) {
            rel.push_back(fs::relative(entry.path(), root).string());
        }
    }
    std::sort(rel.begin(), rel.end());
    return rel;
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("dataset generation rejects degenerate shapes") {
    DatasetSpec spec = small_spec();
    spec.num_classes = 1;
    CHECK_THROWS_AS(generate(spec), ConfigError);

    spec = small_spec();
    spec.frames = 1;
    CHECK_THROWS_AS(generate(spec), ConfigError);

    spec = small_spec();
    spec.train_corr = 1.5;
    CHECK_THROWS_AS(generate(spec), ConfigError);
}

TEST_CASE("overlapping marker and signal bands fail construction naming both regions") {
    DatasetSpec spec = small_spec();
    spec.marker_size = 8;
    spec.signal_top = 4;
    bool threw = false;
    try {
        generate(spec);
    } catch (const ConfigError& err) {
        threw = true;
        const std::string msg = err.what();
        CHECK(msg.find("marker region") != std::string::npos);
        CHECK(msg.find("signal region") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("marker slots that cannot fit are rejected") {
    DatasetSpec spec = small_spec();
    spec.width = 8;
    spec.num_classes = 6;
    CHECK_THROWS_AS(generate(spec), ConfigError);
}

TEST_CASE("record shapes, value ranges, and mask support") {
    DatasetSpec spec = small_spec();
    auto records = generate(spec);
    REQUIRE(records.size() == spec.num_classes * (spec.train_per_class + spec.test_per_class));
    for (const SampleRecord& rec : records) {
        REQUIRE(rec.sequence.rank() == 4);
        CHECK(rec.sequence.extent(0) == spec.frames);
        CHECK(rec.sequence.extent(1) == 1);
        CHECK(rec.sequence.extent(2) == spec.height);
        CHECK(rec.sequence.extent(3) == spec.width);
        for (std::size_t i = 0; i < rec.sequence.size(); ++i) {
            CHECK(rec.sequence[i] >= 0.0);
            CHECK(rec.sequence[i] <= 1.0);
        }
        double mask_sum = 0.0;
        for (std::size_t i = 0; i < rec.confounder_mask.size(); ++i) {
            const double v = rec.confounder_mask[i];
            CHECK((v == 0.0 || v == 1.0));
            mask_sum += v;
        }
        CHECK(mask_sum == doctest::Approx(static_cast<double>(spec.marker_size *
                                                              spec.marker_size)));
        // the mask never reaches into the signal band
        for (std::size_t r = spec.signal_top; r < spec.height; ++r) {
            for (std::size_t c = 0; c < spec.width; ++c) {
                CHECK(rec.confounder_mask.at(r, c) == 0.0);
            }
        }
    }
}

TEST_CASE("per-split label balance") {
    DatasetSpec spec = small_spec();
    auto records = generate(spec);
    std::vector<std::size_t> train_counts(spec.num_classes, 0);
    std::vector<std::size_t> test_counts(spec.num_classes, 0);
    for (const SampleRecord& rec : records) {
        auto& counts = rec.split == Split::Train ? train_counts : test_counts;
        REQUIRE(rec.label < spec.num_classes);
        ++counts[rec.label];
    }
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        CHECK(train_counts[c] == spec.train_per_class);
        CHECK(test_counts[c] == spec.test_per_class);
    }
}

TEST_CASE("fully correlated marker makes the marker rule perfect") {
    DatasetSpec spec = small_spec();
    spec.train_corr = 1.0;
    spec.test_corr = 1.0;
    auto records = generate(spec);
    CHECK(marker_rule_accuracy(spec, records, Split::Train) == 1.0);
    CHECK(marker_rule_accuracy(spec, records, Split::Test) == 1.0);
}

TEST_CASE("default test correlation of 1/K makes the marker uninformative") {
    DatasetSpec spec = small_spec();
    spec.test_per_class = 64;
    spec.seed = 5;
    CHECK(effective_corr(spec, Split::Test) == doctest::Approx(0.25).epsilon(1e-15));
    auto records = generate(spec);
    const double acc = marker_rule_accuracy(spec, records, Split::Test);
    const double n = static_cast<double>(spec.num_classes * spec.test_per_class);
    const double p = 1.0 / static_cast<double>(spec.num_classes);
    const double sigma = std::sqrt(p * (1.0 - p) / n);
    CHECK(std::abs(acc - p) <= 3.0 * sigma);
}

TEST_CASE("explicit correlations are honoured") {
    DatasetSpec spec = small_spec();
    spec.test_corr = 0.6;
    CHECK(effective_corr(spec, Split::Train) == 0.95);
    CHECK(effective_corr(spec, Split::Test) == 0.6);
}

TEST_CASE("generation is bit-identical for the same seed and differs across seeds") {
    DatasetSpec spec = small_spec();
    auto a = generate(spec);
    auto b = generate(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].label == b[i].label);
        CHECK(a[i].split == b[i].split);
        CHECK(tensor_hash(a[i].sequence) == tensor_hash(b[i].sequence));
        CHECK(tensor_hash(a[i].confounder_mask) == tensor_hash(b[i].confounder_mask));
    }
    spec.seed = 12;
    auto c = generate(spec);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (tensor_hash(a[i].sequence) != tensor_hash(c[i].sequence)) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("train and test splits share no sequence content") {
    DatasetSpec spec = small_spec();
    auto records = generate(spec);
    std::set<std::uint64_t> train_hashes;
    std::set<std::uint64_t> test_hashes;
    for (const SampleRecord& rec : records) {
        auto& dst = rec.split == Split::Train ? train_hashes : test_hashes;
        dst.insert(tensor_hash(rec.sequence));
    }
    CHECK(train_hashes.size() == spec.num_classes * spec.train_per_class);
    CHECK(test_hashes.size() == spec.num_classes * spec.test_per_class);
    for (std::uint64_t h : train_hashes) {
        CHECK(test_hashes.count(h) == 0);
    }
}

TEST_CASE("pgm round trip preserves bytes and rejects malformed input") {
    fs::path dir = fresh_dir("gci_pgm_test");
    Tensor img({3, 5});
    Rng rng(3);
    for (std::size_t i = 0; i < img.size(); ++i) {
        img[i] = static_cast<double>(rng.uniform_index(256));
    }
    const std::string path = (dir / "img.pgm").string();
    write_pgm(path, img);
    Tensor back = read_pgm(path);
    REQUIRE(back.extent(0) == 3);
    REQUIRE(back.extent(1) == 5);
    for (std::size_t i = 0; i < img.size(); ++i) {
        CHECK(back[i] == img[i]);
    }

    CHECK_THROWS_AS(read_pgm((dir / "missing.pgm").string()), IoError);

    std::ofstream bad(dir / "bad.pgm", std::ios::binary);
    bad << "P2\n3 3\n255\n";
    bad.close();
    CHECK_THROWS_AS(read_pgm((dir / "bad.pgm").string()), IoError);

    std::ofstream trunc(dir / "trunc.pgm", std::ios::binary);
    trunc << "P5\n4 4\n255\nab";
    trunc.close();
    CHECK_THROWS_AS(read_pgm((dir / "trunc.pgm").string()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("dataset write/load round trip with quantization bound") {
    DatasetSpec spec = small_spec();
    spec.train_per_class = 2;
    spec.test_per_class = 2;
    spec.frames = 3;
    auto records = generate(spec);
    fs::path dir = fresh_dir("gci_dataset_roundtrip");
    write_dataset(dir.string(), records);
    auto loaded = load_dataset(dir.string());
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(loaded[i].label == records[i].label);
        CHECK(loaded[i].split == records[i].split);
        REQUIRE(loaded[i].sequence.shape() == records[i].sequence.shape());
        double max_err = 0.0;
        for (std::size_t j = 0; j < records[i].sequence.size(); ++j) {
            max_err = std::max(max_err,
                               std::abs(loaded[i].sequence[j] - records[i].sequence[j]));
        }
        CHECK(max_err <= 0.5 / 255.0 + 1e-12);
        REQUIRE(loaded[i].confounder_mask.shape() == records[i].confounder_mask.shape());
        for (std::size_t j = 0; j < records[i].confounder_mask.size(); ++j) {
            CHECK(loaded[i].confounder_mask[j] == records[i].confounder_mask[j]);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("dataset files are byte-identical across writes of the same spec") {
    DatasetSpec spec = small_spec();
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    spec.frames = 2;
    fs::path dir_a = fresh_dir("gci_dataset_bytes_a");
    fs::path dir_b = fresh_dir("gci_dataset_bytes_b");
    write_dataset(dir_a.string(), generate(spec));
    write_dataset(dir_b.string(), generate(spec));
    auto files_a = relative_files(dir_a);
    auto files_b = relative_files(dir_b);
    REQUIRE(files_a == files_b);
    REQUIRE(!files_a.empty());
    for (const std::string& rel : files_a) {
        CHECK(slurp(dir_a / rel) == slurp(dir_b / rel));
    }
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("loading a dataset without a manifest names the missing file") {
    fs::path dir = fresh_dir("gci_dataset_empty");
    CHECK_THROWS_WITH_AS(load_dataset(dir.string()),
                         doctest::Contains("manifest.txt"), IoError);
    fs::remove_all(dir);
}

namespace {

void write_flat_pgm(const fs::path& path, std::size_t h, std::size_t w, double value) {
    Tensor img({h, w});
    img.fill(value);
    write_pgm(path.string(), img);
}

}  // namespace

TEST_CASE("silhouette directory loader thresholds, orders, skips, and errors") {
    fs::path root = fresh_dir("gci_sil_test");
    // id "001": one sequence of three frames; file names check lexicographic order.
    fs::create_directories(root / "001" / "nm-01" / "090");
    write_flat_pgm(root / "001" / "nm-01" / "090" / "f_01.pgm", 4, 4, 200.0);
    write_flat_pgm(root / "001" / "nm-01" / "090" / "f_02.pgm", 4, 4, 100.0);
    write_flat_pgm(root / "001" / "nm-01" / "090" / "f_03.pgm", 4, 4, 128.0);
    // id "002": a too-short sequence (skipped) and a valid one.
    fs::create_directories(root / "002" / "nm-01" / "090");
    write_flat_pgm(root / "002" / "nm-01" / "090" / "a.pgm", 4, 4, 255.0);
    fs::create_directories(root / "002" / "nm-02" / "090");
    write_flat_pgm(root / "002" / "nm-02" / "090" / "a.pgm", 4, 4, 0.0);
    write_flat_pgm(root / "002" / "nm-02" / "090" / "b.pgm", 4, 4, 255.0);

    auto records = load_silhouette_dir(root.string(), 2);
    REQUIRE(records.size() == 2);
    CHECK(records[0].label == 0);
    CHECK(records[1].label == 1);
    REQUIRE(records[0].sequence.extent(0) == 3);
    // 200 -> 1, 100 -> 0, 128 -> 1 under the fixed threshold of 128
    CHECK(records[0].sequence.at(0, 0, 0, 0) == 1.0);
    CHECK(records[0].sequence.at(1, 0, 0, 0) == 0.0);
    CHECK(records[0].sequence.at(2, 0, 0, 0) == 1.0);
    CHECK(records[1].sequence.extent(0) == 2);
    CHECK(records[1].sequence.at(0, 0, 0, 0) == 0.0);
    CHECK(records[1].sequence.at(1, 0, 0, 0) == 1.0);
    for (const SampleRecord& rec : records) {
        CHECK(rec.confounder_mask.size() == 16);
        CHECK(rec.confounder_mask.max_abs() == 0.0);
    }

    // mixed frame sizes are an error naming the offending file
    write_flat_pgm(root / "002" / "nm-02" / "090" / "c.pgm", 5, 4, 255.0);
    CHECK_THROWS_WITH_AS(load_silhouette_dir(root.string(), 2),
                         doctest::Contains("c.pgm"), IoError);

    CHECK_THROWS_AS(load_silhouette_dir((root / "does_not_exist").string(), 2), IoError);

    fs::path empty_root = fresh_dir("gci_sil_empty");
    CHECK_THROWS_AS(load_silhouette_dir(empty_root.string(), 2), IoError);
    fs::remove_all(root);
    fs::remove_all(empty_root);
}

TEST_CASE("confounder overlap: uniform attention scores the mask area share") {
    Tensor att({2, 4, 4});
    att.fill(0.7);
    Tensor mask({10, 10});
    for (std::size_t j = 0; j < 10; ++j) {
        mask.at(3, j) = 1.0;  // 10 of 100 pixels
    }
    CHECK(confounder_overlap(att, mask) == doctest::Approx(0.10).epsilon(1e-12));
}

TEST_CASE("confounder overlap: attention entirely inside the mask scores one") {
    Tensor att({1, 8, 8});
    Tensor mask({8, 8});
    for (std::size_t i = 2; i < 4; ++i) {
        for (std::size_t j = 2; j < 4; ++j) {
            att.at(0, i, j) = 0.9;
            mask.at(i, j) = 1.0;
        }
    }
    mask.at(7, 7) = 1.0;  // extra mask area without attention must not change the ratio
    CHECK(confounder_overlap(att, mask) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("confounder overlap matches an explicit upsample-then-sum oracle") {
    Rng rng(21);
    Tensor att = rng.uniform_tensor({3, 4, 5}, 0.01, 1.0);
    Tensor mask({12, 15});
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    }
    double expected = 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
        Tensor up({12, 15});
        for (std::size_t i = 0; i < 12; ++i) {
            for (std::size_t j = 0; j < 15; ++j) {
                up.at(i, j) = att.at(m, i * 4 / 12, j * 5 / 15);
            }
        }
        double inside = 0.0;
        double total = 0.0;
        for (std::size_t i = 0; i < up.size(); ++i) {
            total += up[i];
            inside += up[i] * mask[i];
        }
        expected += inside / total;
    }
    expected /= 3.0;
    CHECK(confounder_overlap(att, mask) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("confounder overlap is invariant under positive rescaling of attention") {
    Rng rng(22);
    Tensor att = rng.uniform_tensor({2, 6, 6}, 0.01, 1.0);
    Tensor mask({6, 6});
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    }
    const double base = confounder_overlap(att, mask);
    Tensor scaled = att;
    scaled *= 3.7;
    CHECK(confounder_overlap(scaled, mask) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("confounder overlap rejects all-zero attention and bad shapes") {
    Tensor att({2, 4, 4});
    Tensor mask({4, 4});
    mask.fill(1.0);
    CHECK_THROWS_WITH_AS(confounder_overlap(att, mask), doctest::Contains("zero"),
                         NumericError);
    Tensor flat({4, 4});
    CHECK_THROWS_AS(confounder_overlap(flat, mask), std::invalid_argument);
    Tensor vec({4});
    CHECK_THROWS_AS(confounder_overlap(att, vec), std::invalid_argument);
}

TEST_CASE("dataset samples of one class share the outline frequency but differ in phase") {
    DatasetSpec spec = small_spec();
    spec.train_corr = 1.0;
    auto records = generate(spec);
    // two train samples of class 0 differ somewhere in the signal band
    const SampleRecord* first = nullptr;
    const SampleRecord* second = nullptr;
    for (const SampleRecord& rec : records) {
        if (rec.split == Split::Train && rec.label == 0) {
            if (!first) {
                first = &rec;
            } else if (!second) {
                second = &rec;
            }
        }
    }
    REQUIRE(first != nullptr);
    REQUIRE(second != nullptr);
    double diff = 0.0;
    for (std::size_t r = spec.signal_top; r < spec.height; ++r) {
        for (std::size_t c = 0; c < spec.width; ++c) {
            diff = std::max(diff, std::abs(first->sequence.at(0, 0, r, c) -
                                           second->sequence.at(0, 0, r, c)));
        }
    }
    CHECK(diff > 0.5);
}
