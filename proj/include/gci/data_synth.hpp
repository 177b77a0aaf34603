#ifndef GCI_DATA_SYNTH_HPP_
#define GCI_DATA_SYNTH_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "gci/tensor.hpp"

namespace gci {

enum class Split { Train, Test };

/// Synthetic gait-like sequences with a controllable shortcut cue.
///
/// Each frame is split into two disjoint bands:
///   - marker band: rows [0, marker_size). One of `num_classes` slots spread
///     between the top-left and top-right corners holds a bright square. The
///     slot index matches the label with probability train_corr / test_corr
///     (per split), otherwise it is uniform over the remaining slots.
///   - signal band: rows [signal_top, height). A filled blob whose upper
///     boundary is a sine wave with class-specific spatial frequency; the
///     phase advances across frames.
/// The marker is the only cue whose usefulness differs between splits, which
/// makes it a shortcut a model can be probed for.
struct DatasetSpec {
    std::size_t num_classes = 4;
    std::size_t train_per_class = 8;
    std::size_t test_per_class = 8;
    std::size_t frames = 30;
    std::size_t height = 32;
    std::size_t width = 16;
    std::size_t marker_size = 3;
    std::size_t signal_top = 6;
    double marker_value = 1.0;  // marker pixel intensity, in (0, 1]
    double noise = 0.05;      // per-pixel noise amplitude, in [0, 0.49]
    double freq_step = 1.0;   // spacing of the class-specific boundary frequencies
    double train_corr = 0.95;
    double test_corr = -1.0;  // negative → 1/num_classes
    std::uint64_t seed = 1;
};

struct SampleRecord {
    Tensor sequence;         // [T,1,H,W], values in [0,1]
    std::size_t label = 0;
    Tensor confounder_mask;  // [H,W], values in {0,1}; marks the marker square
    Split split = Split::Train;
};

/// Marker-slot correlation actually used for a split (resolves the 1/K default).
double effective_corr(const DatasetSpec& spec, Split split);

/// Leftmost column of marker slot `c`.
std::size_t marker_slot_column(const DatasetSpec& spec, std::size_t slot);

/// Generates the full train+test dataset (train records first, then test;
/// within a split ordered by label, then by sequence index). Deterministic in
/// `spec.seed`. Throws ConfigError for infeasible geometry, including
/// overlapping marker/signal bands.
std::vector<SampleRecord> generate(const DatasetSpec& spec);

/// Writes sequences as PGM frame files plus a per-sequence mask image, and a
/// manifest with one line per sequence: `<relative-dir> <label> <split> <frames>`.
void write_dataset(const std::string& dir, const std::vector<SampleRecord>& records);

/// Reads back a dataset written by write_dataset using its manifest.
std::vector<SampleRecord> load_dataset(const std::string& dir);

/// Loads binary silhouettes laid out as `<id>/<condition>/<view>/<frame>.pgm`.
/// Pixels >= 128 become 1.0, the rest 0.0. Frames are ordered by file name.
/// Sequences shorter than `min_frames` are skipped with a warning on stderr.
/// Labels are indices into the sorted id directory names. All frames must
/// share one size; masks are all-zero; split is Train (callers re-split).
std::vector<SampleRecord> load_silhouette_dir(const std::string& dir,
                                              std::size_t min_frames = 2);

/// Mean over attention maps of (sum of attention inside mask) / (sum of
/// attention), after nearest-neighbour upsampling of each [M,h,w] map to the
/// [H,W] mask grid. Throws NumericError when a map sums to zero.
double confounder_overlap(const Tensor& attention, const Tensor& mask);

}  // namespace gci

#endif  // GCI_DATA_SYNTH_HPP_
