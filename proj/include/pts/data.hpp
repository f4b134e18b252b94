// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pts/tensor.hpp"

namespace pts {

/// Raw 8-bit images as stored in IDX files.
struct ImageSet {
    Shape sample_shape;  // [C, H, W]
    std::vector<std::uint8_t> pixels;
    std::vector<std::uint8_t> labels;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
    bool operator==(const ImageSet&) const = default;
};

struct DatasetSplits {
    ImageSet train;
    ImageSet test;
};

/// Float view of a subset: pixels scaled to [0,1]. `ids` identify source
/// samples across splits (train index, or test index offset by kTestIdBase).
struct LabeledData {
    Tensor inputs;
    std::vector<std::uint32_t> labels;
    std::vector<std::uint64_t> ids;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
};

using CalibrationSet = LabeledData;

inline constexpr std::uint64_t kTestIdBase = 1ull << 40;

struct Batch {
    Tensor inputs;
    std::vector<std::uint32_t> labels;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// IDX: big-endian magic (0, 0, type, rank), rank big-endian uint32 dims, then data.
// Only unsigned byte payloads (type 0x08) are supported.
struct IdxArray {
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> bytes;
};

IdxArray read_idx(const std::string& path, const std::optional<std::uint64_t>& checksum = std::nullopt);
IdxArray parse_idx(const std::vector<std::uint8_t>& file);
void write_idx(const std::string& path, const IdxArray& array);
std::vector<std::uint8_t> encode_idx(const IdxArray& array);

/// Images [N, H, W] (or [N, C, H, W]) plus labels [N].
ImageSet load_idx_images(const std::string& images_path, const std::string& labels_path,
                         const std::optional<std::uint64_t>& images_checksum = std::nullopt,
                         const std::optional<std::uint64_t>& labels_checksum = std::nullopt);
void save_idx_images(const ImageSet& set, const std::string& images_path, const std::string& labels_path);

std::uint64_t file_checksum(const std::string& path);

struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t train = 6000;
    std::size_t test = 2000;
    std::size_t blobs = 3;
    double noise = 0.25;
    int jitter = 2;
    std::uint64_t seed = 7;
};

/// Each class owns a prototype made of Gaussian blobs; samples jitter the prototype
/// spatially, rescale its contrast, mix in a blob from another class and add pixel noise.
DatasetSplits make_synthetic(const SyntheticSpec& spec);

LabeledData to_labeled(const ImageSet& set, const std::vector<std::size_t>& indices, std::uint64_t id_base = 0);
LabeledData to_labeled(const ImageSet& set, std::uint64_t id_base = 0);

enum class CalibrationSampling { Balanced, Uniform };

/// Indices into `train`, deterministic under `seed`. Balanced sampling takes
/// size/classes per class (remainder to the lowest labels).
std::vector<std::size_t> sample_calibration(const ImageSet& train, std::size_t size, std::uint64_t seed,
                                            CalibrationSampling sampling);

/// Throws DataError if any id appears in both sets.
void assert_disjoint(const LabeledData& a, const LabeledData& b);

/// Consecutive batches in stored order; the last one may be short.
std::vector<Tensor> batch_inputs(const LabeledData& data, std::size_t batch_size);

/// Standard deviation per channel (axis 1) over every other axis.
std::vector<double> channel_std(const Tensor& inputs);

/// Cycles over `data` in batches, reshuffling at each epoch from (seed, epoch).
class BatchCycler {
public:
    BatchCycler(const LabeledData& data, std::size_t batch_size, std::uint64_t seed);

    Batch next();
    std::size_t epoch() const { return epoch_; }
    std::size_t batches_per_epoch() const;

private:
    void reshuffle();

    const LabeledData* data_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

/// splitmix64 finalizer over a base seed and a tag; used to split seeds per stage.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

} // namespace pts
