// SPDX-License-Identifier: Apache-2.0
#include "pts/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>

namespace pts {

namespace {

constexpr std::uint8_t kIdxUnsignedByte = 0x08;

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Blob {
    double cy, cx, sigma, amplitude;
};

} // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

IdxArray parse_idx(const std::vector<std::uint8_t>& file) {
    if (file.size() < 4) throw DataError("idx: file shorter than the magic number");
    if (file[0] != 0 || file[1] != 0) throw DataError("idx: magic must start with two zero bytes");
    if (file[2] != kIdxUnsignedByte) throw DataError("idx: only unsigned byte payloads are supported");
    const std::size_t rank = file[3];
    if (rank == 0) throw DataError("idx: zero-rank array");
    if (file.size() < 4 + 4 * rank) throw DataError("idx: truncated dimension list");
    IdxArray out;
    std::size_t count = 1;
    for (std::size_t d = 0; d < rank; ++d) {
        const std::uint8_t* p = file.data() + 4 + 4 * d;
        const std::uint32_t dim = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
        out.dims.push_back(dim);
        count *= dim;
    }
    const std::size_t header = 4 + 4 * rank;
    if (file.size() != header + count)
        throw DataError("idx: payload holds " + std::to_string(file.size() - header) + " bytes, dims need " +
                        std::to_string(count));
    out.bytes.assign(file.begin() + static_cast<long>(header), file.end());
    return out;
}

std::vector<std::uint8_t> encode_idx(const IdxArray& array) {
    std::vector<std::uint8_t> out{0, 0, kIdxUnsignedByte, static_cast<std::uint8_t>(array.dims.size())};
    for (auto d : array.dims) {
        out.push_back(static_cast<std::uint8_t>(d >> 24));
        out.push_back(static_cast<std::uint8_t>(d >> 16));
        out.push_back(static_cast<std::uint8_t>(d >> 8));
        out.push_back(static_cast<std::uint8_t>(d));
    }
    out.insert(out.end(), array.bytes.begin(), array.bytes.end());
    return out;
}

std::uint64_t file_checksum(const std::string& path) {
    const auto bytes = read_file(path);
    return fnv1a64(bytes.data(), bytes.size());
}

IdxArray read_idx(const std::string& path, const std::optional<std::uint64_t>& checksum) {
    const auto bytes = read_file(path);
    if (checksum && fnv1a64(bytes.data(), bytes.size()) != *checksum) throw DataError("idx: checksum mismatch for " + path);
    return parse_idx(bytes);
}

void write_idx(const std::string& path, const IdxArray& array) {
    const auto bytes = encode_idx(array);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ImageSet load_idx_images(const std::string& images_path, const std::string& labels_path,
                         const std::optional<std::uint64_t>& images_checksum,
                         const std::optional<std::uint64_t>& labels_checksum) {
    IdxArray images = read_idx(images_path, images_checksum);
    IdxArray labels = read_idx(labels_path, labels_checksum);
    if (labels.dims.size() != 1) throw DataError("idx: labels must be rank 1");
    if (images.dims.size() != 3 && images.dims.size() != 4) throw DataError("idx: images must be rank 3 or 4");
    if (images.dims[0] != labels.dims[0]) throw DataError("idx: image and label counts differ");
    ImageSet set;
    if (images.dims.size() == 3) set.sample_shape = {1, images.dims[1], images.dims[2]};
    else set.sample_shape = {images.dims[1], images.dims[2], images.dims[3]};
    set.pixels = std::move(images.bytes);
    set.labels = std::move(labels.bytes);
    set.classes = set.labels.empty() ? 0 : std::size_t{*std::max_element(set.labels.begin(), set.labels.end())} + 1;
    return set;
}

void save_idx_images(const ImageSet& set, const std::string& images_path, const std::string& labels_path) {
    IdxArray images;
    images.dims.push_back(static_cast<std::uint32_t>(set.size()));
    if (set.sample_shape[0] != 1) images.dims.push_back(static_cast<std::uint32_t>(set.sample_shape[0]));
    images.dims.push_back(static_cast<std::uint32_t>(set.sample_shape[1]));
    images.dims.push_back(static_cast<std::uint32_t>(set.sample_shape[2]));
    images.bytes = set.pixels;
    write_idx(images_path, images);
    write_idx(labels_path, IdxArray{{static_cast<std::uint32_t>(set.size())}, set.labels});
}

DatasetSplits make_synthetic(const SyntheticSpec& spec) {
    if (spec.classes < 2 || spec.classes > 256) throw DataError("synthetic: classes must lie in [2, 256]");
    if (spec.height < 4 || spec.width < 4) throw DataError("synthetic: image too small");
    std::mt19937_64 rng(spec.seed);
    const double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
    std::uniform_real_distribution<double> cy(1.5, h - 2.5), cx(1.5, w - 2.5), sig(1.0, 2.2), amp(0.4, 0.9);
    std::bernoulli_distribution negative(0.3);
    std::vector<std::vector<Blob>> prototypes(spec.classes);
    for (auto& proto : prototypes)
        for (std::size_t b = 0; b < spec.blobs; ++b) proto.push_back({cy(rng), cx(rng), sig(rng), (negative(rng) ? -0.6 : 1.0) * amp(rng)});

    auto render = [&](std::mt19937_64& g, std::uint8_t label, std::uint8_t* out) {
        std::uniform_int_distribution<int> shift(-spec.jitter, spec.jitter);
        std::uniform_real_distribution<double> contrast(0.7, 1.3), distract(0.0, 0.7);
        std::uniform_int_distribution<std::size_t> other_class(0, spec.classes - 1), other_blob(0, spec.blobs - 1);
        std::normal_distribution<double> pixel_noise(0.0, spec.noise);
        const double dy = shift(g), dx = shift(g), c = contrast(g);
        std::size_t oc = other_class(g);
        if (oc == label) oc = (oc + 1) % spec.classes;
        const Blob& extra = prototypes[oc][other_blob(g)];
        const double extra_w = distract(g);
        for (std::size_t y = 0; y < spec.height; ++y)
            for (std::size_t x = 0; x < spec.width; ++x) {
                double v = 0.25;
                for (const Blob& b : prototypes[label]) {
                    const double ry = static_cast<double>(y) - b.cy - dy, rx = static_cast<double>(x) - b.cx - dx;
                    v += c * b.amplitude * std::exp(-(ry * ry + rx * rx) / (2 * b.sigma * b.sigma));
                }
                const double ry = static_cast<double>(y) - extra.cy, rx = static_cast<double>(x) - extra.cx;
                v += extra_w * extra.amplitude * std::exp(-(ry * ry + rx * rx) / (2 * extra.sigma * extra.sigma));
                v += pixel_noise(g);
                out[y * spec.width + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
    };

    auto make_split = [&](std::size_t count, std::uint64_t tag) {
        ImageSet set;
        set.sample_shape = {1, spec.height, spec.width};
        set.classes = spec.classes;
        set.pixels.resize(count * spec.height * spec.width);
        set.labels.resize(count);
        std::mt19937_64 g(derive_seed(spec.seed, tag));
        for (std::size_t i = 0; i < count; ++i) {
            set.labels[i] = static_cast<std::uint8_t>(i % spec.classes);
            render(g, set.labels[i], set.pixels.data() + i * spec.height * spec.width);
        }
        return set;
    };
    return {make_split(spec.train, 1), make_split(spec.test, 2)};
}

LabeledData to_labeled(const ImageSet& set, const std::vector<std::size_t>& indices, std::uint64_t id_base) {
    const std::size_t sample = shape_numel(set.sample_shape);
    Shape shape{indices.size()};
    shape.insert(shape.end(), set.sample_shape.begin(), set.sample_shape.end());
    LabeledData out;
    out.inputs = Tensor(shape);
    out.classes = set.classes;
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::size_t i = indices[r];
        if (i >= set.size()) throw DataError("to_labeled: index out of range");
        for (std::size_t k = 0; k < sample; ++k) out.inputs[r * sample + k] = set.pixels[i * sample + k] / 255.0;
        out.labels.push_back(set.labels[i]);
        out.ids.push_back(id_base + i);
    }
    return out;
}

LabeledData to_labeled(const ImageSet& set, std::uint64_t id_base) {
    std::vector<std::size_t> all(set.size());
    std::iota(all.begin(), all.end(), 0);
    return to_labeled(set, all, id_base);
}

std::vector<std::size_t> sample_calibration(const ImageSet& train, std::size_t size, std::uint64_t seed,
                                            CalibrationSampling sampling) {
    if (size == 0) throw DataError("calibration: size must be positive");
    if (size > train.size()) throw DataError("calibration: requested more samples than the training split holds");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> picked;
    if (sampling == CalibrationSampling::Uniform) {
        std::vector<std::size_t> all(train.size());
        std::iota(all.begin(), all.end(), 0);
        std::shuffle(all.begin(), all.end(), rng);
        picked.assign(all.begin(), all.begin() + static_cast<long>(size));
    } else {
        std::vector<std::vector<std::size_t>> by_class(train.classes);
        for (std::size_t i = 0; i < train.size(); ++i) by_class.at(train.labels[i]).push_back(i);
        for (std::size_t c = 0; c < train.classes; ++c) {
            const std::size_t want = size / train.classes + (c < size % train.classes ? 1 : 0);
            auto& pool = by_class[c];
            if (want > pool.size()) throw DataError("calibration: class " + std::to_string(c) + " has too few samples");
            std::shuffle(pool.begin(), pool.end(), rng);
            picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<long>(want));
        }
        std::shuffle(picked.begin(), picked.end(), rng);
    }
    return picked;
}

void assert_disjoint(const LabeledData& a, const LabeledData& b) {
    std::set<std::uint64_t> seen(a.ids.begin(), a.ids.end());
    for (auto id : b.ids)
        if (seen.count(id)) throw DataError("calibration and evaluation sets share sample id " + std::to_string(id));
}

std::vector<Tensor> batch_inputs(const LabeledData& data, std::size_t batch_size) {
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    std::vector<Tensor> out;
    for (std::size_t b = 0; b < data.size(); b += batch_size)
        out.push_back(slice_rows(data.inputs, b, std::min(data.size(), b + batch_size)));
    return out;
}

std::vector<double> channel_std(const Tensor& inputs) {
    if (inputs.rank() < 2) throw std::invalid_argument("channel_std: expects a batch");
    const std::size_t n = inputs.dim(0), c = inputs.dim(1);
    const std::size_t inner = inputs.numel() / (n * c);
    std::vector<double> out(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0, sq = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t k = 0; k < inner; ++k) sum += inputs[(b * c + ch) * inner + k];
        const double mean = sum / static_cast<double>(n * inner);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t k = 0; k < inner; ++k) {
                const double d = inputs[(b * c + ch) * inner + k] - mean;
                sq += d * d;
            }
        out[ch] = std::sqrt(sq / static_cast<double>(n * inner));
    }
    return out;
}

BatchCycler::BatchCycler(const LabeledData& data, std::size_t batch_size, std::uint64_t seed)
    : data_(&data), batch_size_(batch_size), seed_(seed) {
    if (data.size() == 0) throw DataError("batch cycler: empty data set");
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    reshuffle();
}

std::size_t BatchCycler::batches_per_epoch() const { return (data_->size() + batch_size_ - 1) / batch_size_; }

void BatchCycler::reshuffle() {
    order_.resize(data_->size());
    std::iota(order_.begin(), order_.end(), 0);
    std::mt19937_64 rng(derive_seed(seed_, epoch_));
    std::shuffle(order_.begin(), order_.end(), rng);
    cursor_ = 0;
}

Batch BatchCycler::next() {
    if (cursor_ >= order_.size()) {
        ++epoch_;
        reshuffle();
    }
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    std::vector<std::size_t> rows(order_.begin() + static_cast<long>(cursor_), order_.begin() + static_cast<long>(end));
    cursor_ = end;
    Batch batch{gather_rows(data_->inputs, rows), {}};
    for (auto r : rows) batch.labels.push_back(data_->labels[r]);
    return batch;
}

} // namespace pts
