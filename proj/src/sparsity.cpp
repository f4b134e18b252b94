// SPDX-License-Identifier: Apache-2.0
#include "pts/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace pts {

namespace {

void check_rate(double rate, const char* who) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument(std::string(who) + ": rate outside [0,1]");
}

// Ranks `idx` by descending |w|, ties by ascending index, and keeps the first k.
void keep_largest(const double* w, std::vector<std::size_t>& idx, std::size_t k, double* mask) {
    auto before = [w](std::size_t a, std::size_t b) {
        const double ma = std::abs(w[a]), mb = std::abs(w[b]);
        return ma != mb ? ma > mb : a < b;
    };
    if (k == 0) return;
    if (k >= idx.size()) {
        for (std::size_t i : idx) mask[i] = 1.0;
        return;
    }
    std::nth_element(idx.begin(), idx.begin() + static_cast<long>(k) - 1, idx.end(), before);
    const std::size_t kth = idx[k - 1];
    for (std::size_t i : idx) {
        if (!before(kth, i)) mask[i] = 1.0;  // i ranks at or above the k-th entry
    }
}

std::vector<std::size_t> layer_sizes(const Network& net) {
    std::vector<std::size_t> sizes;
    for (auto i : net.prunable_layers()) sizes.push_back(net.layer(i).weight.numel());
    return sizes;
}

} // namespace

std::size_t kept_count(double rate, std::size_t size) {
    check_rate(rate, "kept_count");
    const double kept = std::floor((1.0 - rate) * static_cast<double>(size) + 1e-9);
    return std::min(size, static_cast<std::size_t>(kept));
}

Tensor topk_mask(const Tensor& weights, double rate) {
    const std::size_t k = kept_count(rate, weights.numel());
    Tensor mask(weights.shape());
    std::vector<std::size_t> idx(weights.numel());
    std::iota(idx.begin(), idx.end(), 0);
    keep_largest(weights.data(), idx, k, mask.data());
    return mask;
}

NMPattern NMPattern::parse(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("N:M pattern '" + text + "' must look like 2:4");
    NMPattern p;
    try {
        p.n = std::stoul(text.substr(0, colon));
        p.m = std::stoul(text.substr(colon + 1));
    } catch (const std::exception&) {
        throw std::invalid_argument("N:M pattern '" + text + "' must look like 2:4");
    }
    p.validate();
    return p;
}

std::string NMPattern::str() const { return std::to_string(n) + ":" + std::to_string(m); }

void NMPattern::validate() const {
    if (n < 1 || n > m) throw std::invalid_argument("N:M pattern " + str() + " needs 1 <= n <= m");
}

void for_each_nm_group(const Shape& shape, std::size_t m,
                       const std::function<void(const std::vector<std::size_t>&)>& visit) {
    if (m == 0) throw std::invalid_argument("N:M group size must be positive");
    std::size_t rows = 1, len = 0;
    if (shape.size() == 2) {
        rows = shape[0];
        len = shape[1];
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t g = 0; g < len; g += m) {
                std::vector<std::size_t> group;
                for (std::size_t j = g; j < std::min(len, g + m); ++j) group.push_back(r * len + j);
                visit(group);
            }
        return;
    }
    if (shape.size() == 4) {
        // Reduction row of the lowered kernel in (ky, kx, c) order, channels innermost.
        const std::size_t c = shape[1], kh = shape[2], kw = shape[3];
        len = c * kh * kw;
        auto flat = [&](std::size_t o, std::size_t pos) {
            const std::size_t ci = pos % c, kx = (pos / c) % kw, ky = pos / (c * kw);
            return ((o * c + ci) * kh + ky) * kw + kx;
        };
        for (std::size_t o = 0; o < shape[0]; ++o)
            for (std::size_t g = 0; g < len; g += m) {
                std::vector<std::size_t> group;
                for (std::size_t j = g; j < std::min(len, g + m); ++j) group.push_back(flat(o, j));
                visit(group);
            }
        return;
    }
    len = shape.empty() ? 1 : shape.back();
    rows = shape_numel(shape) / std::max<std::size_t>(len, 1);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t g = 0; g < len; g += m) {
            std::vector<std::size_t> group;
            for (std::size_t j = g; j < std::min(len, g + m); ++j) group.push_back(r * len + j);
            visit(group);
        }
}

Tensor nm_mask(const Tensor& weights, const NMPattern& pattern) {
    pattern.validate();
    Tensor mask(weights.shape());
    for_each_nm_group(weights.shape(), pattern.m, [&](const std::vector<std::size_t>& group) {
        std::vector<std::size_t> idx = group;
        keep_largest(weights.data(), idx, std::min(pattern.n, idx.size()), mask.data());
    });
    return mask;
}

Tensor apply_mask(const Tensor& weights, const Tensor& mask) {
    if (weights.shape() != mask.shape())
        throw std::invalid_argument("apply_mask: " + shape_string(weights.shape()) + " vs " + shape_string(mask.shape()));
    Tensor out = weights;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
    return out;
}

double weighted_sparsity(const Network& net, const SparsityDistribution& dist) {
    const auto sizes = layer_sizes(net);
    if (dist.rates.size() != sizes.size()) throw std::invalid_argument("distribution does not match the network");
    double pruned = 0.0, total = 0.0;
    for (std::size_t l = 0; l < sizes.size(); ++l) {
        pruned += dist.rates[l] * static_cast<double>(sizes[l]);
        total += static_cast<double>(sizes[l]);
    }
    return total > 0 ? pruned / total : 0.0;
}

SparsityDistribution uniform_distribution(const Network& net, double target) {
    check_rate(target, "uniform_distribution");
    return {std::vector<double>(net.prunable_layers().size(), target), target};
}

SparsityDistribution erk_distribution(const Network& net, double target) {
    check_rate(target, "erk_distribution");
    const auto sizes = layer_sizes(net);
    const std::size_t count = sizes.size();
    std::vector<double> raw(count);
    for (std::size_t l = 0; l < count; ++l) {
        const Shape& s = net.layer(net.prunable_layers()[l]).weight.shape();
        const double dim_sum = std::accumulate(s.begin(), s.end(), 0.0);
        raw[l] = dim_sum / static_cast<double>(sizes[l]);
    }
    double total = 0.0;
    for (auto n : sizes) total += static_cast<double>(n);
    std::vector<bool> dense(count, false);
    std::vector<double> density(count, 1.0);
    for (;;) {
        double budget = (1.0 - target) * total, divisor = 0.0;
        for (std::size_t l = 0; l < count; ++l) {
            if (dense[l]) budget -= static_cast<double>(sizes[l]);
            else divisor += raw[l] * static_cast<double>(sizes[l]);
        }
        if (divisor <= 0.0) break;
        const double scale = budget / divisor;
        bool changed = false;
        for (std::size_t l = 0; l < count; ++l) {
            if (dense[l]) continue;
            density[l] = scale * raw[l];
            if (density[l] > 1.0) {
                dense[l] = true;
                changed = true;
            }
        }
        if (!changed) break;
    }
    SparsityDistribution dist{std::vector<double>(count), target};
    for (std::size_t l = 0; l < count; ++l) dist.rates[l] = dense[l] ? 0.0 : std::clamp(1.0 - density[l], 0.0, 1.0);
    return dist;
}

SparsityDistribution exclude_layers(const Network& net, const SparsityDistribution& dist,
                                    const std::vector<std::size_t>& ordinals) {
    const auto sizes = layer_sizes(net);
    SparsityDistribution out = dist;
    std::vector<bool> fixed(sizes.size(), false);
    for (auto o : ordinals) {
        if (o >= sizes.size()) throw std::invalid_argument("exclude_layers: ordinal out of range");
        fixed[o] = true;
        out.rates[o] = 0.0;
    }
    double total = 0.0;
    for (auto n : sizes) total += static_cast<double>(n);
    for (;;) {
        double need = dist.target * total, have = 0.0;
        for (std::size_t l = 0; l < sizes.size(); ++l) {
            if (fixed[l]) need -= out.rates[l] * static_cast<double>(sizes[l]);
            else have += out.rates[l] * static_cast<double>(sizes[l]);
        }
        if (have <= 0.0) break;
        const double scale = need / have;
        bool changed = false;
        for (std::size_t l = 0; l < sizes.size(); ++l) {
            if (fixed[l]) continue;
            out.rates[l] *= scale;
            if (out.rates[l] > 1.0) {
                out.rates[l] = 1.0;
                fixed[l] = true;
                changed = true;
            }
        }
        if (!changed) break;
    }
    return out;
}

SparseMask topk_masks(const Network& net, const SparsityDistribution& dist) {
    const auto& p = net.prunable_layers();
    if (dist.rates.size() != p.size()) throw std::invalid_argument("topk_masks: distribution does not match network");
    SparseMask masks;
    for (std::size_t l = 0; l < p.size(); ++l) masks.layers.push_back(topk_mask(net.layer(p[l]).weight, dist.rates[l]));
    return masks;
}

SparseMask nm_masks(const Network& net, const NMPattern& pattern) {
    SparseMask masks;
    for (auto i : net.prunable_layers()) masks.layers.push_back(nm_mask(net.layer(i).weight, pattern));
    return masks;
}

SparseMask dense_masks(const Network& net) {
    SparseMask masks;
    for (auto i : net.prunable_layers()) masks.layers.emplace_back(net.layer(i).weight.shape(), 1.0);
    return masks;
}

std::size_t mask_ones(const Tensor& mask) {
    return static_cast<std::size_t>(std::count_if(mask.values().begin(), mask.values().end(), [](double v) { return v != 0.0; }));
}

double global_sparsity(const Network& net, const SparseMask& masks) {
    check_mask_congruent(net, masks);
    std::size_t ones = 0, total = 0;
    for (const auto& m : masks.layers) {
        ones += mask_ones(m);
        total += m.numel();
    }
    return total ? 1.0 - static_cast<double>(ones) / static_cast<double>(total) : 0.0;
}

double mask_churn(const SparseMask& before, const SparseMask& after) {
    if (before.layers.size() != after.layers.size()) throw std::invalid_argument("mask_churn: layer count differs");
    std::size_t flipped = 0, total = 0;
    for (std::size_t l = 0; l < before.layers.size(); ++l) {
        const Tensor& a = before.layers[l];
        const Tensor& b = after.layers[l];
        if (a.shape() != b.shape()) throw std::invalid_argument("mask_churn: shape differs");
        for (std::size_t i = 0; i < a.numel(); ++i) flipped += (a[i] != 0.0) != (b[i] != 0.0);
        total += a.numel();
    }
    return total ? static_cast<double>(flipped) / static_cast<double>(total) : 0.0;
}

void save_masks(const Network& net, const SparseMask& masks, const std::string& base_path) {
    check_mask_congruent(net, masks);
    std::ofstream index(base_path + ".index");
    std::ofstream bits(base_path + ".bits", std::ios::binary);
    if (!index || !bits) throw std::runtime_error("save_masks: cannot open " + base_path);
    index << "ptsmask 1\nlayers " << masks.layers.size() << "\n";
    std::size_t offset = 0;
    for (std::size_t l = 0; l < masks.layers.size(); ++l) {
        const Tensor& m = masks.layers[l];
        std::vector<unsigned char> packed((m.numel() + 7) / 8, 0);
        for (std::size_t i = 0; i < m.numel(); ++i)
            if (m[i] != 0.0) packed[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
        std::string shape;
        for (std::size_t d = 0; d < m.rank(); ++d) shape += (d ? "," : "") + std::to_string(m.dim(d));
        index << net.layer_name(net.prunable_layers()[l]) << ' ' << shape << ' ' << m.numel() << ' ' << mask_ones(m)
              << ' ' << offset << "\n";
        bits.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
        offset += packed.size();
    }
}

SparseMask load_masks(const std::string& base_path) {
    std::ifstream index(base_path + ".index");
    std::ifstream bits(base_path + ".bits", std::ios::binary);
    if (!index || !bits) throw std::runtime_error("load_masks: cannot open " + base_path);
    std::string magic, key;
    int version = 0;
    std::size_t count = 0;
    if (!(index >> magic >> version >> key >> count) || magic != "ptsmask" || version != 1 || key != "layers")
        throw std::runtime_error("load_masks: bad index header");
    std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bits)), std::istreambuf_iterator<char>());
    SparseMask masks;
    for (std::size_t l = 0; l < count; ++l) {
        std::string name, shape_text;
        std::size_t numel = 0, nnz = 0, offset = 0;
        if (!(index >> name >> shape_text >> numel >> nnz >> offset))
            throw std::runtime_error("load_masks: truncated index");
        Shape shape;
        std::stringstream ss(shape_text);
        for (std::string d; std::getline(ss, d, ',');) shape.push_back(std::stoul(d));
        if (shape_numel(shape) != numel || offset + (numel + 7) / 8 > payload.size())
            throw std::runtime_error("load_masks: inconsistent entry for " + name);
        Tensor m(shape);
        for (std::size_t i = 0; i < numel; ++i) m[i] = (payload[offset + i / 8] >> (i % 8)) & 1u ? 1.0 : 0.0;
        if (mask_ones(m) != nnz) throw std::runtime_error("load_masks: nnz mismatch for " + name);
        masks.layers.push_back(std::move(m));
    }
    return masks;
}

void save_distribution(const Network& net, const SparsityDistribution& dist, const std::string& path) {
    const auto sizes = layer_sizes(net);
    if (dist.rates.size() != sizes.size()) throw std::invalid_argument("save_distribution: size mismatch");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_distribution: cannot open " + path);
    out << std::setprecision(17);
    out << "target " << dist.target << "\nlayers " << sizes.size() << "\n";
    for (std::size_t l = 0; l < sizes.size(); ++l)
        out << net.layer_name(net.prunable_layers()[l]) << ' ' << sizes[l] << ' ' << dist.rates[l] << "\n";
}

SparsityDistribution load_distribution(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_distribution: cannot open " + path);
    SparsityDistribution dist;
    std::string key;
    std::size_t count = 0;
    if (!(in >> key >> dist.target) || key != "target") throw std::runtime_error("load_distribution: missing target");
    if (!(in >> key >> count) || key != "layers") throw std::runtime_error("load_distribution: missing layer count");
    for (std::size_t l = 0; l < count; ++l) {
        std::string name;
        std::size_t numel = 0;
        double rate = 0;
        if (!(in >> name >> numel >> rate)) throw std::runtime_error("load_distribution: truncated");
        check_rate(rate, "load_distribution");
        dist.rates.push_back(rate);
    }
    return dist;
}

std::string distribution_summary(const Network& net, const SparsityDistribution& dist, const SparseMask* masks) {
    const auto sizes = layer_sizes(net);
    std::ostringstream out;
    out << std::left << std::setw(14) << "layer" << std::right << std::setw(10) << "numel" << std::setw(10) << "rate"
        << std::setw(10) << "kept" << std::setw(10) << "realized" << "\n";
    std::size_t kept_total = 0, total = 0;
    for (std::size_t l = 0; l < sizes.size(); ++l) {
        const std::size_t kept = masks ? mask_ones(masks->layers[l]) : kept_count(dist.rates[l], sizes[l]);
        kept_total += kept;
        total += sizes[l];
        out << std::left << std::setw(14) << net.layer_name(net.prunable_layers()[l]) << std::right << std::setw(10)
            << sizes[l] << std::fixed << std::setprecision(4) << std::setw(10) << dist.rates[l] << std::setw(10) << kept
            << std::setw(10) << 1.0 - static_cast<double>(kept) / static_cast<double>(sizes[l]) << "\n";
    }
    out << std::left << std::setw(14) << "global" << std::right << std::setw(10) << total << std::setw(10)
        << dist.target << std::setw(10) << kept_total << std::setw(10)
        << (total ? 1.0 - static_cast<double>(kept_total) / static_cast<double>(total) : 0.0) << "\n";
    return out.str();
}

} // namespace pts
