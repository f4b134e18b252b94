// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "pts/network.hpp"
#include "pts/tensor.hpp"

namespace pts {

/// Number of weights kept at `rate` out of `size`: floor((1 - rate) * size).
/// A 1e-9 guard absorbs representation error, e.g. (1 - 0.9) * 1000 = 99.999...
std::size_t kept_count(double rate, std::size_t size);

/// Binary mask with ones on the kept_count(rate, numel) largest |w|. Equal
/// magnitudes are ranked by ascending flat index.
Tensor topk_mask(const Tensor& weights, double rate);

/// At most `n` survivors in every `m` consecutive weights along the reduction
/// axis. n == m keeps everything.
struct NMPattern {
    std::size_t n = 2;
    std::size_t m = 4;

    static NMPattern parse(const std::string& text);  // "2:4"
    std::string str() const;
    void validate() const;
};

/// Groups are m consecutive entries of each output's reduction row: `in` for a
/// [out, in] weight; the (ky, kx, in) row with channels innermost for a
/// [out, in, k, k] kernel, so groups follow input channels whenever in is a
/// multiple of m. Any other rank is one row over its last axis. A trailing
/// group shorter than m keeps min(n, length) weights.
Tensor nm_mask(const Tensor& weights, const NMPattern& pattern);

/// Calls `visit(indices)` once per N:M group of `shape`, indices being flat offsets.
void for_each_nm_group(const Shape& shape, std::size_t m, const std::function<void(const std::vector<std::size_t>&)>& visit);

Tensor apply_mask(const Tensor& weights, const Tensor& mask);

struct SparsityDistribution {
    std::vector<double> rates;  // one per prunable layer
    double target = 0.0;

    bool operator==(const SparsityDistribution&) const = default;
};

/// Σ r_l·numel_l / Σ numel_l over the network's prunable layers.
double weighted_sparsity(const Network& net, const SparsityDistribution& dist);

SparsityDistribution uniform_distribution(const Network& net, double target);

/// Erdős–Rényi-Kernel: density_l ∝ Σ dims / Π dims of the weight tensor, scaled to
/// the global budget. Layers pushed above density 1 are held dense and the rest
/// rescaled until no layer overflows.
SparsityDistribution erk_distribution(const Network& net, double target);

/// Overrides the rate of the listed prunable-layer ordinals to 0 and rescales
/// the remaining layers to keep the global budget where feasible.
SparsityDistribution exclude_layers(const Network& net, const SparsityDistribution& dist,
                                    const std::vector<std::size_t>& ordinals);

SparseMask topk_masks(const Network& net, const SparsityDistribution& dist);
SparseMask nm_masks(const Network& net, const NMPattern& pattern);
SparseMask dense_masks(const Network& net);

std::size_t mask_ones(const Tensor& mask);
double global_sparsity(const Network& net, const SparseMask& masks);
/// Fraction of entries that differ between two congruent masks.
double mask_churn(const SparseMask& before, const SparseMask& after);

// Mask export: "<base>.index" holds one text line per layer (name, shape, numel,
// nnz, byte offset) and "<base>.bits" the LSB-first bit-packed masks.
void save_masks(const Network& net, const SparseMask& masks, const std::string& base_path);
SparseMask load_masks(const std::string& base_path);

// Distribution file: "target <P>", "layers <L>", then "<name> <numel> <rate>" lines.
void save_distribution(const Network& net, const SparsityDistribution& dist, const std::string& path);
SparsityDistribution load_distribution(const std::string& path);

/// Aligned per-layer table (name, numel, requested rate, kept, realized rate).
std::string distribution_summary(const Network& net, const SparsityDistribution& dist,
                                  const SparseMask* masks = nullptr);

} // namespace pts
