// SPDX-License-Identifier: Apache-2.0
//
// Generators and oracles shared by the unit and acceptance tests.
#pragma once

#include <cmath>
#include <random>

#include "pts/network.hpp"
#include "pts/sparsity.hpp"

namespace pts::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = n(rng);
    return t;
}

inline Tensor random_mask(std::mt19937_64& rng, const Shape& shape, double keep = 0.5) {
    std::bernoulli_distribution b(keep);
    Tensor t(shape);
    for (auto& v : t.values()) v = b(rng) ? 1.0 : 0.0;
    return t;
}

inline SparseMask random_masks(std::mt19937_64& rng, const Network& net, double keep = 0.5) {
    SparseMask m;
    for (auto i : net.prunable_layers()) m.layers.push_back(random_mask(rng, net.layer(i).weight.shape(), keep));
    return m;
}

/// Random parameters everywhere, including BN scale/shift and running statistics.
inline void randomize(Network& net, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 0.5);
    std::uniform_real_distribution<double> pos(0.5, 1.5);
    for (auto& l : net.layers()) {
        for (auto& v : l.weight.values()) v = n(rng);
        for (auto& v : l.bias.values()) v = n(rng);
        if (l.spec.kind == LayerKind::BatchNorm) {
            for (auto& v : l.weight.values()) v = pos(rng);
            for (auto& v : l.running_mean.values()) v = n(rng);
            for (auto& v : l.running_var.values()) v = pos(rng);
        }
    }
}

/// Small MLP with BN, ≤ 1k parameters.
inline Network small_mlp(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> d(2, 9);
    const std::size_t in = d(rng), hidden = d(rng), out = d(rng);
    Network net({in}, {LayerSpec::dense(in, hidden), LayerSpec::batch_norm(hidden), LayerSpec::relu(),
                       LayerSpec::dense(hidden, out)});
    randomize(net, rng);
    return net;
}

/// Small conv net exercising padding, stride, pooling and flatten, ≤ 1k parameters.
inline Network small_convnet(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> ch(1, 3), cls(2, 4);
    const std::size_t c = ch(rng), mid = ch(rng) + 1;
    Network net({c, 6, 6}, {LayerSpec::conv2d(c, mid, 3, 1, 1), LayerSpec::batch_norm(mid), LayerSpec::relu(),
                            LayerSpec::avg_pool(2), LayerSpec::conv2d(mid, 2, 2, 1, 0), LayerSpec::flatten(),
                            LayerSpec::dense(2 * 2 * 2, cls(rng))});
    randomize(net, rng);
    return net;
}

inline Shape batch_shape(std::size_t n, const Shape& sample) {
    Shape s{n};
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor)
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

} // namespace pts::testing
