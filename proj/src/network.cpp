// SPDX-License-Identifier: Apache-2.0
#include "pts/network.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <random>

namespace pts {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

std::string layer_tag(std::size_t i) { return "layer " + std::to_string(i); }

std::uint64_t structure_hash(const Network& net) {
    std::uint64_t h = fnv1a64(net.input_shape().data(), net.input_shape().size() * sizeof(std::size_t));
    for (const auto& layer : net.layers()) {
        const std::size_t fields[] = {static_cast<std::size_t>(layer.spec.kind), layer.spec.in, layer.spec.out,
                                      layer.spec.kernel, layer.spec.stride, layer.spec.padding};
        h = fnv1a64(fields, sizeof(fields), h);
    }
    return h;
}

int prunable_ordinal(const Network& net, std::size_t layer) {
    const auto& p = net.prunable_layers();
    auto it = std::find(p.begin(), p.end(), layer);
    return it == p.end() ? -1 : static_cast<int>(it - p.begin());
}

Shape with_batch(std::size_t n, const Shape& sample) {
    Shape s{n};
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
}

std::size_t conv_out_extent(std::size_t in, const LayerSpec& s) {
    const std::size_t padded = in + 2 * s.padding;
    if (padded < s.kernel) return 0;
    return (padded - s.kernel) / s.stride + 1;
}

Tensor effective_weight(const Network& net, std::size_t i, const SparseMask* masks) {
    const Layer& layer = net.layer(i);
    if (!masks) return layer.weight;
    const Tensor& m = masks->layers[static_cast<std::size_t>(prunable_ordinal(net, i))];
    Tensor w = layer.weight;
    for (std::size_t k = 0; k < w.numel(); ++k) w[k] *= m[k];
    return w;
}

void im2col(const Tensor& x, const LayerSpec& s, std::size_t ho, std::size_t wo, Tensor& cols) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), k = s.kernel;
    const std::size_t plane = ho * wo;
    cols = Tensor({c * k * k, n * plane});
    double* out = cols.data();
    const std::size_t width = n * plane;
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                double* row = out + ((ci * k + ki) * k + kj) * width;
                for (std::size_t b = 0; b < n; ++b) {
                    const double* src = x.data() + (b * c + ci) * h * w;
                    double* dst = row + b * plane;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const long ih = static_cast<long>(oh * s.stride + ki) - static_cast<long>(s.padding);
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const long iw = static_cast<long>(ow * s.stride + kj) - static_cast<long>(s.padding);
                            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(h) && iw < static_cast<long>(w);
                            dst[oh * wo + ow] = inside ? src[ih * static_cast<long>(w) + iw] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

void col2im(const MatR& dcols, const LayerSpec& s, const Shape& in_shape, std::size_t ho, std::size_t wo, Tensor& dx) {
    const std::size_t n = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3], k = s.kernel;
    const std::size_t plane = ho * wo;
    dx = Tensor(in_shape);
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const double* row = dcols.data() + ((ci * k + ki) * k + kj) * dcols.cols();
                for (std::size_t b = 0; b < n; ++b) {
                    double* dst = dx.data() + (b * c + ci) * h * w;
                    const double* src = row + b * plane;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const long ih = static_cast<long>(oh * s.stride + ki) - static_cast<long>(s.padding);
                        if (ih < 0 || ih >= static_cast<long>(h)) continue;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const long iw = static_cast<long>(ow * s.stride + kj) - static_cast<long>(s.padding);
                            if (iw < 0 || iw >= static_cast<long>(w)) continue;
                            dst[ih * static_cast<long>(w) + iw] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

// Channel layout of a BN input: [N, F] or [N, C, H, W].
struct ChannelView {
    std::size_t batch, channels, inner;
};

ChannelView channel_view(const Tensor& x) {
    const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    return {x.dim(0), x.dim(1), inner};
}

Tensor forward_layer(const Network& net, std::size_t i, const Tensor& x, const SparseMask* masks, Mode mode,
                     LayerCache& cache) {
    const Layer& layer = net.layer(i);
    const LayerSpec& s = layer.spec;
    const std::size_t n = x.dim(0);
    switch (s.kind) {
    case LayerKind::Dense: {
        cache.input = x;
        cache.effective_weight = effective_weight(net, i, masks);
        Tensor y({n, s.out});
        CMapR xm(x.data(), n, s.in);
        CMapR wm(cache.effective_weight.data(), s.out, s.in);
        MapR ym(y.data(), n, s.out);
        ym.noalias() = xm * wm.transpose();
        ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(layer.bias.data(), s.out);
        return y;
    }
    case LayerKind::Conv2d: {
        const std::size_t ho = layer.out_shape[1], wo = layer.out_shape[2];
        const std::size_t plane = ho * wo;
        cache.effective_weight = effective_weight(net, i, masks);
        im2col(x, s, ho, wo, cache.columns);
        const std::size_t ckk = s.in * s.kernel * s.kernel;
        CMapR wm(cache.effective_weight.data(), s.out, ckk);
        CMapR cols(cache.columns.data(), ckk, n * plane);
        MatR prod = wm * cols;
        Tensor y({n, s.out, ho, wo});
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t co = 0; co < s.out; ++co) {
                const double* src = prod.data() + co * n * plane + b * plane;
                double* dst = y.data() + (b * s.out + co) * plane;
                const double bias = layer.bias[co];
                for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias;
            }
        }
        cache.input = Tensor(x.shape());  // only the shape is needed for col2im
        return y;
    }
    case LayerKind::BatchNorm: {
        const auto [nb, ch, inner] = channel_view(x);
        const std::size_t count = nb * inner;
        Tensor mean({ch}), var({ch});
        if (mode == Mode::Train) {
            for (std::size_t c = 0; c < ch; ++c) {
                double sum = 0.0;
                for (std::size_t b = 0; b < nb; ++b) {
                    const double* p = x.data() + (b * ch + c) * inner;
                    for (std::size_t k = 0; k < inner; ++k) sum += p[k];
                }
                const double mu = sum / static_cast<double>(count);
                double sq = 0.0;
                for (std::size_t b = 0; b < nb; ++b) {
                    const double* p = x.data() + (b * ch + c) * inner;
                    for (std::size_t k = 0; k < inner; ++k) sq += (p[k] - mu) * (p[k] - mu);
                }
                mean[c] = mu;
                var[c] = sq / static_cast<double>(count);
            }
        } else {
            mean = layer.running_mean;
            var = layer.running_var;
        }
        Tensor xhat(x.shape()), y(x.shape());
        for (std::size_t c = 0; c < ch; ++c) {
            const double inv = 1.0 / std::sqrt(var[c] + kBatchNormEpsilon);
            const double g = layer.weight[c], beta = layer.bias[c];
            for (std::size_t b = 0; b < nb; ++b) {
                const std::size_t off = (b * ch + c) * inner;
                for (std::size_t k = 0; k < inner; ++k) {
                    const double h = (x[off + k] - mean[c]) * inv;
                    xhat[off + k] = h;
                    y[off + k] = g * h + beta;
                }
            }
        }
        cache.normalized = std::move(xhat);
        cache.batch_mean = std::move(mean);
        cache.batch_var = std::move(var);
        cache.reduce_count = count;
        return y;
    }
    case LayerKind::ReLU: {
        cache.input = x;
        Tensor y = x;
        for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
        return y;
    }
    case LayerKind::Flatten:
        cache.input = Tensor(x.shape());
        return x.reshaped({n, x.numel() / n});
    case LayerKind::AvgPool: {
        const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3), k = s.kernel;
        const std::size_t ho = h / k, wo = w / k;
        Tensor y({n, c, ho, wo});
        const double scale = 1.0 / static_cast<double>(k * k);
        for (std::size_t bc = 0; bc < n * c; ++bc) {
            const double* src = x.data() + bc * h * w;
            double* dst = y.data() + bc * ho * wo;
            for (std::size_t oh = 0; oh < ho; ++oh)
                for (std::size_t ow = 0; ow < wo; ++ow) {
                    double acc = 0.0;
                    for (std::size_t a = 0; a < k; ++a)
                        for (std::size_t b = 0; b < k; ++b) acc += src[(oh * k + a) * w + ow * k + b];
                    dst[oh * wo + ow] = acc * scale;
                }
        }
        cache.input = Tensor(x.shape());
        return y;
    }
    }
    throw std::logic_error("forward: unknown layer kind");
}

Tensor backward_layer(const Network& net, std::size_t i, const LayerCache& cache, const Tensor& dy, Mode mode,
                      const SparseMask* masks, bool ste, ParamGrads& grads) {
    const Layer& layer = net.layer(i);
    const LayerSpec& s = layer.spec;
    const std::size_t n = dy.dim(0);
    auto hard_mask = [&](Tensor& dw) {
        if (ste || !masks) return;
        const Tensor& m = masks->layers[static_cast<std::size_t>(prunable_ordinal(net, i))];
        for (std::size_t k = 0; k < dw.numel(); ++k) dw[k] *= m[k];
    };
    switch (s.kind) {
    case LayerKind::Dense: {
        CMapR dym(dy.data(), n, s.out);
        CMapR xm(cache.input.data(), n, s.in);
        CMapR wm(cache.effective_weight.data(), s.out, s.in);
        grads.weight = Tensor(layer.weight.shape());
        MapR(grads.weight.data(), s.out, s.in).noalias() = dym.transpose() * xm;
        grads.bias = Tensor({s.out});
        Eigen::Map<Eigen::RowVectorXd>(grads.bias.data(), s.out) = dym.colwise().sum();
        hard_mask(grads.weight);
        Tensor dx({n, s.in});
        MapR(dx.data(), n, s.in).noalias() = dym * wm;
        return dx;
    }
    case LayerKind::Conv2d: {
        const std::size_t ho = layer.out_shape[1], wo = layer.out_shape[2], plane = ho * wo;
        const std::size_t ckk = s.in * s.kernel * s.kernel;
        MatR dout(s.out, n * plane);
        grads.bias = Tensor({s.out});
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t co = 0; co < s.out; ++co) {
                const double* src = dy.data() + (b * s.out + co) * plane;
                double* dst = dout.data() + co * n * plane + b * plane;
                for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p];
            }
        for (std::size_t co = 0; co < s.out; ++co) grads.bias[co] = dout.row(static_cast<Eigen::Index>(co)).sum();
        CMapR cols(cache.columns.data(), ckk, n * plane);
        CMapR wm(cache.effective_weight.data(), s.out, ckk);
        grads.weight = Tensor(layer.weight.shape());
        MapR(grads.weight.data(), s.out, ckk).noalias() = dout * cols.transpose();
        hard_mask(grads.weight);
        MatR dcols = wm.transpose() * dout;
        Tensor dx;
        col2im(dcols, s, cache.input.shape(), ho, wo, dx);
        return dx;
    }
    case LayerKind::BatchNorm: {
        const auto [nb, ch, inner] = channel_view(dy);
        const Tensor& xhat = cache.normalized;
        grads.weight = Tensor({ch});
        grads.bias = Tensor({ch});
        Tensor dx(dy.shape());
        const double m = static_cast<double>(cache.reduce_count);
        for (std::size_t c = 0; c < ch; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t b = 0; b < nb; ++b) {
                const std::size_t off = (b * ch + c) * inner;
                for (std::size_t k = 0; k < inner; ++k) {
                    sum_dy += dy[off + k];
                    sum_dy_xhat += dy[off + k] * xhat[off + k];
                }
            }
            grads.weight[c] = sum_dy_xhat;
            grads.bias[c] = sum_dy;
            const double g = layer.weight[c];
            const double inv = 1.0 / std::sqrt(cache.batch_var[c] + kBatchNormEpsilon);
            for (std::size_t b = 0; b < nb; ++b) {
                const std::size_t off = (b * ch + c) * inner;
                for (std::size_t k = 0; k < inner; ++k) {
                    if (mode == Mode::Train) {
                        dx[off + k] = g * inv * (dy[off + k] - sum_dy / m - xhat[off + k] * sum_dy_xhat / m);
                    } else {
                        dx[off + k] = g * inv * dy[off + k];
                    }
                }
            }
        }
        return dx;
    }
    case LayerKind::ReLU: {
        Tensor dx = dy;
        for (std::size_t k = 0; k < dx.numel(); ++k)
            if (!(cache.input[k] > 0.0)) dx[k] = 0.0;
        return dx;
    }
    case LayerKind::Flatten:
        return dy.reshaped(cache.input.shape());
    case LayerKind::AvgPool: {
        const Shape& in = cache.input.shape();
        const std::size_t c = in[1], h = in[2], w = in[3], k = s.kernel;
        const std::size_t ho = h / k, wo = w / k;
        const double scale = 1.0 / static_cast<double>(k * k);
        Tensor dx(in);
        for (std::size_t bc = 0; bc < n * c; ++bc) {
            const double* src = dy.data() + bc * ho * wo;
            double* dst = dx.data() + bc * h * w;
            for (std::size_t ih = 0; ih < h; ++ih)
                for (std::size_t iw = 0; iw < w; ++iw) dst[ih * w + iw] = src[(ih / k) * wo + iw / k] * scale;
        }
        return dx;
    }
    }
    throw std::logic_error("backward: unknown layer kind");
}

ForwardTrace forward_impl(const Network& net, const Tensor& batch, const SparseMask* masks, LayerRange range,
                          Mode mode) {
    const std::size_t end = std::min(range.end, net.size());
    if (range.begin > end) throw std::invalid_argument("forward: empty or inverted layer range");
    if (masks) check_mask_congruent(net, *masks);
    const Shape& expected = range.begin < net.size() ? net.layer(range.begin).in_shape : net.output_shape();
    if (batch.rank() != expected.size() + 1 || batch.dim(0) == 0 ||
        !std::equal(expected.begin(), expected.end(), batch.shape().begin() + 1)) {
        throw ShapeError(range.begin == 0 ? -1 : static_cast<int>(range.begin),
                         "forward: batch " + shape_string(batch.shape()) + " does not match input " +
                             shape_string(expected) + " of " + layer_tag(range.begin));
    }
    ForwardTrace trace;
    trace.begin = range.begin;
    trace.end = end;
    trace.mode = mode;
    trace.structure = structure_hash(net);
    trace.masked = masks != nullptr;
    trace.caches.resize(end - range.begin);
    Tensor x = batch;
    for (std::size_t i = range.begin; i < end; ++i) {
        x = forward_layer(net, i, x, masks, mode, trace.caches[i - range.begin]);
    }
    trace.output = std::move(x);
    return trace;
}

} // namespace

std::string to_string(LayerKind kind) {
    switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::AvgPool: return "avgpool";
    }
    return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
    for (auto k : {LayerKind::Dense, LayerKind::Conv2d, LayerKind::BatchNorm, LayerKind::ReLU, LayerKind::Flatten,
                   LayerKind::AvgPool}) {
        if (to_string(k) == name) return k;
    }
    throw std::invalid_argument("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out, 0, 1, 0}; }
LayerSpec LayerSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
    return {LayerKind::Conv2d, in, out, kernel, stride, padding};
}
LayerSpec LayerSpec::batch_norm(std::size_t features) { return {LayerKind::BatchNorm, features, features, 0, 1, 0}; }
LayerSpec LayerSpec::relu() { return {LayerKind::ReLU, 0, 0, 0, 1, 0}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::Flatten, 0, 0, 0, 1, 0}; }
LayerSpec LayerSpec::avg_pool(std::size_t kernel) { return {LayerKind::AvgPool, 0, 0, kernel, kernel, 0}; }

Network::Network(Shape input_shape, std::vector<LayerSpec> specs) : input_shape_(std::move(input_shape)) {
    if (input_shape_.empty() || shape_numel(input_shape_) == 0) throw ShapeError(-1, "network: empty input shape");
    Shape cur = input_shape_;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const LayerSpec& s = specs[i];
        Layer layer;
        layer.spec = s;
        layer.in_shape = cur;
        auto fail = [&](const std::string& why) {
            throw ShapeError(static_cast<int>(i), "network: " + layer_tag(i) + " (" + to_string(s.kind) + ") " + why +
                                                      ", input " + shape_string(cur));
        };
        switch (s.kind) {
        case LayerKind::Dense:
            if (cur.size() != 1 || cur[0] != s.in || s.out == 0) fail("expects [" + std::to_string(s.in) + "]");
            layer.weight = Tensor({s.out, s.in});
            layer.bias = Tensor({s.out});
            cur = {s.out};
            break;
        case LayerKind::Conv2d: {
            if (cur.size() != 3 || cur[0] != s.in || s.out == 0 || s.kernel == 0 || s.stride == 0)
                fail("expects [" + std::to_string(s.in) + ",H,W]");
            const std::size_t ho = conv_out_extent(cur[1], s), wo = conv_out_extent(cur[2], s);
            if (ho == 0 || wo == 0) fail("kernel larger than padded input");
            layer.weight = Tensor({s.out, s.in, s.kernel, s.kernel});
            layer.bias = Tensor({s.out});
            cur = {s.out, ho, wo};
            break;
        }
        case LayerKind::BatchNorm:
            if ((cur.size() != 1 && cur.size() != 3) || cur[0] != s.in) fail("feature count mismatch");
            layer.weight = Tensor({s.in}, 1.0);
            layer.bias = Tensor({s.in});
            layer.running_mean = Tensor({s.in});
            layer.running_var = Tensor({s.in}, 1.0);
            break;
        case LayerKind::ReLU:
            break;
        case LayerKind::Flatten:
            cur = {shape_numel(cur)};
            break;
        case LayerKind::AvgPool:
            if (cur.size() != 3 || s.kernel == 0 || cur[1] % s.kernel || cur[2] % s.kernel)
                fail("spatial size not divisible by pool kernel");
            cur = {cur[0], cur[1] / s.kernel, cur[2] / s.kernel};
            break;
        }
        layer.out_shape = cur;
        if (s.prunable()) prunable_.push_back(i);
        layers_.push_back(std::move(layer));
    }
}

const Shape& Network::output_shape() const { return layers_.empty() ? input_shape_ : layers_.back().out_shape; }

std::size_t Network::prunable_numel() const {
    std::size_t total = 0;
    for (auto i : prunable_) total += layers_[i].weight.numel();
    return total;
}

std::string Network::layer_name(std::size_t i) const { return std::to_string(i) + "." + to_string(layers_.at(i).spec.kind); }

std::vector<LayerSpec> Network::specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l.spec);
    return out;
}

std::size_t Network::parameter_count() const {
    std::size_t total = 0;
    for (const auto& l : layers_) total += l.weight.numel() + l.bias.numel();
    return total;
}

std::uint64_t Network::hash() const {
    std::uint64_t h = structure_hash(*this);
    auto mix = [&h](const Tensor& t) {
        if (!t.empty()) h = fnv1a64(t.data(), t.numel() * sizeof(double), h);
    };
    for (const auto& l : layers_) {
        mix(l.weight);
        mix(l.bias);
        mix(l.running_mean);
        mix(l.running_var);
    }
    return h;
}

bool Network::operator==(const Network& other) const {
    if (input_shape_ != other.input_shape_ || mode_ != other.mode_ || layers_.size() != other.layers_.size())
        return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const Layer& a = layers_[i];
        const Layer& b = other.layers_[i];
        if (!(a.spec == b.spec) || a.weight != b.weight || a.bias != b.bias || a.running_mean != b.running_mean ||
            a.running_var != b.running_var)
            return false;
    }
    return true;
}

void check_mask_congruent(const Network& net, const SparseMask& masks) {
    const auto& p = net.prunable_layers();
    if (masks.layers.size() != p.size()) {
        throw ShapeError(-1, "mask: expected " + std::to_string(p.size()) + " layer masks, got " +
                                 std::to_string(masks.layers.size()));
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (masks.layers[k].shape() != net.layer(p[k]).weight.shape()) {
            throw ShapeError(static_cast<int>(p[k]), "mask: " + layer_tag(p[k]) + " mask " +
                                                         shape_string(masks.layers[k].shape()) + " vs weight " +
                                                         shape_string(net.layer(p[k]).weight.shape()));
        }
    }
}

ForwardTrace forward(const Network& net, const Tensor& batch, const SparseMask* masks, LayerRange range) {
    return forward_impl(net, batch, masks, range, net.mode());
}

Gradients backward(const Network& net, const ForwardTrace& trace, const Tensor& grad_output, const SparseMask* masks,
                   bool ste) {
    if (trace.structure != structure_hash(net) || trace.end > net.size() ||
        trace.caches.size() != trace.end - trace.begin) {
        throw std::invalid_argument("backward: trace was produced by a different network");
    }
    if (trace.masked != (masks != nullptr)) throw std::invalid_argument("backward: masks differ from the forward pass");
    if (masks) check_mask_congruent(net, *masks);
    if (grad_output.shape() != trace.output.shape()) {
        throw ShapeError(static_cast<int>(trace.end) - 1, "backward: gradient " + shape_string(grad_output.shape()) +
                                                               " vs output " + shape_string(trace.output.shape()));
    }
    Gradients grads;
    grads.layers.resize(net.size());
    Tensor dy = grad_output;
    for (std::size_t i = trace.end; i-- > trace.begin;) {
        dy = backward_layer(net, i, trace.caches[i - trace.begin], dy, trace.mode, masks, ste, grads.layers[i]);
    }
    grads.input = std::move(dy);
    return grads;
}

void update_running_stats(Network& net, const ForwardTrace& trace, double momentum) {
    if (trace.mode != Mode::Train) return;
    for (std::size_t i = trace.begin; i < trace.end; ++i) {
        Layer& layer = net.layer(i);
        if (layer.spec.kind != LayerKind::BatchNorm) continue;
        const LayerCache& c = trace.caches[i - trace.begin];
        for (std::size_t k = 0; k < layer.running_mean.numel(); ++k) {
            layer.running_mean[k] = (1.0 - momentum) * layer.running_mean[k] + momentum * c.batch_mean[k];
            layer.running_var[k] = (1.0 - momentum) * layer.running_var[k] + momentum * c.batch_var[k];
        }
    }
}

void bn_recalibrate(Network& net, const std::vector<Tensor>& batches, const SparseMask* masks) {
    if (batches.empty()) throw std::invalid_argument("bn_recalibrate: empty calibration stream");
    struct Pooled {
        double count = 0.0;
        std::vector<double> mean, m2;
    };
    std::vector<Pooled> pooled(net.size());
    for (std::size_t i = 0; i < net.size(); ++i) {
        if (net.layer(i).spec.kind != LayerKind::BatchNorm) continue;
        pooled[i].mean.assign(net.layer(i).spec.in, 0.0);
        pooled[i].m2.assign(net.layer(i).spec.in, 0.0);
    }
    for (const Tensor& batch : batches) {
        const ForwardTrace trace = forward_impl(net, batch, masks, {}, Mode::Train);
        for (std::size_t i = 0; i < net.size(); ++i) {
            if (net.layer(i).spec.kind != LayerKind::BatchNorm) continue;
            const LayerCache& c = trace.caches[i];
            Pooled& acc = pooled[i];
            const double nb = static_cast<double>(c.reduce_count);
            const double total = acc.count + nb;
            for (std::size_t k = 0; k < acc.mean.size(); ++k) {
                const double delta = c.batch_mean[k] - acc.mean[k];
                acc.mean[k] += delta * nb / total;
                acc.m2[k] += c.batch_var[k] * nb + delta * delta * acc.count * nb / total;
            }
            acc.count = total;
        }
    }
    for (std::size_t i = 0; i < net.size(); ++i) {
        Layer& layer = net.layer(i);
        if (layer.spec.kind != LayerKind::BatchNorm) continue;
        for (std::size_t k = 0; k < pooled[i].mean.size(); ++k) {
            layer.running_mean[k] = pooled[i].mean[k];
            layer.running_var[k] = pooled[i].m2[k] / pooled[i].count;
        }
    }
}

Tensor predict_distribution(const Tensor& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("predict_distribution: expects [batch, classes]");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    Tensor out(logits.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const double* z = logits.data() + r * c;
        double* p = out.data() + r * c;
        const double mx = *std::max_element(z, z + c);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += p[j] = std::exp(z[j] - mx);
        for (std::size_t j = 0; j < c; ++j) p[j] /= sum;
    }
    return out;
}

Tensor predict_logits(const Network& net, const Tensor& inputs, const SparseMask* masks, std::size_t batch_size) {
    const std::size_t n = inputs.dim(0);
    Tensor out(with_batch(n, net.output_shape()));
    const std::size_t row = out.numel() / std::max<std::size_t>(n, 1);
    for (std::size_t b = 0; b < n; b += batch_size) {
        const std::size_t e = std::min(n, b + batch_size);
        const ForwardTrace t = forward_impl(net, slice_rows(inputs, b, e), masks, {}, Mode::Eval);
        std::copy(t.output.data(), t.output.data() + t.output.numel(), out.data() + b * row);
    }
    return out;
}

double accuracy(const Tensor& logits, const std::vector<std::uint32_t>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw std::invalid_argument("accuracy: shape mismatch");
    if (labels.empty()) return 0.0;
    const std::size_t c = logits.dim(1);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        const double* z = logits.data() + r * c;
        hits += static_cast<std::size_t>(std::max_element(z, z + c) - z) == labels[r];
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Network with_mask_applied(const Network& net, const SparseMask& masks) {
    check_mask_congruent(net, masks);
    Network out = net;
    const auto& p = net.prunable_layers();
    for (std::size_t k = 0; k < p.size(); ++k) {
        Tensor& w = out.layer(p[k]).weight;
        for (std::size_t j = 0; j < w.numel(); ++j) w[j] *= masks.layers[k][j];
    }
    return out;
}

void init_parameters(Network& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& layer : net.layers()) {
        if (!layer.spec.prunable()) continue;
        const std::size_t fan_in = layer.weight.numel() / layer.weight.dim(0);
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : layer.weight.values()) v = dist(rng);
        layer.bias.fill(0.0);
    }
}

Network build_preset(const std::string& name, const Shape& input_shape, std::size_t classes, std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("build_preset: need at least two classes");
    std::vector<LayerSpec> specs;
    if (name == "mlp3") {
        const std::size_t in = shape_numel(input_shape);
        if (input_shape.size() != 1) specs.push_back(LayerSpec::flatten());
        specs.insert(specs.end(), {LayerSpec::dense(in, 256), LayerSpec::batch_norm(256), LayerSpec::relu(),
                                   LayerSpec::dense(256, 128), LayerSpec::batch_norm(128), LayerSpec::relu(),
                                   LayerSpec::dense(128, classes)});
    } else if (name == "convnet-small") {
        if (input_shape.size() != 3 || input_shape[1] % 4 || input_shape[2] % 4)
            throw ShapeError(-1, "convnet-small expects [C,H,W] with H and W divisible by 4");
        const std::size_t c = input_shape[0];
        const std::size_t flat = 16 * (input_shape[1] / 4) * (input_shape[2] / 4);
        specs = {LayerSpec::conv2d(c, 8, 3, 1, 1),  LayerSpec::batch_norm(8),  LayerSpec::relu(), LayerSpec::avg_pool(2),
                 LayerSpec::conv2d(8, 16, 3, 1, 1), LayerSpec::batch_norm(16), LayerSpec::relu(), LayerSpec::avg_pool(2),
                 LayerSpec::flatten(),              LayerSpec::dense(flat, classes)};
    } else {
        throw std::invalid_argument("build_preset: unknown preset '" + name + "'");
    }
    Network net(input_shape, std::move(specs));
    init_parameters(net, seed);
    return net;
}

} // namespace pts
