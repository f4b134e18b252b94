// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pts/tensor.hpp"

namespace pts {

enum class LayerKind { Dense, Conv2d, BatchNorm, ReLU, Flatten, AvgPool };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    std::size_t in = 0;   // Dense in-features, Conv2d in-channels, BatchNorm features
    std::size_t out = 0;  // Dense out-features, Conv2d out-channels
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    static LayerSpec dense(std::size_t in, std::size_t out);
    static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                            std::size_t padding = 0);
    static LayerSpec batch_norm(std::size_t features);
    static LayerSpec relu();
    static LayerSpec flatten();
    static LayerSpec avg_pool(std::size_t kernel);

    bool prunable() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
    bool operator==(const LayerSpec&) const = default;
};

/// One layer with its parameters. Shapes exclude the batch axis.
///   Dense:     weight [out, in],            bias [out]
///   Conv2d:    weight [out, in, k, k],      bias [out]
///   BatchNorm: weight = scale [f], bias = shift [f], running_mean/var [f]
struct Layer {
    LayerSpec spec;
    Shape in_shape;
    Shape out_shape;
    Tensor weight;
    Tensor bias;
    Tensor running_mean;
    Tensor running_var;
};

enum class Mode { Train, Eval };

/// Per prunable layer binary masks, ordered like `Network::prunable_layers()`.
struct SparseMask {
    std::vector<Tensor> layers;
    bool operator==(const SparseMask&) const = default;
};

/// Raised when a batch, mask or trace does not fit the network. `layer` is the
/// index of the offending layer, or -1 for the network input.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(int layer, const std::string& what) : std::invalid_argument(what), layer_(layer) {}
    int layer() const { return layer_; }

private:
    int layer_;
};

inline constexpr double kBatchNormEpsilon = 1e-5;

class Network {
public:
    Network() = default;
    /// Builds the layer stack with zero weights, unit BN scale and unit running variance.
    Network(Shape input_shape, std::vector<LayerSpec> specs);

    const Shape& input_shape() const { return input_shape_; }
    const Shape& output_shape() const;
    std::size_t size() const { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return layers_.at(i); }
    Layer& layer(std::size_t i) { return layers_.at(i); }
    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }

    Mode mode() const { return mode_; }
    void set_mode(Mode mode) { mode_ = mode; }

    /// Indices of Dense/Conv2d layers, in network order.
    const std::vector<std::size_t>& prunable_layers() const { return prunable_; }
    std::size_t prunable_numel() const;
    std::string layer_name(std::size_t i) const;

    std::vector<LayerSpec> specs() const;
    std::size_t parameter_count() const;

    /// Fingerprint over specs, parameters and BN statistics.
    std::uint64_t hash() const;

    bool operator==(const Network& other) const;

private:
    Shape input_shape_;
    std::vector<Layer> layers_;
    std::vector<std::size_t> prunable_;
    Mode mode_ = Mode::Eval;
};

struct LayerCache {
    Tensor input;
    Tensor columns;  // Conv2d im2col lowering
    Tensor normalized;  // BatchNorm x_hat
    Tensor batch_mean;
    Tensor batch_var;
    Tensor effective_weight;  // W ⊙ M for prunable layers
    std::size_t reduce_count = 0;  // elements per BN channel in this batch
};

/// Everything backward needs for layers [begin, end).
struct ForwardTrace {
    std::size_t begin = 0;
    std::size_t end = 0;
    Mode mode = Mode::Eval;
    std::uint64_t structure = 0;
    bool masked = false;
    std::vector<LayerCache> caches;
    Tensor output;  // logits when the range ends at the last layer
};

struct ParamGrads {
    Tensor weight;
    Tensor bias;
};

struct Gradients {
    std::vector<ParamGrads> layers;  // indexed by absolute layer index; empty tensors outside the range
    Tensor input;
};

struct LayerRange {
    std::size_t begin = 0;
    std::size_t end = static_cast<std::size_t>(-1);
};

/// Runs layers [range.begin, range.end) on `batch`, which must be shaped like the
/// input of layer `range.begin` with a leading batch axis. Prunable layers compute
/// with W ⊙ M when masks are given.
ForwardTrace forward(const Network& net, const Tensor& batch, const SparseMask* masks = nullptr,
                     LayerRange range = {});

/// Gradients of a scalar loss given d loss / d trace.output. With `ste` the mask is
/// treated as identity for weight gradients; without it masked entries get zero.
Gradients backward(const Network& net, const ForwardTrace& trace, const Tensor& grad_output,
                   const SparseMask* masks = nullptr, bool ste = true);

/// Folds the batch statistics recorded in a train-mode trace into the running
/// statistics: running = (1 - momentum) * running + momentum * batch.
void update_running_stats(Network& net, const ForwardTrace& trace, double momentum);

/// Resets every BN layer's statistics and replaces them with the exact pooled
/// mean and (population) variance of its inputs over all batches, computed in
/// train mode. Throws if `batches` is empty.
void bn_recalibrate(Network& net, const std::vector<Tensor>& batches, const SparseMask* masks = nullptr);

/// Row-wise softmax of a [batch, classes] tensor.
Tensor predict_distribution(const Tensor& logits);

/// Eval-mode logits for `inputs`, computed in chunks of `batch_size`.
Tensor predict_logits(const Network& net, const Tensor& inputs, const SparseMask* masks = nullptr,
                      std::size_t batch_size = 256);

/// Fraction of rows whose argmax matches the label.
double accuracy(const Tensor& logits, const std::vector<std::uint32_t>& labels);

/// Copy of `net` with every prunable weight multiplied by its mask.
Network with_mask_applied(const Network& net, const SparseMask& masks);

/// Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases.
void init_parameters(Network& net, std::uint64_t seed);

/// "mlp3" or "convnet-small"; see README for the exact stacks.
Network build_preset(const std::string& name, const Shape& input_shape, std::size_t classes, std::uint64_t seed);

void check_mask_congruent(const Network& net, const SparseMask& masks);

} // namespace pts
