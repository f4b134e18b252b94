// SPDX-License-Identifier: Apache-2.0
#include "pts/trainer.hpp"

#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace pts {

namespace {

void sgd_update(Tensor& param, const Tensor& grad, double lr, double weight_decay) {
    for (std::size_t k = 0; k < param.numel(); ++k) param[k] -= lr * (grad[k] + weight_decay * param[k]);
}

// Replaces `grad` by the momentum buffer v = μ·v + g when momentum is enabled.
const Tensor& with_momentum(std::vector<Tensor>& velocity, std::size_t slot, const Tensor& grad, double momentum) {
    if (momentum == 0.0) return grad;
    if (velocity.size() <= slot) velocity.resize(slot + 1);
    Tensor& v = velocity[slot];
    if (v.shape() != grad.shape()) v = Tensor(grad.shape());
    for (std::size_t k = 0; k < v.numel(); ++k) v[k] = momentum * v[k] + grad[k];
    return v;
}

double calib_accuracy(const Network& student, const SparseMask& masks, const CalibrationSet& calib, std::size_t batch) {
    return accuracy(predict_logits(student, calib.inputs, &masks, std::max<std::size_t>(batch, 256)), calib.labels);
}

bool should_log(std::size_t done, const TrainConfig& cfg) {
    return cfg.log_every && (done % cfg.log_every == 0 || done == cfg.iterations);
}

} // namespace

void TrainConfig::validate() const {
    if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
    if (delta_t < 1) throw std::invalid_argument("train: delta_t must be at least 1");
    if (!(alpha >= 0.0)) throw std::invalid_argument("train: alpha must be non-negative");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("train: negative learning rate or decay");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum outside [0,1)");
    decay.validate();
}

SparseMask MaskPolicy::masks_for(const Network& net) const {
    return nm ? nm_masks(net, *nm) : topk_masks(net, distribution);
}

double cosine_lr(std::size_t iter, std::size_t total, double base_lr) {
    if (total == 0) return base_lr;
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(iter) / static_cast<double>(total)));
}

double schedule_step(std::size_t iteration, const TrainConfig& cfg, std::size_t calib_size) {
    if (cfg.decay.unit == DecayUnit::Iteration || calib_size == 0) return static_cast<double>(iteration);
    return static_cast<double>((iteration * cfg.batch_size) / calib_size);
}

void masked_sgd_update(Tensor& weight, const Tensor& grad, const Tensor& mask, double lr, double alpha,
                       double weight_decay) {
    for (std::size_t k = 0; k < weight.numel(); ++k) {
        const double w = weight[k];
        if (mask[k] != 0.0) weight[k] = w - lr * (grad[k] + weight_decay * w);
        else weight[k] = w - lr * grad[k] - alpha * w;
    }
}

TrainState init_state(const Network& teacher, const MaskPolicy& policy) {
    TrainState state{teacher, {}, 0, 0.0, {}};
    state.masks = policy.masks_for(state.student);
    return state;
}

StepMetrics train_step(TrainState& state, const Network& teacher, const Batch& batch, const TrainConfig& cfg,
                       const MaskPolicy& policy, std::size_t calib_size) {
    if (teacher.specs() != state.student.specs() || teacher.input_shape() != state.student.input_shape())
        throw ShapeError(-1, "train_step: teacher and student architectures differ");
    const Tensor teacher_probs = predict_distribution(predict_logits(teacher, batch.inputs, nullptr, batch.inputs.dim(0)));

    Network& student = state.student;
    student.set_mode(Mode::Train);
    const ForwardTrace trace = forward(student, batch.inputs, &state.masks);
    const Tensor student_probs = predict_distribution(trace.output);

    LossResult loss;
    switch (cfg.objective) {
    case Objective::BaseDecayedKL:
        loss = base_decayed_kl(teacher_probs, student_probs, schedule_step(state.iteration, cfg, calib_size), cfg.decay);
        break;
    case Objective::KL:
        loss = kl_loss(teacher_probs, student_probs);
        break;
    case Objective::CrossEntropy:
        loss = cross_entropy(student_probs, batch.labels);
        break;
    case Objective::LayerwiseMSE:
        throw std::invalid_argument("train_step: layerwise_mse runs through run_layerwise_baseline");
    }

    const Gradients grads = backward(student, trace, loss.grad, &state.masks, /*ste=*/true);
    update_running_stats(student, trace, cfg.bn_momentum);

    state.lr = cosine_lr(state.iteration, cfg.iterations, cfg.lr);
    const auto& prunable = student.prunable_layers();
    std::size_t ordinal = 0;
    for (std::size_t i = 0; i < student.size(); ++i) {
        Layer& layer = student.layer(i);
        if (layer.weight.empty()) continue;
        const ParamGrads& g = grads.layers[i];
        const Tensor& gw = with_momentum(state.velocity, 2 * i, g.weight, cfg.momentum);
        if (ordinal < prunable.size() && prunable[ordinal] == i) {
            masked_sgd_update(layer.weight, gw, state.masks.layers[ordinal], state.lr, cfg.alpha, cfg.weight_decay);
            ++ordinal;
        } else {
            sgd_update(layer.weight, gw, state.lr, cfg.weight_decay);
        }
        sgd_update(layer.bias, with_momentum(state.velocity, 2 * i + 1, g.bias, cfg.momentum), state.lr, cfg.weight_decay);
    }

    StepMetrics metrics{loss.loss, state.lr, 0.0, false};
    ++state.iteration;
    if (state.iteration % cfg.delta_t == 0) {
        SparseMask refreshed = policy.masks_for(student);
        metrics.churn = mask_churn(state.masks, refreshed);
        metrics.refreshed = true;
        state.masks = std::move(refreshed);
    }
    return metrics;
}

TrainResult run_training(const Network& teacher, const MaskPolicy& policy, const CalibrationSet& calib,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (calib.size() == 0) throw std::invalid_argument("run_training: empty calibration set");
    if (cfg.objective == Objective::LayerwiseMSE) return run_layerwise_baseline(teacher, policy, calib, cfg);

    TrainState state = init_state(teacher, policy);
    TrainResult result;
    if (cfg.iterations > 0) {
        BatchCycler cycler(calib, cfg.batch_size, derive_seed(cfg.seed, 0xba7c));
        double last_churn = 0.0;
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            const StepMetrics m = train_step(state, teacher, cycler.next(), cfg, policy, calib.size());
            if (m.refreshed) {
                result.churn.push_back(m.churn);
                last_churn = m.churn;
            }
            if (should_log(it + 1, cfg)) {
                state.student.set_mode(Mode::Eval);
                result.history.push_back({it + 1, m.loss, m.lr, last_churn,
                                          calib_accuracy(state.student, state.masks, calib, cfg.batch_size),
                                          global_sparsity(state.student, state.masks)});
            }
        }
    }
    result.student = with_mask_applied(state.student, state.masks);
    result.student.set_mode(Mode::Eval);
    result.masks = std::move(state.masks);
    return result;
}

TrainResult run_layerwise_baseline(const Network& teacher, const MaskPolicy& policy, const CalibrationSet& calib,
                                   const TrainConfig& cfg) {
    cfg.validate();
    if (calib.size() == 0) throw std::invalid_argument("run_layerwise_baseline: empty calibration set");
    TrainResult result;
    result.masks = policy.masks_for(teacher);
    Network student = with_mask_applied(teacher, result.masks);
    student.set_mode(Mode::Eval);
    Network dense = teacher;
    dense.set_mode(Mode::Eval);

    const auto& prunable = student.prunable_layers();
    const std::size_t layers = prunable.size();
    BatchCycler cycler(calib, cfg.batch_size, derive_seed(cfg.seed, 0xba7c));
    std::size_t done = 0;
    for (std::size_t k = 0; k < layers; ++k) {
        const std::size_t i = prunable[k];
        const std::size_t steps = cfg.iterations / layers + (k < cfg.iterations % layers ? 1 : 0);
        for (std::size_t s = 0; s < steps; ++s) {
            const Batch batch = cycler.next();
            const Tensor target = forward(dense, batch.inputs, nullptr, {0, i + 1}).output;
            const Tensor input = i == 0 ? batch.inputs : forward(student, batch.inputs, &result.masks, {0, i}).output;
            const ForwardTrace trace = forward(student, input, &result.masks, {i, i + 1});
            const LossResult loss = layerwise_mse(target, trace.output, Reduction::Mean);
            const Gradients grads = backward(student, trace, loss.grad, &result.masks, /*ste=*/false);
            const double lr = cosine_lr(s, steps, cfg.lr);
            Layer& layer = student.layer(i);
            masked_sgd_update(layer.weight, grads.layers[i].weight, result.masks.layers[k], lr, 0.0, cfg.weight_decay);
            sgd_update(layer.bias, grads.layers[i].bias, lr, cfg.weight_decay);
            ++done;
            if (should_log(done, cfg)) {
                result.history.push_back({done, loss.loss, lr, 0.0, calib_accuracy(student, result.masks, calib, cfg.batch_size),
                                          global_sparsity(student, result.masks)});
            }
        }
    }
    result.student = with_mask_applied(student, result.masks);
    return result;
}

void write_train_metrics(const std::vector<TrainLogRow>& rows, std::ostream& out) {
    out << "iter,loss,lr,churn,calib_acc\n";
    for (const auto& r : rows) out << r.iteration << ',' << r.loss << ',' << r.lr << ',' << r.churn << ',' << r.calib_accuracy << "\n";
}

} // namespace pts
