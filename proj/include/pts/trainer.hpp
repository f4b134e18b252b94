// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "pts/data.hpp"
#include "pts/network.hpp"
#include "pts/objective.hpp"
#include "pts/sparsity.hpp"

namespace pts {

struct TrainConfig {
    std::size_t iterations = 16000;
    std::size_t batch_size = 64;
    double lr = 0.01;                 // initial rate of the cosine schedule
    double alpha = 3e-5;              // extra decay of currently pruned weights
    double weight_decay = 1e-4;       // L2 on every unpruned parameter
    double momentum = 0.0;
    std::size_t delta_t = 1;          // mask refresh interval in iterations
    DecaySchedule decay;
    Objective objective = Objective::BaseDecayedKL;
    double bn_momentum = 0.1;
    std::size_t log_every = 100;      // metrics row interval; 0 disables
    std::uint64_t seed = 0;

    void validate() const;
};

/// Fixed per-layer sparsity targets. N:M runs replace TopK with the N:M rule.
struct MaskPolicy {
    SparsityDistribution distribution;
    std::optional<NMPattern> nm;

    SparseMask masks_for(const Network& net) const;
};

struct TrainState {
    Network student;
    SparseMask masks;
    std::size_t iteration = 0;
    double lr = 0.0;
    std::vector<Tensor> velocity;  // momentum buffers, [2 * layer + {0: weight, 1: bias}]
};

struct StepMetrics {
    double loss = 0.0;
    double lr = 0.0;
    double churn = 0.0;
    bool refreshed = false;
};

struct TrainLogRow {
    std::size_t iteration = 0;
    double loss = 0.0;
    double lr = 0.0;
    double churn = 0.0;
    double calib_accuracy = 0.0;
    double realized_sparsity = 0.0;
};

struct TrainResult {
    Network student;
    SparseMask masks;
    std::vector<TrainLogRow> history;
    std::vector<double> churn;  // one entry per mask refresh
};

/// β₀ · ½ · (1 + cos(π · iter / total))
double cosine_lr(std::size_t iter, std::size_t total, double base_lr);

/// Step index handed to the decay schedule: epochs (⌊iter·batch/|calib|⌋) or iterations.
double schedule_step(std::size_t iteration, const TrainConfig& cfg, std::size_t calib_size);

/// Applies one parameter update for a prunable weight tensor:
///   kept entries:   w ← w − lr·(g + wd·w)
///   pruned entries: w ← w − lr·g − α·w
void masked_sgd_update(Tensor& weight, const Tensor& grad, const Tensor& mask, double lr, double alpha,
                       double weight_decay);

TrainState init_state(const Network& teacher, const MaskPolicy& policy);

/// One distillation step: frozen teacher (eval) → Z, masked student (train
/// mode) → Ẑ, objective gradient, straight-through backward, decayed update,
/// then a mask refresh whenever (iteration + 1) % delta_t == 0.
StepMetrics train_step(TrainState& state, const Network& teacher, const Batch& batch, const TrainConfig& cfg,
                       const MaskPolicy& policy, std::size_t calib_size);

/// Starts the student from the teacher and runs cfg.iterations steps over the
/// calibration batches. The returned student has W ⊙ M applied destructively.
/// A layerwise_mse objective dispatches to run_layerwise_baseline.
TrainResult run_training(const Network& teacher, const MaskPolicy& policy, const CalibrationSet& calib,
                         const TrainConfig& cfg);

/// Sequential per-layer reconstruction with fixed one-shot masks: each prunable
/// layer in turn gets iterations / L steps minimising the mean squared error
/// between its output and the dense teacher's output at the same layer.
TrainResult run_layerwise_baseline(const Network& teacher, const MaskPolicy& policy, const CalibrationSet& calib,
                                   const TrainConfig& cfg);

/// "iter,loss,lr,churn,calib_acc" header plus one row per logged step.
void write_train_metrics(const std::vector<TrainLogRow>& rows, std::ostream& out);

} // namespace pts
