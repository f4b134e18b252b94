// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pts/tensor.hpp"

namespace pts {

/// Loss value and its gradient. For the distribution losses the gradient is with
/// respect to the student logits (the softmax is folded in); for layerwise_mse it
/// is with respect to the student layer output.
struct LossResult {
    double loss = 0.0;
    Tensor grad;
};

enum class DecayUnit { Epoch, Iteration };

/// Change-of-base factor for a log with base e·gamma^t:
///   log_{e·γ^t}(x) = ln(x) / (1 + t·ln γ)
/// The denominator is floored at `min_denominator` once the base approaches 1.
struct DecaySchedule {
    double gamma = 0.99;
    DecayUnit unit = DecayUnit::Epoch;
    double min_denominator = 0.05;

    double scale(double t) const;
    void validate() const;
};

/// Mean over rows of Σ_j Z_j ln(Z_j / Ẑ_j), with 0·ln 0 = 0 and Ẑ floored at
/// 1e-12. Rows of both inputs must sum to 1 within 1e-4. Gradient: (Ẑ − Z)/rows.
LossResult kl_loss(const Tensor& teacher_probs, const Tensor& student_probs);

/// scale(t) · kl_loss, gradient scaled the same way.
LossResult base_decayed_kl(const Tensor& teacher_probs, const Tensor& student_probs, double t,
                           const DecaySchedule& schedule);

enum class Reduction { Sum, Mean };

/// ‖Y − Ŷ‖² (Sum) or its per-element mean; gradient w.r.t. Ŷ.
LossResult layerwise_mse(const Tensor& dense_out, const Tensor& sparse_out, Reduction reduction = Reduction::Sum);

/// Mean −ln Ẑ[label]; gradient (Ẑ − onehot)/rows w.r.t. the logits.
LossResult cross_entropy(const Tensor& student_probs, const std::vector<std::uint32_t>& labels);

enum class Objective { BaseDecayedKL, KL, CrossEntropy, LayerwiseMSE };

Objective parse_objective(const std::string& name);
std::string to_string(Objective objective);

} // namespace pts
