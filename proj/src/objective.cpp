// SPDX-License-Identifier: Apache-2.0
#include "pts/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pts {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kRowTolerance = 1e-4;

void check_distribution(const Tensor& p, const char* who) {
    if (p.rank() != 2) throw std::invalid_argument(std::string(who) + ": expects [batch, classes]");
    const std::size_t c = p.dim(1);
    for (std::size_t r = 0; r < p.dim(0); ++r) {
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double v = p[r * c + j];
            if (!(v >= 0.0)) throw std::invalid_argument(std::string(who) + ": negative or NaN probability");
            sum += v;
        }
        if (std::abs(sum - 1.0) > kRowTolerance)
            throw std::invalid_argument(std::string(who) + ": row " + std::to_string(r) + " sums to " + std::to_string(sum));
    }
}

} // namespace

double DecaySchedule::scale(double t) const {
    const double denom = 1.0 + t * std::log(gamma);
    return 1.0 / std::max(denom, min_denominator);
}

void DecaySchedule::validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("decay gamma must lie in (0, 1]");
    if (!(min_denominator > 0.0)) throw std::invalid_argument("decay clamp must be positive");
}

LossResult kl_loss(const Tensor& teacher_probs, const Tensor& student_probs) {
    check_distribution(teacher_probs, "kl_loss");
    check_distribution(student_probs, "kl_loss");
    if (teacher_probs.shape() != student_probs.shape()) throw std::invalid_argument("kl_loss: shape mismatch");
    const std::size_t n = teacher_probs.dim(0);
    const double inv_n = 1.0 / static_cast<double>(n);
    LossResult out{0.0, Tensor(teacher_probs.shape())};
    double total = 0.0;
    for (std::size_t i = 0; i < teacher_probs.numel(); ++i) {
        const double z = teacher_probs[i];
        const double zh = student_probs[i];
        if (z > 0.0) total += z * (std::log(z) - std::log(std::max(zh, kProbFloor)));
        out.grad[i] = (zh - z) * inv_n;
    }
    out.loss = total * inv_n;
    return out;
}

LossResult base_decayed_kl(const Tensor& teacher_probs, const Tensor& student_probs, double t,
                           const DecaySchedule& schedule) {
    if (t < 0.0) throw std::invalid_argument("base_decayed_kl: negative step");
    LossResult out = kl_loss(teacher_probs, student_probs);
    const double s = schedule.scale(t);
    out.loss = s * out.loss;
    for (auto& g : out.grad.values()) g *= s;
    return out;
}

LossResult layerwise_mse(const Tensor& dense_out, const Tensor& sparse_out, Reduction reduction) {
    if (dense_out.shape() != sparse_out.shape()) throw std::invalid_argument("layerwise_mse: shape mismatch");
    const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(std::max<std::size_t>(dense_out.numel(), 1)) : 1.0;
    LossResult out{0.0, Tensor(dense_out.shape())};
    double total = 0.0;
    for (std::size_t i = 0; i < dense_out.numel(); ++i) {
        const double d = sparse_out[i] - dense_out[i];
        total += d * d;
        out.grad[i] = 2.0 * d * norm;
    }
    out.loss = total * norm;
    return out;
}

LossResult cross_entropy(const Tensor& student_probs, const std::vector<std::uint32_t>& labels) {
    check_distribution(student_probs, "cross_entropy");
    const std::size_t n = student_probs.dim(0), c = student_probs.dim(1);
    if (labels.size() != n) throw std::invalid_argument("cross_entropy: label count mismatch");
    const double inv_n = 1.0 / static_cast<double>(n);
    LossResult out{0.0, student_probs};
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] >= c) throw std::invalid_argument("cross_entropy: label out of range");
        total -= std::log(std::max(student_probs[r * c + labels[r]], kProbFloor));
        out.grad[r * c + labels[r]] -= 1.0;
    }
    for (auto& g : out.grad.values()) g *= inv_n;
    out.loss = total * inv_n;
    return out;
}

Objective parse_objective(const std::string& name) {
    if (name == "base_decayed_kl") return Objective::BaseDecayedKL;
    if (name == "kl") return Objective::KL;
    if (name == "ce") return Objective::CrossEntropy;
    if (name == "layerwise_mse") return Objective::LayerwiseMSE;
    throw std::invalid_argument("unknown objective '" + name + "'");
}

std::string to_string(Objective objective) {
    switch (objective) {
    case Objective::BaseDecayedKL: return "base_decayed_kl";
    case Objective::KL: return "kl";
    case Objective::CrossEntropy: return "ce";
    case Objective::LayerwiseMSE: return "layerwise_mse";
    }
    return "?";
}

} // namespace pts
