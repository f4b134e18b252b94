// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "pts/data.hpp"
#include "pts/network.hpp"
#include "pts/sparsity.hpp"

namespace pts {

/// One real gene per prunable layer; softmax(genes) splits the regrow budget.
struct CandidateGenome {
    std::vector<double> genes;
    bool operator==(const CandidateGenome&) const = default;
};

struct SearchConfig {
    double target = 0.9;     // global sparsity P
    double excessive = 0.95; // over-pruning level P_e applied to every layer before regrowth
    std::size_t population = 32;
    std::size_t generations = 20;
    std::size_t tournament = 4;
    std::size_t elites = 2;
    double crossover_rate = 0.5;
    double mutation_std = 0.5;
    double noise_std = 0.1;  // fraction of the per-channel input std
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    /// min(P + 0.05, 1)
    static double default_excessive(double target);
    void validate() const;
};

struct FitnessRecord {
    CandidateGenome genome;
    SparsityDistribution distribution;
    double fitness = 0.0;
    std::uint64_t seed = 0;
};

struct GenerationStats {
    std::size_t generation = 0;
    double best = 0.0;
    double mean = 0.0;
    double worst = 0.0;
    SparsityDistribution elite;
};

struct SearchResult {
    FitnessRecord best;
    std::vector<GenerationStats> history;
};

/// The regrow step before any clamping: residual = (P_e − P)·Σ numel and
/// regrow[l] = softmax(genes)[l] · residual.
struct RegrowPlan {
    double residual = 0.0;
    std::vector<double> regrow;
};

RegrowPlan regrow_allocation(const CandidateGenome& genome, const Network& net, const SearchConfig& cfg);

/// r_l = P_e − T_l / numel_l. Layers driven below zero are pinned at 0 and their
/// surplus goes back to the other layers in proportion to their softmax weight,
/// repeated until every rate is non-negative.
SparsityDistribution decode(const CandidateGenome& genome, const Network& net, const SearchConfig& cfg);

/// Observation points on the fitness data path.
struct FitnessProbe {
    std::function<void(const Tensor&)> recalibration_batch;
    std::function<void(const Tensor&)> evaluation_inputs;
};

/// Prunes a copy of `teacher` at the decoded rates, recalibrates BN on
/// noise-perturbed calibration batches and scores accuracy on the clean set.
FitnessRecord fitness(const CandidateGenome& genome, const Network& teacher, const CalibrationSet& calib,
                      const SearchConfig& cfg, std::uint64_t seed, const FitnessProbe* probe = nullptr);

/// Generational search with tournament selection, uniform crossover, Gaussian
/// mutation and elitism. `history` has one entry per generation, the first being
/// the initial population. Elites keep their recorded fitness.
SearchResult evolve(const Network& teacher, const CalibrationSet& calib, const SearchConfig& cfg,
                    const std::vector<CandidateGenome>* initial = nullptr);

/// One "gen=... best=... mean=... worst=... rates=..." line per generation.
void write_search_log(const SearchResult& result, std::ostream& out);

} // namespace pts
