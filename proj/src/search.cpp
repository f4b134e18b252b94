// SPDX-License-Identifier: Apache-2.0
#include "pts/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <thread>

namespace pts {

namespace {

std::vector<double> softmax(const std::vector<double>& genes) {
    const double mx = *std::max_element(genes.begin(), genes.end());
    std::vector<double> w(genes.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < genes.size(); ++i) sum += w[i] = std::exp(genes[i] - mx);
    for (auto& v : w) v /= sum;
    return w;
}

void check_genome(const CandidateGenome& genome, const Network& net) {
    if (genome.genes.size() != net.prunable_layers().size())
        throw std::invalid_argument("genome length " + std::to_string(genome.genes.size()) + " != prunable layers " +
                                    std::to_string(net.prunable_layers().size()));
    for (double g : genome.genes)
        if (!std::isfinite(g)) throw std::invalid_argument("genome has a non-finite gene");
}

// P_e·N − P·N rather than (P_e − P)·N: each product rounds to the nearest
// representable weight count, so e.g. 0.95·1000 − 0.9·1000 is exactly 50.
double residual_budget(const SearchConfig& cfg, double numel) { return cfg.excessive * numel - cfg.target * numel; }

std::uint64_t individual_seed(std::uint64_t base, std::size_t generation, std::size_t index) {
    return derive_seed(derive_seed(base, generation + 1), index);
}

} // namespace

double SearchConfig::default_excessive(double target) { return std::min(target + 0.05, 1.0); }

void SearchConfig::validate() const {
    if (!(target >= 0.0 && target <= 1.0)) throw std::invalid_argument("search: target sparsity outside [0,1]");
    if (!(excessive >= target && excessive <= 1.0)) throw std::invalid_argument("search: need P <= P_e <= 1");
    if (population < 2) throw std::invalid_argument("search: population must be at least 2");
    if (generations < 1) throw std::invalid_argument("search: need at least one generation");
    if (elites < 1 || elites >= population) throw std::invalid_argument("search: elites must lie in [1, population)");
    if (tournament < 1) throw std::invalid_argument("search: tournament size must be positive");
    if (!(crossover_rate >= 0.0 && crossover_rate <= 1.0)) throw std::invalid_argument("search: crossover rate outside [0,1]");
    if (!(mutation_std >= 0.0) || !(noise_std >= 0.0)) throw std::invalid_argument("search: negative std");
    if (batch_size == 0) throw std::invalid_argument("search: batch size must be positive");
}

RegrowPlan regrow_allocation(const CandidateGenome& genome, const Network& net, const SearchConfig& cfg) {
    check_genome(genome, net);
    RegrowPlan plan;
    plan.residual = residual_budget(cfg, static_cast<double>(net.prunable_numel()));
    const auto w = softmax(genome.genes);
    for (double v : w) plan.regrow.push_back(v * plan.residual);
    return plan;
}

SparsityDistribution decode(const CandidateGenome& genome, const Network& net, const SearchConfig& cfg) {
    check_genome(genome, net);
    const auto& p = net.prunable_layers();
    const std::size_t count = p.size();
    const auto w = softmax(genome.genes);
    const double residual = residual_budget(cfg, static_cast<double>(net.prunable_numel()));
    std::vector<double> numel(count);
    for (std::size_t l = 0; l < count; ++l) numel[l] = static_cast<double>(net.layer(p[l]).weight.numel());

    SparsityDistribution dist{std::vector<double>(count, cfg.excessive), cfg.target};
    std::vector<bool> pinned(count, false);
    for (;;) {
        double remaining = residual, weight = 0.0;
        for (std::size_t l = 0; l < count; ++l) {
            if (pinned[l]) remaining -= cfg.excessive * numel[l];
            else weight += w[l];
        }
        if (weight <= 0.0) break;
        bool changed = false;
        for (std::size_t l = 0; l < count; ++l) {
            if (pinned[l]) continue;
            const double rate = cfg.excessive - (w[l] / weight) * remaining / numel[l];
            if (rate < 0.0) {
                pinned[l] = true;
                changed = true;
            }
            dist.rates[l] = rate;
        }
        if (!changed) break;
    }
    for (std::size_t l = 0; l < count; ++l) dist.rates[l] = pinned[l] ? 0.0 : std::clamp(dist.rates[l], 0.0, 1.0);
    return dist;
}

FitnessRecord fitness(const CandidateGenome& genome, const Network& teacher, const CalibrationSet& calib,
                      const SearchConfig& cfg, std::uint64_t seed, const FitnessProbe* probe) {
    if (calib.size() == 0) throw std::invalid_argument("fitness: empty calibration set");
    FitnessRecord record;
    record.genome = genome;
    record.seed = seed;
    record.distribution = decode(genome, teacher, cfg);

    const SparseMask masks = topk_masks(teacher, record.distribution);
    Network student = with_mask_applied(teacher, masks);

    std::vector<Tensor> batches = batch_inputs(calib, cfg.batch_size);
    if (cfg.noise_std > 0.0) {
        const std::vector<double> stds = channel_std(calib.inputs);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (Tensor& b : batches) {
            const std::size_t n = b.dim(0), c = b.dim(1), inner = b.numel() / (n * c);
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double sd = cfg.noise_std * stds[ch];
                    double* px = b.data() + (s * c + ch) * inner;
                    for (std::size_t k = 0; k < inner; ++k) px[k] += sd * normal(rng);
                }
        }
    }
    if (probe && probe->recalibration_batch)
        for (const Tensor& b : batches) probe->recalibration_batch(b);
    bn_recalibrate(student, batches);

    if (probe && probe->evaluation_inputs) probe->evaluation_inputs(calib.inputs);
    student.set_mode(Mode::Eval);
    record.fitness = accuracy(predict_logits(student, calib.inputs, nullptr, cfg.batch_size), calib.labels);
    return record;
}

SearchResult evolve(const Network& teacher, const CalibrationSet& calib, const SearchConfig& cfg,
                    const std::vector<CandidateGenome>* initial) {
    cfg.validate();
    const std::size_t genes = teacher.prunable_layers().size();
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x5eed));

    std::vector<CandidateGenome> population;
    if (initial) {
        if (initial->size() != cfg.population) throw std::invalid_argument("evolve: initial population size mismatch");
        population = *initial;
    } else {
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t i = 0; i < cfg.population; ++i) {
            CandidateGenome g;
            for (std::size_t k = 0; k < genes; ++k) g.genes.push_back(normal(rng));
            population.push_back(std::move(g));
        }
    }

    auto evaluate = [&](const std::vector<CandidateGenome>& pop, std::size_t generation, std::size_t first) {
        std::vector<FitnessRecord> out(pop.size());
        auto work = [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i)
                out[i] = fitness(pop[i], teacher, calib, cfg, individual_seed(cfg.seed, generation, first + i));
        };
        const std::size_t threads = std::clamp<std::size_t>(cfg.threads, 1, std::max<std::size_t>(pop.size(), 1));
        if (threads == 1) {
            work(0, pop.size());
        } else {
            std::vector<std::thread> pool;
            const std::size_t chunk = (pop.size() + threads - 1) / threads;
            for (std::size_t t = 0; t < threads; ++t)
                pool.emplace_back(work, std::min(pop.size(), t * chunk), std::min(pop.size(), (t + 1) * chunk));
            for (auto& th : pool) th.join();
        }
        return out;
    };
    auto rank = [](std::vector<FitnessRecord>& records) {
        std::stable_sort(records.begin(), records.end(),
                         [](const FitnessRecord& a, const FitnessRecord& b) { return a.fitness > b.fitness; });
    };
    auto record_stats = [](const std::vector<FitnessRecord>& ranked, std::size_t generation) {
        GenerationStats s;
        s.generation = generation;
        s.best = ranked.front().fitness;
        s.worst = ranked.back().fitness;
        for (const auto& r : ranked) s.mean += r.fitness;
        s.mean /= static_cast<double>(ranked.size());
        s.elite = ranked.front().distribution;
        return s;
    };

    SearchResult result;
    std::vector<FitnessRecord> ranked = evaluate(population, 0, 0);
    rank(ranked);
    result.history.push_back(record_stats(ranked, 0));

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, cfg.population - 1);
    std::normal_distribution<double> mutation(0.0, 1.0);
    auto tournament = [&]() -> const CandidateGenome& {
        std::size_t best = pick(rng);
        for (std::size_t t = 1; t < cfg.tournament; ++t) best = std::min(best, pick(rng));  // ranked: lower is fitter
        return ranked[best].genome;
    };

    for (std::size_t gen = 1; gen < cfg.generations; ++gen) {
        std::vector<CandidateGenome> children;
        for (std::size_t i = cfg.elites; i < cfg.population; ++i) {
            const CandidateGenome& a = tournament();
            const CandidateGenome& b = tournament();
            CandidateGenome child = a;
            for (std::size_t k = 0; k < genes; ++k) {
                if (unit(rng) < cfg.crossover_rate) child.genes[k] = b.genes[k];
                child.genes[k] += cfg.mutation_std * mutation(rng);
            }
            children.push_back(std::move(child));
        }
        std::vector<FitnessRecord> next(ranked.begin(), ranked.begin() + static_cast<long>(cfg.elites));
        auto offspring = evaluate(children, gen, cfg.elites);
        next.insert(next.end(), offspring.begin(), offspring.end());
        ranked = std::move(next);
        rank(ranked);
        result.history.push_back(record_stats(ranked, gen));
    }
    result.best = ranked.front();
    return result;
}

void write_search_log(const SearchResult& result, std::ostream& out) {
    for (const auto& g : result.history) {
        out << "gen=" << g.generation << " best=" << g.best << " mean=" << g.mean << " worst=" << g.worst << " rates=";
        for (std::size_t l = 0; l < g.elite.rates.size(); ++l) out << (l ? "," : "") << g.elite.rates[l];
        out << "\n";
    }
}

} // namespace pts
