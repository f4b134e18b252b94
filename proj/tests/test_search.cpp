// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "pts/search.hpp"
#include "test_support.hpp"

using namespace pts;
using namespace pts::testing;

namespace {

// Planted two-layer problem. Each class is a random 8-d pattern. Layer 1 is a
// dense random [32, 8] feature map in which every weight matters; layer 2 is a
// wide [64, 32] read-out whose only non-zero rows are the 4 class templates.
// All the signal rides on layer 1, while ~94% of layer 2 is free to prune.
struct Planted {
    Network net;
    CalibrationSet calib;
};

Planted planted(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t classes = 4, in = 8, dim = 32, wide = 64;
    Network net({in}, {LayerSpec::dense(in, dim), LayerSpec::relu(), LayerSpec::dense(dim, wide)});
    net.layer(0).weight = random_tensor(rng, {dim, in});
    std::vector<Tensor> patterns;
    for (std::size_t k = 0; k < classes; ++k) patterns.push_back(random_tensor(rng, {in}));

    CalibrationSet calib;
    calib.classes = wide;
    const std::size_t n = 240;
    calib.inputs = Tensor({n, in});
    std::normal_distribution<double> noise(0.0, 0.8);
    for (std::size_t s = 0; s < n; ++s) {
        const std::size_t k = s % classes;
        for (std::size_t j = 0; j < in; ++j) calib.inputs[s * in + j] = patterns[k][j] + noise(rng);
        calib.labels.push_back(std::uint32_t(k));
        calib.ids.push_back(s);
    }
    // nearest-centroid read-out on the hidden features: logit_k = μ_k·h − ‖μ_k‖²/2
    const Tensor hidden = forward(net, calib.inputs, nullptr, {0, 2}).output;
    std::vector<double> mean(classes * dim, 0.0);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < dim; ++j) mean[(s % classes) * dim + j] += hidden[s * dim + j] / double(n / classes);
    Layer& out = net.layer(2);
    for (std::size_t r = 0; r < wide; ++r) out.bias[r] = -100.0;
    for (std::size_t k = 0; k < classes; ++k) {
        double norm = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            out.weight[k * dim + j] = mean[k * dim + j];
            norm += mean[k * dim + j] * mean[k * dim + j];
        }
        out.bias[k] = -norm / 2.0;
    }
    return {std::move(net), std::move(calib)};
}

SearchConfig planted_config(std::uint64_t seed) {
    SearchConfig cfg;
    cfg.target = 0.75;
    cfg.excessive = 0.9;
    cfg.population = 10;
    cfg.generations = 6;
    cfg.batch_size = 60;
    cfg.seed = seed;
    return cfg;
}

// Genome giving layer 0 a share `s` of the residual.
CandidateGenome share_genome(double s) {
    s = std::clamp(s, 1e-12, 1.0 - 1e-12);
    return {{std::log(s), std::log(1.0 - s)}};
}

Network random_dense_stack(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> layers(1, 5), width(1, 40);
    std::size_t in = width(rng);
    const Shape input{in};
    std::vector<LayerSpec> specs;
    const std::size_t count = layers(rng);
    for (std::size_t l = 0; l < count; ++l) {
        const std::size_t out = width(rng);
        specs.push_back(LayerSpec::dense(in, out));
        in = out;
    }
    return Network(input, specs);
}

// r_l = P_e − softmax_l · Residual / numel_l, no clamping.
std::vector<double> scalar_decode(const std::vector<double>& genes, const std::vector<double>& numel, double p,
                                  double pe) {
    double total = 0.0, z = 0.0;
    for (double n : numel) total += n;
    for (double g : genes) z += std::exp(g);
    std::vector<double> r;
    for (std::size_t l = 0; l < genes.size(); ++l) r.push_back(pe - std::exp(genes[l]) / z * (pe - p) * total / numel[l]);
    return r;
}

} // namespace

TEST_CASE("regrow arithmetic") {
    const Network net({25}, {LayerSpec::dense(25, 40)});
    SearchConfig cfg;
    cfg.target = 0.9;
    cfg.excessive = 0.95;
    const RegrowPlan plan = regrow_allocation({{0.3}}, net, cfg);
    CHECK(plan.residual == 50.0);
    CHECK(plan.regrow[0] == 50.0);
    CHECK(decode({{0.3}}, net, cfg).rates[0] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(SearchConfig::default_excessive(0.9) == doctest::Approx(0.95));
    CHECK(SearchConfig::default_excessive(0.98) == 1.0);
}

TEST_CASE("uniform genome over equal layers decodes to the target") {
    const Network net({10}, {LayerSpec::dense(10, 10), LayerSpec::relu(), LayerSpec::dense(10, 10),
                             LayerSpec::relu(), LayerSpec::dense(10, 10)});
    SearchConfig cfg;
    for (double p : {0.3, 0.5, 0.9}) {
        cfg.target = p;
        cfg.excessive = SearchConfig::default_excessive(p);
        for (double r : decode({{1.5, 1.5, 1.5}}, net, cfg).rates) CHECK(r == doctest::Approx(p).epsilon(1e-12));
    }
}

TEST_CASE("dominant gene matches the scalar decode") {
    const Network net({100}, {LayerSpec::dense(100, 30), LayerSpec::relu(), LayerSpec::dense(30, 20),
                              LayerSpec::relu(), LayerSpec::dense(20, 10)});
    SearchConfig cfg;
    cfg.target = 0.9;
    cfg.excessive = 0.95;
    const std::vector<double> numel{3000, 600, 200};
    for (std::size_t hot = 0; hot < 3; ++hot) {
        std::vector<double> genes{0.0, 0.0, 0.0};
        genes[hot] = 40.0;
        const auto ref = scalar_decode(genes, numel, cfg.target, cfg.excessive);
        if (*std::min_element(ref.begin(), ref.end()) < 0.0) continue;  // clamp path, covered elsewhere
        const auto got = decode({genes}, net, cfg).rates;
        for (std::size_t l = 0; l < 3; ++l) CHECK(got[l] == doctest::Approx(ref[l]).epsilon(1e-12));
        CHECK(got[hot] == doctest::Approx(0.95 - 0.05 * 3800 / numel[hot]).epsilon(1e-9));
    }
}

TEST_CASE("budget identity and bounds on random genomes") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> p(0.0, 1.0), spread(0.1, 8.0);
    for (int c = 0; c < 500; ++c) {
        const Network net = random_dense_stack(rng);
        SearchConfig cfg;
        cfg.target = p(rng);
        cfg.excessive = c % 3 == 0 ? 1.0 : SearchConfig::default_excessive(cfg.target);
        CandidateGenome g{};
        std::normal_distribution<double> n(0.0, spread(rng));
        for (std::size_t l = 0; l < net.prunable_layers().size(); ++l) g.genes.push_back(n(rng));

        const RegrowPlan plan = regrow_allocation(g, net, cfg);
        double sum = 0.0;
        for (double t : plan.regrow) sum += t;
        REQUIRE(std::abs(sum - plan.residual) <= 1e-9 * std::max(plan.residual, 1.0));

        const SparsityDistribution d = decode(g, net, cfg);
        for (double r : d.rates) REQUIRE((r >= 0.0 && r <= cfg.excessive + 1e-12));
        REQUIRE(weighted_sparsity(net, d) == doctest::Approx(cfg.target).epsilon(1e-9).scale(1.0));

        // realized sparsity differs only by per-layer flooring
        const double total = double(net.prunable_numel());
        const double realized = global_sparsity(net, topk_masks(net, d));
        REQUIRE(realized >= cfg.target - 1e-9);
        REQUIRE(realized <= cfg.target + double(d.rates.size()) / total + 1e-9);
    }
}

TEST_CASE("fitness contracts") {
    const Planted pl = planted(5);
    const double teacher_acc = accuracy(predict_logits(pl.net, pl.calib.inputs), pl.calib.labels);
    REQUIRE(teacher_acc > 0.5);  // well above the 0.25 chance level
    const std::uint64_t hash = pl.net.hash();

    SUBCASE("no pruning gives the teacher's accuracy") {
        SearchConfig cfg = planted_config(1);
        cfg.target = cfg.excessive = 0.0;
        CHECK(fitness({{0.1, -0.4}}, pl.net, pl.calib, cfg, 3).fitness == teacher_acc);

        // with batch norm the reference is the teacher recalibrated on the clean batches
        std::mt19937_64 rng(6);
        Network bn = build_preset("mlp3", {8}, 64, 2);
        CalibrationSet calib = pl.calib;
        cfg.noise_std = 0.0;
        Network ref = bn;
        bn_recalibrate(ref, batch_inputs(calib, cfg.batch_size));
        CHECK(fitness({{0.0, 0.0, 0.0}}, bn, calib, cfg, 3).fitness ==
              accuracy(predict_logits(ref, calib.inputs), calib.labels));
    }
    SUBCASE("fully pruned network is constant") {
        SearchConfig cfg = planted_config(1);
        cfg.target = cfg.excessive = 1.0;
        const FitnessRecord r = fitness({{0.0, 0.0}}, pl.net, pl.calib, cfg, 3);
        CHECK(r.fitness == doctest::Approx(0.25));  // one class for every sample
        CHECK(r.fitness < teacher_acc);
    }
    SUBCASE("deterministic per seed") {
        const SearchConfig cfg = planted_config(1);
        Network bn = build_preset("mlp3", {8}, 64, 2);
        const FitnessRecord a = fitness({{0.2, 0.1, -1.0}}, bn, pl.calib, cfg, 99);
        const FitnessRecord b = fitness({{0.2, 0.1, -1.0}}, bn, pl.calib, cfg, 99);
        CHECK(a.fitness == b.fitness);
        CHECK(a.distribution == b.distribution);
        CHECK(a.seed == 99);
    }
    SUBCASE("noise reaches recalibration only") {
        SearchConfig cfg = planted_config(1);
        cfg.noise_std = 0.1;
        std::vector<Tensor> recal;
        Tensor evaluated;
        FitnessProbe probe{[&](const Tensor& b) { recal.push_back(b); }, [&](const Tensor& x) { evaluated = x; }};
        Network bn = build_preset("mlp3", {8}, 64, 2);
        fitness({{0.0, 0.0, 0.0}}, bn, pl.calib, cfg, 7, &probe);
        CHECK(evaluated == pl.calib.inputs);
        const auto clean = batch_inputs(pl.calib, cfg.batch_size);
        REQUIRE(recal.size() == clean.size());
        const std::vector<double> sd = channel_std(pl.calib.inputs);
        for (std::size_t i = 0; i < clean.size(); ++i) {
            REQUIRE(recal[i].shape() == clean[i].shape());
            CHECK_FALSE(recal[i] == clean[i]);
            // perturbation magnitude tracks noise_std · per-channel std
            double ss = 0.0;
            for (std::size_t k = 0; k < clean[i].numel(); ++k) ss += std::pow(recal[i][k] - clean[i][k], 2);
            const double per_entry = std::sqrt(ss / double(clean[i].numel()));
            double mean_sd = 0.0;
            for (double s : sd) mean_sd += s / double(sd.size());
            CHECK(per_entry == doctest::Approx(0.1 * mean_sd).epsilon(0.35));
        }
        recal.clear();
        cfg.noise_std = 0.0;
        fitness({{0.0, 0.0, 0.0}}, bn, pl.calib, cfg, 7, &probe);
        for (std::size_t i = 0; i < clean.size(); ++i) CHECK(recal[i] == clean[i]);
    }
    CHECK(pl.net.hash() == hash);
}

TEST_CASE("teacher is untouched by any number of fitness calls") {
    std::mt19937_64 rng(43);
    Network bn = build_preset("mlp3", {8}, 64, 2);
    randomize(bn, rng);
    const Planted pl = planted(2);
    const std::uint64_t hash = bn.hash();
    const Network copy = bn;
    SearchConfig cfg = planted_config(3);
    std::normal_distribution<double> n(0.0, 2.0);
    for (int c = 0; c < 200; ++c) {
        cfg.target = std::uniform_real_distribution<double>(0.0, 0.95)(rng);
        cfg.excessive = SearchConfig::default_excessive(cfg.target);
        fitness({{n(rng), n(rng), n(rng)}}, bn, pl.calib, cfg, std::uint64_t(c));
        REQUIRE(bn.hash() == hash);
    }
    CHECK(bn == copy);
}

TEST_CASE("evolution mechanics") {
    const Planted pl = planted(7);

    SUBCASE("identical population without mutation stays put") {
        SearchConfig cfg = planted_config(1);
        cfg.mutation_std = 0.0;
        const std::vector<CandidateGenome> init(cfg.population, CandidateGenome{{0.7, -0.2}});
        const SearchResult r = evolve(pl.net, pl.calib, cfg, &init);
        CHECK(r.best.genome == init.front());
        REQUIRE(r.history.size() == cfg.generations);
        for (const auto& g : r.history) CHECK(g.best == g.worst);
    }
    SUBCASE("elitism keeps the best fitness non-decreasing") {
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            SearchConfig cfg = planted_config(seed);
            cfg.generations = 8;
            cfg.mutation_std = 1.0;
            const SearchResult r = evolve(pl.net, pl.calib, cfg);
            for (std::size_t g = 1; g < r.history.size(); ++g) CHECK(r.history[g].best >= r.history[g - 1].best);
            CHECK(r.best.fitness == r.history.back().best);
        }
    }
    SUBCASE("thread count does not change the result") {
        SearchConfig cfg = planted_config(9);
        const SearchResult a = evolve(pl.net, pl.calib, cfg);
        cfg.threads = 3;
        const SearchResult b = evolve(pl.net, pl.calib, cfg);
        CHECK(a.best.genome == b.best.genome);
        CHECK(a.best.fitness == b.best.fitness);
        std::ostringstream la, lb;
        write_search_log(a, la);
        write_search_log(b, lb);
        CHECK(la.str() == lb.str());
        CHECK(la.str().rfind("gen=0 best=", 0) == 0);
    }
    SUBCASE("invalid settings are rejected") {
        SearchConfig cfg = planted_config(1);
        cfg.elites = cfg.population;
        CHECK_THROWS(evolve(pl.net, pl.calib, cfg));
        cfg = planted_config(1);
        cfg.excessive = 0.5;
        CHECK_THROWS(evolve(pl.net, pl.calib, cfg));
    }
}

TEST_CASE("search protects the fragile layer on the planted problem") {
    std::vector<double> margins;
    for (std::uint64_t seed : {1, 2, 3}) {
        const Planted pl = planted(100 + seed);
        const SearchConfig cfg = planted_config(seed);

        // Exhaustive sweep over the residual share of layer 1 confirms the plant:
        // the best grid point gives layer 1 the lower rate.
        double best_fit = -1.0;
        SparsityDistribution best_dist;
        for (int s = 0; s <= 10; ++s) {
            const FitnessRecord r = fitness(share_genome(s / 10.0), pl.net, pl.calib, cfg, 0);
            if (r.fitness > best_fit) {
                best_fit = r.fitness;
                best_dist = r.distribution;
            }
        }
        REQUIRE(best_dist.rates[0] < best_dist.rates[1]);

        const SearchResult found = evolve(pl.net, pl.calib, cfg);
        margins.push_back(found.best.distribution.rates[1] - found.best.distribution.rates[0]);
    }
    std::sort(margins.begin(), margins.end());
    CHECK(margins[1] > 0.0);
}
