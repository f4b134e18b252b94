// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

#include "pts/sparsity.hpp"
#include "test_support.hpp"

using namespace pts;
using namespace pts::testing;

namespace {

Tensor values(std::initializer_list<double> v) { return Tensor({v.size()}, std::vector<double>(v)); }

// Every kept weight is at least as large in magnitude as every pruned one.
bool magnitude_ordered(const Tensor& w, const Tensor& mask, const std::vector<std::size_t>& idx) {
    double min_kept = INFINITY, max_pruned = -INFINITY;
    for (auto i : idx) {
        if (mask[i] == 1.0) min_kept = std::min(min_kept, std::abs(w[i]));
        else max_pruned = std::max(max_pruned, std::abs(w[i]));
    }
    return min_kept >= max_pruned;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

// ERK reference: try making the k layers with the largest raw density dense,
// for k = 0, 1, ..., and take the first k where no remaining layer overflows.
std::vector<double> erk_reference(const std::vector<Shape>& shapes, double target) {
    const std::size_t L = shapes.size();
    std::vector<double> numel(L), raw(L);
    double total = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
        numel[l] = double(shape_numel(shapes[l]));
        double sum = 0.0;
        for (auto d : shapes[l]) sum += double(d);
        raw[l] = sum / numel[l];
        total += numel[l];
    }
    std::vector<std::size_t> order(L);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return raw[a] > raw[b]; });
    for (std::size_t k = 0; k <= L; ++k) {
        std::vector<double> density(L, 1.0);
        double budget = (1.0 - target) * total, divisor = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
            if (j < k) budget -= numel[order[j]];
            else divisor += raw[order[j]] * numel[order[j]];
        }
        bool ok = true;
        for (std::size_t j = k; j < L; ++j) {
            density[order[j]] = budget / divisor * raw[order[j]];
            if (density[order[j]] > 1.0) ok = false;
        }
        if (ok) {
            std::vector<double> rates(L);
            for (std::size_t l = 0; l < L; ++l) rates[l] = 1.0 - density[l];
            return rates;
        }
    }
    return std::vector<double>(L, 0.0);
}

} // namespace

TEST_CASE("kept count") {
    CHECK(kept_count(0.9, 1000) == 100);
    CHECK(kept_count(0.5, 3) == 1);
    CHECK(kept_count(0.0, 7) == 7);
    CHECK(kept_count(1.0, 7) == 0);
    CHECK_THROWS(kept_count(1.5, 7));
    CHECK_THROWS(kept_count(-0.1, 7));
}

TEST_CASE("top-k magnitude mask examples") {
    CHECK(topk_mask(values({0.5, -0.3, 0.1, 0.9}), 0.5) == values({1, 0, 0, 1}));
    CHECK(topk_mask(values({-2, 1, 0.5}), 0.0) == values({1, 1, 1}));
    CHECK(topk_mask(values({-2, 1, 0.5}), 1.0) == values({0, 0, 0}));
    // ties go to the lower index
    CHECK(topk_mask(values({1, -1, 1, 1}), 0.5) == values({1, 1, 0, 0}));
}

TEST_CASE("top-k cardinality, ordering and scale invariance") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> rate(0.0, 1.0), scale(1e-3, 1e3);
    std::uniform_int_distribution<std::size_t> size(1, 300);
    for (int c = 0; c < 500; ++c) {
        Tensor w = random_tensor(rng, {size(rng)});
        if (c % 5 == 0)  // plenty of ties
            for (auto& v : w.values()) v = std::round(v * 2.0) / 2.0;
        const double r = c % 7 == 0 ? 0.9 : rate(rng);
        const Tensor m = topk_mask(w, r);
        REQUIRE(mask_ones(m) == std::size_t(std::floor((1.0 - r) * double(w.numel()) + 1e-9)));
        REQUIRE(magnitude_ordered(w, m, all_indices(w.numel())));
        Tensor ws = w;
        const double s = scale(rng);
        for (auto& v : ws.values()) v *= -s;
        REQUIRE(topk_mask(ws, r) == m);
        for (double v : m.values()) REQUIRE((v == 0.0 || v == 1.0));
    }
}

TEST_CASE("N:M masks") {
    const NMPattern p24{2, 4};
    CHECK(nm_mask(Tensor({1, 4}, {1, 2, 3, 4}), p24) == Tensor({1, 4}, {0, 0, 1, 1}));
    CHECK(nm_mask(Tensor({1, 4}, {-5, 1, -4, 2}), p24) == Tensor({1, 4}, {1, 0, 1, 0}));
    CHECK(nm_mask(Tensor({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}), NMPattern{4, 4}) == Tensor({2, 4}, 1.0));
    // trailing group of 2 keeps min(n, 2)
    CHECK(nm_mask(Tensor({1, 6}, {1, 2, 3, 4, 9, 8}), p24) == Tensor({1, 6}, {0, 0, 1, 1, 1, 1}));

    CHECK(NMPattern::parse("2:4").n == 2);
    CHECK(NMPattern::parse("1:8").m == 8);
    CHECK(NMPattern::parse("2:4").str() == "2:4");
    CHECK_THROWS(NMPattern::parse("5:4"));
    CHECK_THROWS(NMPattern::parse("0:4"));
    CHECK_THROWS(NMPattern::parse("2-4"));
}

TEST_CASE("N:M group layout") {
    // [out=2, in=8, 3, 3]: groups are m consecutive channels at a fixed (o, ky, kx)
    const Shape s{2, 8, 3, 3};
    std::set<std::vector<std::size_t>> expected;
    for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx)
                for (std::size_t c0 = 0; c0 < 8; c0 += 4) {
                    std::vector<std::size_t> g;
                    for (std::size_t c = c0; c < c0 + 4; ++c) g.push_back(((o * 8 + c) * 3 + ky) * 3 + kx);
                    expected.insert(g);
                }
    std::set<std::vector<std::size_t>> got;
    for_each_nm_group(s, 4, [&](const std::vector<std::size_t>& g) { got.insert(g); });
    CHECK(got == expected);
}

TEST_CASE("N:M constraint holds in every group") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> d(1, 12), mm(1, 8);
    for (int c = 0; c < 300; ++c) {
        const std::size_t m = mm(rng);
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, m)(rng);
        const Shape shape = c % 2 ? Shape{d(rng), d(rng)} : Shape{d(rng), d(rng), 3, 3};
        const Tensor w = random_tensor(rng, shape);
        const Tensor mask = nm_mask(w, NMPattern{n, m});
        std::vector<int> seen(w.numel(), 0);
        for_each_nm_group(shape, m, [&](const std::vector<std::size_t>& g) {
            REQUIRE(g.size() <= m);
            std::size_t ones = 0;
            for (auto i : g) {
                ++seen[i];
                ones += mask[i] == 1.0;
            }
            REQUIRE(ones == std::min(n, g.size()));
            REQUIRE(magnitude_ordered(w, mask, g));
        });
        for (int k : seen) REQUIRE(k == 1);
    }
}

TEST_CASE("applying a mask is idempotent and zeroes pruned entries") {
    std::mt19937_64 rng(8);
    for (int c = 0; c < 200; ++c) {
        const Tensor w = random_tensor(rng, {7, 5});
        const Tensor m = random_mask(rng, w.shape(), 0.3);
        const Tensor once = apply_mask(w, m);
        REQUIRE(apply_mask(once, m) == once);
        for (std::size_t i = 0; i < w.numel(); ++i) REQUIRE(once[i] == (m[i] == 1.0 ? w[i] : 0.0));
    }
    CHECK_THROWS(apply_mask(Tensor({2}), Tensor({3})));
}

TEST_CASE("ERK distribution") {
    SUBCASE("a single layer gets the target") {
        const Network net({12}, {LayerSpec::dense(12, 5)});
        CHECK(erk_distribution(net, 0.7).rates[0] == doctest::Approx(0.7).epsilon(1e-12));
    }
    SUBCASE("identical layers share the target") {
        const Network net({6}, {LayerSpec::dense(6, 6), LayerSpec::relu(), LayerSpec::dense(6, 6)});
        const auto d = erk_distribution(net, 0.5);
        CHECK(d.rates[0] == doctest::Approx(0.5));
        CHECK(d.rates[1] == doctest::Approx(0.5));
    }
    SUBCASE("presets against the reference") {
        for (const char* preset : {"mlp3", "convnet-small"}) {
            const Network net = build_preset(preset, {1, 16, 16}, 10, 1);
            for (double target : {0.5, 0.8, 0.9, 0.95, 0.99}) {
                std::vector<Shape> shapes;
                for (auto i : net.prunable_layers()) shapes.push_back(net.layer(i).weight.shape());
                const auto ref = erk_reference(shapes, target);
                const auto d = erk_distribution(net, target);
                for (std::size_t l = 0; l < ref.size(); ++l) CHECK(d.rates[l] == doctest::Approx(ref[l]).epsilon(1e-9));
                CHECK(weighted_sparsity(net, d) == doctest::Approx(target).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("uniform distribution and layer exclusion keep the budget") {
    const Network net = build_preset("mlp3", {1, 16, 16}, 10, 1);
    const auto u = uniform_distribution(net, 0.9);
    for (double r : u.rates) CHECK(r == 0.9);
    const auto x = exclude_layers(net, u, {2});
    CHECK(x.rates[2] == 0.0);
    CHECK(weighted_sparsity(net, x) == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(x.rates[0] == x.rates[1]);
    CHECK_THROWS(exclude_layers(net, u, {7}));
}

TEST_CASE("global sparsity and churn") {
    const Network net({4}, {LayerSpec::dense(4, 2), LayerSpec::relu(), LayerSpec::dense(2, 2)});
    SparseMask a{{Tensor({2, 4}, {1, 0, 0, 0, 1, 1, 0, 0}), Tensor({2, 2}, {1, 1, 0, 1})}};
    CHECK(global_sparsity(net, a) == doctest::Approx(6.0 / 12.0));
    SparseMask b = a;
    b.layers[1][2] = 1.0;
    b.layers[0][0] = 0.0;
    CHECK(mask_churn(a, b) == doctest::Approx(2.0 / 12.0));
    CHECK(global_sparsity(net, dense_masks(net)) == 0.0);
}

TEST_CASE("layer-wise masks realize the distribution") {
    std::mt19937_64 rng(12);
    Network net = build_preset("convnet-small", {1, 16, 16}, 10, 3);
    std::uniform_real_distribution<double> r(0.0, 1.0);
    for (int c = 0; c < 50; ++c) {
        SparsityDistribution d{{r(rng), r(rng), r(rng)}, 0.0};
        const SparseMask m = topk_masks(net, d);
        for (std::size_t l = 0; l < 3; ++l)
            REQUIRE(mask_ones(m.layers[l]) == kept_count(d.rates[l], m.layers[l].numel()));
    }
}

TEST_CASE("mask and distribution files round trip") {
    std::mt19937_64 rng(13);
    const Network net = build_preset("convnet-small", {1, 16, 16}, 10, 3);
    const auto dir = std::filesystem::temp_directory_path() / "pts_sparsity_test";
    std::filesystem::create_directories(dir);
    const SparseMask m = random_masks(rng, net, 0.37);
    save_masks(net, m, (dir / "masks").string());
    CHECK(load_masks((dir / "masks").string()) == m);

    const auto d = erk_distribution(net, 0.9);
    save_distribution(net, d, (dir / "dist.txt").string());
    const auto back = load_distribution((dir / "dist.txt").string());
    CHECK(back == d);

    const std::string table = distribution_summary(net, d, &m);
    CHECK(table.find(net.layer_name(net.prunable_layers()[0])) != std::string::npos);
    std::filesystem::remove_all(dir);
}
