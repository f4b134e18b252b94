// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sstream>

#include "pts/checkpoint.hpp"
#include "pts/network.hpp"
#include "test_support.hpp"

using namespace pts;
using namespace pts::testing;

namespace {

Network dense_2x2() {
    Network net({2}, {LayerSpec::dense(2, 2)});
    net.layer(0).weight = Tensor({2, 2}, {1, 2, 3, 4});
    return net;
}

// Direct 2-D convolution, one output at a time.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), k = w.dim(2);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
    Tensor y({n, o, ho, wo});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t oc = 0; oc < o; ++oc)
            for (std::size_t i = 0; i < ho; ++i)
                for (std::size_t j = 0; j < wo; ++j) {
                    double acc = b[oc];
                    for (std::size_t ic = 0; ic < c; ++ic)
                        for (std::size_t ki = 0; ki < k; ++ki)
                            for (std::size_t kj = 0; kj < k; ++kj) {
                                const long yy = long(i * stride + ki) - long(pad);
                                const long xx = long(j * stride + kj) - long(pad);
                                if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(wd)) continue;
                                acc += w[((oc * c + ic) * k + ki) * k + kj] *
                                       x[((s * c + ic) * h + std::size_t(yy)) * wd + std::size_t(xx)];
                            }
                    y[((s * o + oc) * ho + i) * wo + j] = acc;
                }
    return y;
}

double linear_loss(const Network& net, const Tensor& x, const Tensor& coef, const SparseMask* masks) {
    const Tensor out = forward(net, x, masks).output;
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += coef[i] * out[i];
    return s;
}

// Central differences of a linear functional of the logits w.r.t. every parameter.
void check_gradients(Network net, std::mt19937_64& rng, Mode mode, bool masked) {
    net.set_mode(mode);
    const Tensor x = random_tensor(rng, batch_shape(4, net.input_shape()));
    const Tensor coef = random_tensor(rng, batch_shape(4, net.output_shape()));
    const SparseMask m = random_masks(rng, net, 0.6);
    const SparseMask* mp = masked ? &m : nullptr;

    const ForwardTrace trace = forward(net, x, mp);
    const Gradients g = backward(net, trace, coef, mp, /*ste=*/false);
    const double h = 1e-5;
    for (std::size_t li = 0; li < net.size(); ++li) {
        for (Tensor* param : {&net.layer(li).weight, &net.layer(li).bias}) {
            if (param->empty()) continue;
            const Tensor& analytic = param == &net.layer(li).weight ? g.layers[li].weight : g.layers[li].bias;
            Tensor numeric(param->shape());
            for (std::size_t i = 0; i < param->numel(); ++i) {
                const double keep = (*param)[i];
                (*param)[i] = keep + h;
                const double up = linear_loss(net, x, coef, mp);
                (*param)[i] = keep - h;
                const double down = linear_loss(net, x, coef, mp);
                (*param)[i] = keep;
                numeric[i] = (up - down) / (2 * h);
            }
            const bool cancelled = mode == Mode::Train && param == &net.layer(li).bias && li + 1 < net.size() &&
                                   net.layer(li + 1).spec.kind == LayerKind::BatchNorm;
            if (cancelled) {
                // Train-mode BN subtracts the batch mean, so this gradient is exactly zero.
                for (std::size_t i = 0; i < param->numel(); ++i) {
                    CHECK(std::abs(analytic[i]) < 1e-12);
                    CHECK(std::abs(numeric[i]) < 1e-8);
                }
                continue;
            }
            CHECK_MESSAGE(relative_error(analytic, numeric) < 1e-4, net.layer_name(li));
        }
    }
    Tensor numeric(x.shape());
    Tensor xp = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        xp[i] = x[i] + h;
        const double up = linear_loss(net, xp, coef, mp);
        xp[i] = x[i] - h;
        const double down = linear_loss(net, xp, coef, mp);
        xp[i] = x[i];
        numeric[i] = (up - down) / (2 * h);
    }
    CHECK(relative_error(g.input, numeric) < 1e-4);
}

} // namespace

TEST_CASE("dense forward on a hand-computed example") {
    const Network net = dense_2x2();
    const Tensor out = forward(net, Tensor({1, 2}, {1, 1})).output;
    CHECK(out == Tensor({1, 2}, {3, 7}));

    SparseMask m{{Tensor({2, 2}, {1, 0, 0, 1})}};
    CHECK(forward(net, Tensor({1, 2}, {1, 1}), &m).output == Tensor({1, 2}, {1, 4}));
}

TEST_CASE("masked forward equals forward on explicitly zeroed weights") {
    std::mt19937_64 rng(11);
    for (int c = 0; c < 200; ++c) {
        Network net = c % 2 ? small_convnet(rng) : small_mlp(rng);
        net.set_mode(c % 4 < 2 ? Mode::Eval : Mode::Train);
        const SparseMask m = random_masks(rng, net, 0.5);
        const Tensor x = random_tensor(rng, batch_shape(3, net.input_shape()));
        Network zeroed = net;
        const auto& idx = net.prunable_layers();
        for (std::size_t k = 0; k < idx.size(); ++k) {
            Tensor& w = zeroed.layer(idx[k]).weight;
            for (std::size_t i = 0; i < w.numel(); ++i) w[i] *= m.layers[k][i];
        }
        const Tensor a = forward(net, x, &m).output;
        const Tensor b = forward(zeroed, x).output;
        double worst = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
        REQUIRE(worst <= 1e-12);
        REQUIRE(with_mask_applied(net, m).layer(idx[0]).weight == zeroed.layer(idx[0]).weight);
    }
}

TEST_CASE("convolution matches a direct loop") {
    std::mt19937_64 rng(3);
    for (int c = 0; c < 50; ++c) {
        const std::size_t stride = 1 + c % 2, pad = c % 3 == 0 ? 0 : 1, k = 2 + c % 2;
        Network net({2, 7, 7}, {LayerSpec::conv2d(2, 3, k, stride, pad)});
        randomize(net, rng);
        const Tensor x = random_tensor(rng, {2, 2, 7, 7});
        const Tensor a = forward(net, x).output;
        const Tensor b = naive_conv(x, net.layer(0).weight, net.layer(0).bias, stride, pad);
        REQUIRE(a.shape() == b.shape());
        CHECK(relative_error(a, b) < 1e-12);
    }
}

TEST_CASE("straight-through and hard-masked weight gradients") {
    // y = w x with w = 2 masked out, x = 3, loss = y.
    Network net({1}, {LayerSpec::dense(1, 1)});
    net.layer(0).weight = Tensor({1, 1}, {2.0});
    const SparseMask m{{Tensor({1, 1}, {0.0})}};
    const Tensor x({1, 1}, {3.0});
    const ForwardTrace t = forward(net, x, &m);
    CHECK(t.output[0] == 0.0);
    const Tensor up({1, 1}, {1.0});
    CHECK(backward(net, t, up, &m, true).layers[0].weight[0] == 3.0);
    CHECK(backward(net, t, up, &m, false).layers[0].weight[0] == 0.0);
    // The input gradient always sees the masked weight.
    CHECK(backward(net, t, up, &m, true).input[0] == 0.0);
}

TEST_CASE("analytic gradients agree with central differences") {
    std::mt19937_64 rng(5);
    for (int c = 0; c < 200; ++c) {
        Network net = c % 2 ? small_convnet(rng) : small_mlp(rng);
        REQUIRE(net.parameter_count() <= 1000);
        check_gradients(net, rng, (c / 2) % 2 ? Mode::Train : Mode::Eval, (c / 4) % 2 == 1);
    }
}

TEST_CASE("backward rejects a trace from another network") {
    std::mt19937_64 rng(1);
    Network a = small_mlp(rng);
    const ForwardTrace t = forward(a, random_tensor(rng, batch_shape(2, a.input_shape())));
    a.layer(0).weight[0] += 1.0;  // parameters may change, structure may not
    CHECK_NOTHROW(backward(a, t, random_tensor(rng, t.output.shape())));
    Network b({a.input_shape()[0]}, {LayerSpec::dense(a.input_shape()[0], 3)});
    CHECK_THROWS(backward(b, t, random_tensor(rng, t.output.shape())));
}

TEST_CASE("shape errors name the offending layer") {
    const Network net = dense_2x2();
    try {
        forward(net, Tensor({1, 3}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(e.layer() == -1);
    }
    const SparseMask bad{{Tensor({3, 2})}};
    try {
        forward(net, Tensor({1, 2}), &bad);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(e.layer() == 0);
    }
    CHECK_THROWS_AS(Network({4}, {LayerSpec::dense(3, 2)}), ShapeError);
}

TEST_CASE("batch norm recalibration") {
    Network net({2}, {LayerSpec::batch_norm(2)});
    const Tensor b1({3, 2}, {1, 10, 2, 20, 6, 30});

    SUBCASE("single batch gives that batch's statistics") {
        bn_recalibrate(net, {b1});
        CHECK(net.layer(0).running_mean[0] == doctest::Approx(3.0).epsilon(1e-12));
        CHECK(net.layer(0).running_mean[1] == doctest::Approx(20.0).epsilon(1e-12));
        CHECK(net.layer(0).running_var[0] == doctest::Approx(14.0 / 3.0).epsilon(1e-12));
        CHECK(net.layer(0).running_var[1] == doctest::Approx(200.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("duplicated batch gives identical statistics") {
        bn_recalibrate(net, {b1});
        const Network once = net;
        bn_recalibrate(net, {b1, b1});
        for (std::size_t i = 0; i < 2; ++i) {
            CHECK(net.layer(0).running_mean[i] == doctest::Approx(once.layer(0).running_mean[i]).epsilon(1e-12));
            CHECK(net.layer(0).running_var[i] == doctest::Approx(once.layer(0).running_var[i]).epsilon(1e-12));
        }
    }
    SUBCASE("constant input has zero variance") {
        bn_recalibrate(net, {Tensor({4, 2}, 2.5), Tensor({2, 2}, 2.5)});
        CHECK(net.layer(0).running_mean[0] == 2.5);
        CHECK(net.layer(0).running_var[0] == 0.0);
        const Tensor y = predict_logits(net, Tensor({1, 2}, 2.5));
        CHECK(y.all_finite());
    }
    SUBCASE("pooling uneven batches is exact") {
        const Tensor b2({1, 2}, {-4, 0});
        bn_recalibrate(net, {b1, b2});
        // pooled over {1,2,6,-4} and {10,20,30,0}
        CHECK(net.layer(0).running_mean[0] == doctest::Approx(1.25).epsilon(1e-12));
        CHECK(net.layer(0).running_var[0] == doctest::Approx(12.6875).epsilon(1e-12));
        CHECK(net.layer(0).running_mean[1] == doctest::Approx(15.0).epsilon(1e-12));
        CHECK(net.layer(0).running_var[1] == doctest::Approx(125.0).epsilon(1e-12));
    }
    SUBCASE("empty stream is rejected") { CHECK_THROWS(bn_recalibrate(net, {})); }
}

TEST_CASE("softmax") {
    const Tensor p = predict_distribution(Tensor({2, 2}, {0, 0, std::log(1.0), std::log(3.0)}));
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));
    CHECK(p[2] == doctest::Approx(0.25));
    CHECK(p[3] == doctest::Approx(0.75));

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> shift(-1000.0, 1000.0);
    for (int c = 0; c < 200; ++c) {
        const Tensor z = random_tensor(rng, {3, 7}, 20.0);
        Tensor zs = z;
        const double s = shift(rng);
        for (auto& v : zs.values()) v += s;
        const Tensor a = predict_distribution(z), b = predict_distribution(zs);
        REQUIRE(a.all_finite());
        for (std::size_t r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 7; ++j) sum += a[r * 7 + j];
            REQUIRE(std::abs(sum - 1.0) <= 1e-6);
        }
        REQUIRE(relative_error(a, b) < 1e-9);
    }
}

TEST_CASE("accuracy counts argmax hits") {
    const Tensor logits({3, 2}, {1, 0, 0, 1, 2, 1});
    CHECK(accuracy(logits, {0, 1, 1}) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("presets") {
    const Network mlp = build_preset("mlp3", {1, 4, 4}, 5, 1);
    CHECK(mlp.output_shape() == Shape{5});
    CHECK(mlp.prunable_layers().size() == 3);
    const Network conv = build_preset("convnet-small", {1, 16, 16}, 10, 1);
    CHECK(conv.output_shape() == Shape{10});
    CHECK(conv.prunable_layers().size() == 3);
    CHECK(build_preset("convnet-small", {1, 16, 16}, 10, 1) == conv);
    CHECK_FALSE(build_preset("convnet-small", {1, 16, 16}, 10, 2) == conv);
    CHECK_THROWS(build_preset("resnet", {1, 16, 16}, 10, 1));
}

TEST_CASE("checkpoint round trip is bit exact") {
    std::mt19937_64 rng(9);
    for (int c = 0; c < 20; ++c) {
        Network net = c % 2 ? small_convnet(rng) : small_mlp(rng);
        net.set_mode(c % 3 ? Mode::Eval : Mode::Train);
        std::stringstream buf;
        save_network(net, buf);
        const Network back = load_network(buf);
        REQUIRE(back == net);
        REQUIRE(back.hash() == net.hash());
    }
    std::stringstream bad("ptsnet 2\n");
    CHECK_THROWS(load_network(bad));
}

TEST_CASE("running statistics follow the momentum rule") {
    Network net({1}, {LayerSpec::batch_norm(1)});
    net.set_mode(Mode::Train);
    const ForwardTrace t = forward(net, Tensor({2, 1}, {1.0, 3.0}));
    update_running_stats(net, t, 0.1);
    CHECK(net.layer(0).running_mean[0] == doctest::Approx(0.2));
    CHECK(net.layer(0).running_var[0] == doctest::Approx(0.9 + 0.1 * 1.0));
}
