#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "sdebnn/tensor.hpp"
#include "support/oracles.hpp"

using namespace sdebnn;

namespace {

Tensor from(std::vector<double> v, std::vector<std::size_t> shape) {
    return Tensor::from(std::move(v), std::move(shape));
}

}  // namespace

TEST_CASE("activations: fixed points and derived values") {
    auto x = from({0.0, 1.0, -2.0}, {3});
    auto sw = apply_activation(x, ActivationKind::swish);
    CHECK(sw.at(0) == doctest::Approx(0.0));
    // swish(1) = sigmoid(1), evaluated directly
    const double sig1 = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(sw.at(1) == doctest::Approx(sig1).epsilon(1e-12));
    CHECK(sw.at(1) == doctest::Approx(0.7310585786).epsilon(1e-9));

    auto th = apply_activation(x, ActivationKind::tanh);
    CHECK(th.at(0) == doctest::Approx(0.0));
    CHECK(th.at(2) == doctest::Approx(std::tanh(-2.0)));

    auto mi = apply_activation(x, ActivationKind::mish);
    CHECK(mi.at(0) == doctest::Approx(0.0));
    CHECK(mi.at(1) == doctest::Approx(1.0 * std::tanh(std::log1p(std::exp(1.0)))));

    auto id = apply_activation(x, ActivationKind::identity);
    for (std::size_t i = 0; i < 3; ++i) CHECK(id.at(i) == x.at(i));
}

TEST_CASE("activations: elementwise permutation property") {
    const auto v = oracles::random_vector(11, 16, -3.0, 3.0);
    auto perm = v;
    std::reverse(perm.begin(), perm.end());
    for (auto kind : {ActivationKind::swish, ActivationKind::mish, ActivationKind::tanh}) {
        auto a = apply_activation(from(v, {16}), kind);
        auto b = apply_activation(from(perm, {16}), kind);
        for (std::size_t i = 0; i < 16; ++i) CHECK(a.at(i) == b.at(15 - i));
    }
}

TEST_CASE("activations: non-finite input raises a numeric-domain error") {
    auto bad = from({1.0, std::numeric_limits<double>::infinity()}, {2});
    CHECK_THROWS_AS(apply_activation(bad, ActivationKind::tanh), NumericDomainError);
    auto nan = from({std::nan("")}, {1});
    CHECK_THROWS_AS(apply_activation(nan, ActivationKind::swish), NumericDomainError);
}

TEST_CASE("affine: identity map and hand arithmetic") {
    auto x = from({1.0, 0.0}, {1, 2});
    auto I = from({1.0, 0.0, 0.0, 1.0}, {2, 2});
    auto b0 = from({0.0, 0.0}, {2});
    auto y = affine(x, I, b0);
    CHECK(y.at(0) == 1.0);
    CHECK(y.at(1) == 0.0);

    auto x2 = from({1.0, 2.0}, {1, 2});
    auto W = from({1.0, 1.0}, {2, 1});
    auto b = from({0.5}, {1});
    auto y2 = affine(x2, W, b);
    CHECK(y2.at(0) == doctest::Approx(3.5));

    CHECK_THROWS_AS(affine(x2, from({1.0}, {1, 1}), b), ShapeError);
}

TEST_CASE("affine: gradient of sum w.r.t. bias is all-ones") {
    TapeD tape;
    auto x = from(oracles::random_vector(3, 6), {3, 2});
    auto W = tape.leaf(from(oracles::random_vector(4, 4), {2, 2}));
    auto b = tape.leaf(from({0.1, -0.2}, {2}));
    auto loss = sum(affine(x, W, b));
    tape.backward(loss);
    auto gb = tape.grad(b);
    CHECK(gb.at(0) == doctest::Approx(3.0));  // batch of 3 rows
    CHECK(gb.at(1) == doctest::Approx(3.0));
}

TEST_CASE("backward: sum and quadratic basics") {
    TapeD tape;
    auto x = tape.leaf(from({3.0}, {1}));
    auto loss = sum(mul(x, x));
    tape.backward(loss);
    CHECK(tape.grad(x).at(0) == doctest::Approx(6.0));

    TapeD tape2;
    auto y = tape2.leaf(from({1.0, 2.0, 3.0}, {3}));
    auto l2 = sum(y);
    tape2.backward(l2);
    for (std::size_t i = 0; i < 3; ++i) CHECK(tape2.grad(y).at(i) == doctest::Approx(1.0));
}

TEST_CASE("backward: non-scalar loss is a contract error") {
    TapeD tape;
    auto x = tape.leaf(from({1.0, 2.0}, {2}));
    auto y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("backward: unreached leaves get zero gradients") {
    TapeD tape;
    auto x = tape.leaf(from({1.0}, {1}));
    auto unused = tape.leaf(from({5.0, 6.0}, {2}));
    auto loss = sum(mul(x, x));
    tape.backward(loss);
    CHECK(tape.grad(unused).at(0) == 0.0);
    CHECK(tape.grad(unused).at(1) == 0.0);
}

TEST_CASE("conv2d: trivial kernels") {
    // 1x1 unit kernel is the identity.
    auto x = from(oracles::random_vector(7, 2 * 1 * 3 * 3), {2, 1, 3, 3});
    auto k1 = from({1.0}, {1, 1, 1, 1});
    auto y = conv2d(x, k1, 1, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)));

    // all-ones 3x3 kernel over all-ones 3x3 input sums to 9.
    auto ones = Tensor::full({1, 1, 3, 3}, 1.0);
    auto k3 = Tensor::full({1, 1, 3, 3}, 1.0);
    auto s = conv2d(ones, k3, 1, 0);
    CHECK(s.numel() == 1);
    CHECK(s.at(0) == doctest::Approx(9.0));

    CHECK_THROWS_AS(conv2d(ones, Tensor::full({1, 1, 5, 5}, 1.0), 1, 0), ShapeError);
}

TEST_CASE("conv2d: agrees with the nested-loop oracle") {
    const std::size_t N = 2, C = 3, H = 5, W = 5, O = 4, kh = 3, kw = 3;
    for (int stride : {1, 2}) {
        for (int pad : {0, 1}) {
            auto xv = oracles::random_vector(100 + stride * 10 + pad, N * C * H * W);
            auto kv = oracles::random_vector(200 + stride * 10 + pad, O * C * kh * kw);
            auto got = conv2d(from(xv, {N, C, H, W}), from(kv, {O, C, kh, kw}), stride, pad);
            auto want = oracles::conv2d_bruteforce(xv, N, C, H, W, kv, O, kh, kw, stride, pad);
            REQUIRE(got.numel() == want.size());
            for (std::size_t i = 0; i < want.size(); ++i)
                CHECK(std::abs(got.at(i) - want[i]) < 1e-12);
        }
    }
}

// Every differentiable primitive against central finite differences on small
// random tensors. The composite exercises add/sub/mul/scale/affine/conv2d/
// activations/reductions/losses in one graph per case.
TEST_CASE("gradients: primitives match finite differences") {
    auto check_grad = [](auto&& build, const std::vector<double>& x0,
                         std::vector<std::size_t> shape) {
        TapeD tape;
        auto leaf = tape.leaf(Tensor::from(x0, shape));
        auto loss = build(leaf);
        tape.backward(loss);
        auto got = tape.grad(leaf);
        auto fd = oracles::finite_difference_gradient(
            [&](const std::vector<double>& v) {
                auto c = Tensor::from(v, shape);
                return build(c).value();
            },
            x0);
        for (std::size_t i = 0; i < fd.size(); ++i) {
            if (std::abs(fd[i]) < 1e-10 && std::abs(got.at(i)) < 1e-10) continue;
            CHECK(oracles::rel_err(got.at(i), fd[i]) < 1e-4);
        }
    };

    const auto v8 = oracles::random_vector(21, 8, -1.5, 1.5);

    check_grad([](const Tensor& t) { return sum(mul(t, t)); }, v8, {8});
    check_grad([](const Tensor& t) { return sum_sq(apply_activation(t, ActivationKind::swish)); },
               v8, {8});
    check_grad([](const Tensor& t) { return mean(apply_activation(t, ActivationKind::mish)); },
               v8, {8});
    check_grad(
        [](const Tensor& t) {
            auto a = apply_activation(t, ActivationKind::tanh);
            return sum(mul(a, scale(add(t, t), 0.25)));
        },
        v8, {8});

    // affine chain on (2,4) input
    const auto vin = oracles::random_vector(22, 8, -1.0, 1.0);
    check_grad(
        [](const Tensor& t) {
            auto W = Tensor::from(oracles::random_vector(23, 12, -0.7, 0.7), {4, 3});
            auto b = Tensor::from(oracles::random_vector(24, 3, -0.2, 0.2), {3});
            return sum_sq(apply_activation(affine(t, W, b), ActivationKind::swish));
        },
        vin, {2, 4});

    // affine gradient w.r.t. weights and bias
    {
        TapeD tape;
        auto x = Tensor::from(oracles::random_vector(25, 8), {2, 4});
        auto Wv = oracles::random_vector(26, 12, -0.7, 0.7);
        auto bv = oracles::random_vector(27, 3, -0.2, 0.2);
        auto W = tape.leaf(Tensor::from(Wv, {4, 3}));
        auto b = tape.leaf(Tensor::from(bv, {3}));
        auto loss = sum_sq(affine(x, W, b));
        tape.backward(loss);
        auto concat = Wv;
        concat.insert(concat.end(), bv.begin(), bv.end());
        auto fd = oracles::finite_difference_gradient(
            [&](const std::vector<double>& v) {
                std::vector<double> wv(v.begin(), v.begin() + 12);
                std::vector<double> bb(v.begin() + 12, v.end());
                return sum_sq(affine(x, Tensor::from(wv, {4, 3}), Tensor::from(bb, {3})))
                    .value();
            },
            concat);
        auto gW = tape.grad(W);
        auto gb = tape.grad(b);
        for (std::size_t i = 0; i < 12; ++i) CHECK(oracles::rel_err(gW.at(i), fd[i]) < 1e-4);
        for (std::size_t i = 0; i < 3; ++i) CHECK(oracles::rel_err(gb.at(i), fd[12 + i]) < 1e-4);
    }

    // conv2d input gradient
    const auto vimg = oracles::random_vector(28, 1 * 2 * 4 * 4, -1.0, 1.0);
    check_grad(
        [](const Tensor& t) {
            auto k = Tensor::from(oracles::random_vector(29, 3 * 2 * 3 * 3, -0.5, 0.5),
                                  {3, 2, 3, 3});
            return sum_sq(conv2d(t, k, 1, 1));
        },
        vimg, {1, 2, 4, 4});

    // conv2d kernel gradient
    const auto vker = oracles::random_vector(30, 2 * 2 * 2 * 2, -0.5, 0.5);
    check_grad(
        [](const Tensor& t) {
            auto x = Tensor::from(oracles::random_vector(31, 1 * 2 * 4 * 4), {1, 2, 4, 4});
            return sum(apply_activation(conv2d(x, t, 2, 0), ActivationKind::tanh));
        },
        vker, {2, 2, 2, 2});

    // channel bias
    check_grad(
        [](const Tensor& t) {
            auto x = Tensor::from(oracles::random_vector(32, 2 * 3 * 2 * 2), {2, 3, 2, 2});
            return sum_sq(channel_bias(x, t));
        },
        oracles::random_vector(33, 3), {3});

    // concat / slice / reshape plumbing
    check_grad(
        [](const Tensor& t) {
            auto row = reshape(t, {1, 6});
            auto two = concat_cols(row, scale(row, -0.5));
            auto back = reshape(two, {12});
            return sum_sq(slice1d(back, 3, 7));
        },
        oracles::random_vector(34, 6), {6});

    // softmax cross-entropy
    check_grad(
        [](const Tensor& t) {
            return softmax_cross_entropy(reshape(t, {2, 3}), std::vector<int>{2, 0});
        },
        oracles::random_vector(35, 6, -2.0, 2.0), {6});

    // gaussian nll
    check_grad(
        [](const Tensor& t) {
            return gaussian_nll(reshape(t, {3, 2}), std::vector<double>{0.3, -0.8, 1.2});
        },
        oracles::random_vector(36, 6, -1.0, 1.0), {6});

    // concat_channels
    check_grad(
        [](const Tensor& t) {
            auto other = Tensor::from(oracles::random_vector(37, 1 * 1 * 2 * 2), {1, 1, 2, 2});
            return sum_sq(concat_channels(reshape(t, {1, 2, 2, 2}), other));
        },
        oracles::random_vector(38, 8), {8});
}

TEST_CASE("losses: uniform categorical gives ln K") {
    auto logits = Tensor::zeros({4, 10});
    auto nll = softmax_cross_entropy(logits, std::vector<int>{0, 3, 7, 9});
    CHECK(nll.value() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("tensors: shape and contract errors") {
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({2}).value(), ContractError);
    CHECK_THROWS_AS(reshape(Tensor::zeros({4}), {3}), ShapeError);
    CHECK_THROWS_AS(slice1d(Tensor::zeros({4}), 2, 3), ShapeError);

    // mixing two tapes is a contract error
    TapeD t1, t2;
    auto a = t1.leaf(Tensor::zeros({2}));
    auto b = t2.leaf(Tensor::zeros({2}));
    CHECK_THROWS_AS(add(a, b), ContractError);
}

TEST_CASE("tensors: constants never appear as differentiated leaves") {
    TapeD tape;
    auto fixed = tape.leaf(Tensor::from({2.0}, {1}), /*requires_grad=*/false);
    CHECK_FALSE(fixed.on_tape());
    auto x = tape.leaf(Tensor::from({3.0}, {1}));
    auto loss = sum(mul(fixed, x));
    tape.backward(loss);
    CHECK(tape.grad(x).at(0) == doctest::Approx(2.0));
    CHECK_THROWS_AS(tape.grad(fixed), ContractError);
}
