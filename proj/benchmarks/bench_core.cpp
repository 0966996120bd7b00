#include <benchmark/benchmark.h>

#include "sdebnn/brownian.hpp"
#include "sdebnn/config.hpp"
#include "sdebnn/elbo.hpp"
#include "sdebnn/runner.hpp"
#include "sdebnn/tasks.hpp"

using namespace sdebnn;

namespace {

Tensor random_tensor(std::uint64_t seed, std::vector<std::size_t> shape) {
    std::vector<double> v(Tensor::num_from(shape));
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = 2.0 * uniform01(hash_mix(seed, i)) - 1.0;
    return Tensor::from(std::move(v), std::move(shape));
}

void BM_AffineForwardBackward(benchmark::State& state) {
    const std::size_t B = 64, in = static_cast<std::size_t>(state.range(0)), out = in;
    auto x = random_tensor(1, {B, in});
    for (auto _ : state) {
        TapeD tape;
        auto W = tape.leaf(random_tensor(2, {in, out}));
        auto b = tape.leaf(random_tensor(3, {out}));
        auto loss = sum_sq(affine(x, W, b));
        tape.backward(loss);
        benchmark::DoNotOptimize(tape.grad(W).at(0));
    }
    state.SetItemsProcessed(state.iterations() * B * in * out);
}
BENCHMARK(BM_AffineForwardBackward)->Arg(32)->Arg(128)->Arg(512);

void BM_Conv2dForwardBackward(benchmark::State& state) {
    const std::size_t B = 16, C = 4, H = 14, W = 14, O = 32;
    auto x = random_tensor(4, {B, C, H, W});
    for (auto _ : state) {
        TapeD tape;
        auto k = tape.leaf(random_tensor(5, {O, C, 3, 3}));
        auto loss = sum_sq(conv2d(x, k, 1, 1));
        tape.backward(loss);
        benchmark::DoNotOptimize(tape.grad(k).at(0));
    }
    state.SetItemsProcessed(state.iterations() * B * O * C * 9 * H * W);
}
BENCHMARK(BM_Conv2dForwardBackward);

void BM_BrownianIncrement(benchmark::State& state) {
    const std::size_t dim = static_cast<std::size_t>(state.range(0));
    std::uint64_t seed = 0;
    for (auto _ : state) {
        BrownianPath path(++seed, dim, 1.0, 2.0);
        // a non-dyadic query forces a full-depth descent
        benchmark::DoNotOptimize(path.increment(1.0, 1.05).at(0));
    }
    state.SetItemsProcessed(state.iterations() * dim);
}
BENCHMARK(BM_BrownianIncrement)->Arg(64)->Arg(2048);

void BM_ToySolveFixed(benchmark::State& state) {
    RunConfig cfg = preset("paper-toy");
    cfg.model.fx_hidden = 32;
    auto model = build_model<double>(cfg, 1);
    ToyRegressionConfig dcfg;
    dcfg.n = 50;
    auto set = make_toy_regression<double>(dcfg);
    std::vector<std::size_t> ids(50);
    for (std::size_t i = 0; i < 50; ++i) ids[i] = i;
    auto batch = toy_batch(set, ids, cfg.geometry());

    std::uint64_t seed = 0;
    for (auto _ : state) {
        auto bound = model.bind(nullptr);
        auto field = model.make_field(bound, batch.x0);
        auto diffusion = model.make_diffusion();
        BrownianPath path(++seed, model.hyper().dim(), cfg.solver.t0, cfg.solver.T);
        auto rep = solve<double>(*field, *diffusion, &path,
                                 model.initial_state(batch.x0, bound), cfg.solver);
        benchmark::DoNotOptimize(rep.final_state.kl.value());
    }
}
BENCHMARK(BM_ToySolveFixed);

void BM_ElboTrainStepToy(benchmark::State& state) {
    RunConfig cfg = preset("paper-toy");
    auto model = build_model<double>(cfg, 1);
    ToyRegressionConfig dcfg;
    dcfg.n = 50;
    auto set = make_toy_regression<double>(dcfg);
    std::vector<std::size_t> ids(50);
    for (std::size_t i = 0; i < 50; ++i) ids[i] = i;
    auto batch = toy_batch(set, ids, cfg.geometry());

    std::uint64_t epoch = 0;
    for (auto _ : state) {
        auto res = elbo_batch(model, batch, cfg.train, cfg.solver, ++epoch, true);
        benchmark::DoNotOptimize(res.metrics.loss);
    }
}
BENCHMARK(BM_ElboTrainStepToy);

}  // namespace

BENCHMARK_MAIN();
