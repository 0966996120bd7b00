#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "sdebnn/elbo.hpp"
#include "sdebnn/model.hpp"
#include "sdebnn/tasks.hpp"
#include "sdebnn/train.hpp"
#include "support/oracles.hpp"

using namespace sdebnn;

namespace {

ModelGeometry tiny_toy_geometry() {
    ModelGeometry g;
    g.kind = BlockKind::dense;
    g.input_dim = 1;
    g.augment_dim = 1;
    g.fx_hidden = 3;
    g.fw_hidden = {4};
    g.head = HeadKind::gaussian;
    return g;
}

SolverConfig toy_solver(int steps = 8) {
    SolverConfig sc;
    sc.method = SolverMethod::midpoint;
    sc.mode = SolverMode::fixed;
    sc.steps = steps;
    sc.t0 = 1.0;
    sc.T = 2.0;
    return sc;
}

SdeBnnModel tiny_model(std::uint64_t seed = 3, Variant v = Variant::nesterov_skip) {
    PriorConfig prior;
    prior.sigma = 0.3;
    DynamicsConfig dyn;
    dyn.variant = v;
    dyn.activation = ActivationKind::swish;
    return SdeBnnModel(tiny_toy_geometry(), prior, PosteriorForm::integrate_fq, dyn, seed);
}

BatchT<double> tiny_batch() {
    ToyRegressionConfig cfg;
    cfg.n = 6;
    cfg.seed = 9;
    auto set = make_toy_regression<double>(cfg);
    std::vector<std::size_t> ids = {0, 1, 2, 3, 4, 5};
    return toy_batch(set, ids, tiny_toy_geometry());
}

/// Pins NN_phi to c*w for a model whose posterior net has no hidden layer.
void pin_linear_phi(SdeBnnModel& model, double c) {
    auto& W = model.param("phi.W0");
    const std::size_t d = model.hyper().dim();
    REQUIRE(W.shape == std::vector<std::size_t>{d + 1, d});
    std::fill(W.value.begin(), W.value.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) W.value[i * d + i] = c;
    auto& b = model.param("phi.b0");
    std::fill(b.value.begin(), b.value.end(), 0.0);
}

}  // namespace

TEST_CASE("kl_integrand: zero gap, scalar arithmetic, sigma domain error") {
    // NN == -2w pins f_q == f_p.
    const std::size_t d = 3;
    Mlp net;
    {
        std::vector<double> Wv((d + 1) * d, 0.0);
        for (std::size_t i = 0; i < d; ++i) Wv[i * d + i] = -2.0;
        net.W.push_back(Tensor::from(std::move(Wv), {d + 1, d}));
        net.b.push_back(Tensor::zeros({d}));
    }
    PriorConfig prior;
    prior.sigma = 0.25;
    auto w = Tensor::from({0.5, -1.0, 2.0}, {d});
    auto zero = kl_integrand(w, 1.3, net, prior, PosteriorForm::integrate_fq);
    CHECK(zero.value() == 0.0);

    // constant gap 0.2 with sigma 0.1: 0.5 * (0.2/0.1)^2 = 2.0
    Mlp bias_net;
    bias_net.W.push_back(Tensor::zeros({2, 1}));
    bias_net.b.push_back(Tensor::from({0.2}, {1}));
    PriorConfig p2;
    p2.sigma = 0.1;
    auto w0 = Tensor::zeros({1});
    auto v = kl_integrand(w0, 1.0, bias_net, p2, PosteriorForm::integrate_fq);
    CHECK(v.value() == doctest::Approx(2.0).epsilon(1e-12));

    PriorConfig bad;
    bad.sigma = 0.0;
    CHECK_THROWS_AS(kl_integrand(w0, 1.0, bias_net, bad, PosteriorForm::integrate_fq),
                    NumericDomainError);
}

TEST_CASE("kl accumulation matches the quadrature oracle on a linear path") {
    // integrate_nn with a bias-only net: dw = c exactly, so w(t) = w0 + c(t-1)
    // and u(t) = (c + w(t))/sigma is linear in t. Compare the solver's kl_acc
    // against fine trapezoid quadrature of the closed-form integrand.
    auto model = tiny_model(17);
    ModelGeometry geom = tiny_toy_geometry();
    geom.fw_hidden = {};  // single affine layer: bias-only pinning gives NN == c
    SdeBnnModel m(geom, PriorConfig{0.5, 0}, PosteriorForm::integrate_nn,
                  model.dynamics(), 17);
    const std::size_t d = m.hyper().dim();
    const double c = 0.3;
    {
        auto& W = m.param("phi.W0");
        std::fill(W.value.begin(), W.value.end(), 0.0);
        auto& b = m.param("phi.b0");
        std::fill(b.value.begin(), b.value.end(), c);
        auto& w0p = m.param("w0");
        for (std::size_t i = 0; i < d; ++i) w0p.value[i] = 0.05;
    }

    auto batch = tiny_batch();
    TrainConfig tc;
    tc.kl_coef = 1.0;
    tc.mc_samples = 1;
    tc.seed = 4;
    auto sc = toy_solver(20);

    // Noise-free weight channel: solve with sigma>0 in the prior (kl needs
    // it) but a zero diffusion path cannot be configured through the model,
    // so instead compare against quadrature along the *stochastic* trajectory
    // recorded by the solver... keep it deterministic by replaying the exact
    // w grid: with dw = c the drift ignores w, so even with noise the kl
    // integrand along the solved path uses the realized w values. Use the
    // plain report states via a manual fixed-step solve.
    auto bound = m.bind(nullptr);
    auto field = m.make_field(bound, batch.x0);
    auto diffusion = m.make_diffusion();
    BrownianPathT<double> path(99, d, sc.t0, sc.T);
    auto rep = solve<double>(*field, *diffusion, &path, m.initial_state(batch.x0, bound), sc);

    // Oracle: recompute w stage values of the stochastic midpoint scheme and
    // trapezoid-integrate is not applicable; instead rerun with the noise
    // suppressed by comparing against the analytic integral for sigma -> the
    // deterministic part. Simplest honest check: zero-noise replay.
    struct ZeroDiff final : DiffusionField {
        std::size_t dim() const override { return 0; }
        Tensor apply(const JointStateT<double>&, double, const Tensor& dW) override {
            return dW;
        }
    } no_noise;
    auto field2 = m.make_field(bound, batch.x0);
    auto rep2 = solve<double>(*field2, no_noise, nullptr,
                              m.initial_state(batch.x0, bound), sc);

    // closed form: w_i(t) = 0.05 + c (t-1); u_i = (c + w_i)/sigma
    const double sigma = 0.5;
    auto integrand = [&](double t) {
        const double wi = 0.05 + c * (t - 1.0);
        const double u = (c + wi) / sigma;
        return 0.5 * u * u * static_cast<double>(d);
    };
    const int nq = 200000;
    double quad = 0;
    for (int i = 0; i < nq; ++i) {
        const double a = 1.0 + static_cast<double>(i) / nq;
        const double b = 1.0 + static_cast<double>(i + 1) / nq;
        quad += 0.5 * (integrand(a) + integrand(b)) * (b - a);
    }
    CHECK(std::abs(rep2.final_state.kl.value() - quad) < 1e-3 * quad);
    CHECK(rep.final_state.kl.value() > 0.0);  // noisy run accumulates too
}

TEST_CASE("elbo: kl_coef 0 reduces the loss to the mean NLL") {
    auto model = tiny_model();
    auto batch = tiny_batch();
    TrainConfig tc;
    tc.kl_coef = 0.0;
    tc.mc_samples = 2;
    tc.seed = 21;
    auto res = elbo_batch(model, batch, tc, toy_solver(), 0, false);
    CHECK(res.metrics.loss == doctest::Approx(res.metrics.nll).epsilon(1e-15));
    CHECK(res.metrics.kl > 0.0);  // reported even when not in the loss
}

TEST_CASE("elbo: uniform categorical head gives ln K") {
    ModelGeometry g;
    g.kind = BlockKind::conv;
    g.input_dim = 1;
    g.augment_dim = 1;
    g.fx_hidden = 2;
    g.height = 4;
    g.width = 4;
    g.fw_hidden = {4};
    g.head = HeadKind::categorical;
    g.num_classes = 10;
    PriorConfig prior;
    prior.sigma = 0.1;
    DynamicsConfig dyn;
    dyn.variant = Variant::nesterov_skip;
    SdeBnnModel model(g, prior, PosteriorForm::integrate_fq, dyn, 5);
    std::fill(model.param("head.W").value.begin(), model.param("head.W").value.end(), 0.0);
    std::fill(model.param("head.b").value.begin(), model.param("head.b").value.end(), 0.0);

    BatchT<double> batch;
    batch.x0 = Tensor::from(oracles::random_vector(1, 3 * 2 * 4 * 4), {3, 2, 4, 4});
    batch.labels = {1, 7, 3};
    batch.example_ids = {0, 1, 2};
    TrainConfig tc;
    tc.mc_samples = 1;
    auto res = elbo_batch(model, batch, tc, toy_solver(4), 0, false);
    CHECK(res.metrics.nll == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("elbo: bit-identical under reruns; sample-0 seed ignores mc_samples") {
    auto model = tiny_model();
    auto batch = tiny_batch();
    TrainConfig tc;
    tc.kl_coef = 0.01;
    tc.mc_samples = 2;
    tc.seed = 33;
    auto a = elbo_batch(model, batch, tc, toy_solver(), 3, true);
    auto b = elbo_batch(model, batch, tc, toy_solver(), 3, true);
    CHECK(a.metrics.loss == b.metrics.loss);
    CHECK(a.metrics.kl == b.metrics.kl);
    for (std::size_t p = 0; p < a.grads.size(); ++p)
        for (std::size_t j = 0; j < a.grads[p].size(); ++j)
            CHECK(a.grads[p][j] == b.grads[p][j]);

    // The path seed of a given sample does not depend on how many samples run.
    CHECK(elbo_path_seed(33, 3, 0, 0, SeedMode::per_sample) ==
          elbo_path_seed(33, 3, 99, 0, SeedMode::per_sample));
    CHECK(elbo_path_seed(33, 3, 4, 1, SeedMode::per_example) !=
          elbo_path_seed(33, 3, 5, 1, SeedMode::per_example));
}

TEST_CASE("elbo: per-example seeding makes the loss batch-order invariant") {
    auto model = tiny_model();
    ToyRegressionConfig cfg;
    cfg.n = 6;
    cfg.seed = 9;
    auto set = make_toy_regression<double>(cfg);
    TrainConfig tc;
    tc.kl_coef = 0.05;
    tc.mc_samples = 2;
    tc.seed = 8;
    tc.seed_mode = SeedMode::per_example;

    auto loss_for = [&](std::vector<std::size_t> ids) {
        auto batch = toy_batch(set, ids, tiny_toy_geometry());
        return elbo_batch(model, batch, tc, toy_solver(), 2, false).metrics.loss;
    };
    const double l1 = loss_for({0, 1, 2, 3, 4, 5});
    const double l2 = loss_for({5, 3, 1, 0, 4, 2});
    CHECK(std::abs(l1 - l2) < 1e-12);
}

TEST_CASE("elbo: sharded batches reproduce the unsharded loss and gradients") {
    auto model = tiny_model();
    auto batch = tiny_batch();
    TrainConfig tc;
    tc.kl_coef = 0.02;
    tc.mc_samples = 1;
    tc.seed = 12;
    auto whole = elbo_batch(model, batch, tc, toy_solver(), 1, true);
    tc.shards = 3;
    auto sharded = elbo_batch(model, batch, tc, toy_solver(), 1, true);
    CHECK(std::abs(whole.metrics.loss - sharded.metrics.loss) < 1e-12);
    CHECK(std::abs(whole.metrics.kl - sharded.metrics.kl) < 1e-12);
    for (std::size_t p = 0; p < whole.grads.size(); ++p)
        for (std::size_t j = 0; j < whole.grads[p].size(); ++j)
            CHECK(std::abs(whole.grads[p][j] - sharded.grads[p][j]) < 1e-10);
}

TEST_CASE("elbo: pinned posterior keeps kl at exactly zero along the solve") {
    ModelGeometry g = tiny_toy_geometry();
    g.fw_hidden = {};  // single affine layer so NN = -2w is representable
    PriorConfig prior;
    prior.sigma = 0.3;
    DynamicsConfig dyn;
    dyn.variant = Variant::nesterov_skip;
    SdeBnnModel model(g, prior, PosteriorForm::integrate_fq, dyn, 3);
    pin_linear_phi(model, -2.0);

    auto batch = tiny_batch();
    TrainConfig tc;
    tc.kl_coef = 1.0;
    tc.mc_samples = 3;
    tc.seed = 5;
    auto res = elbo_batch(model, batch, tc, toy_solver(16), 0, false);
    CHECK(res.metrics.kl == 0.0);
}

TEST_CASE("elbo gradient matches finite differences under a frozen schedule") {
    auto model = tiny_model(23);
    auto batch = tiny_batch();
    TrainConfig tc;
    tc.kl_coef = 0.05;
    tc.mc_samples = 1;
    tc.seed = 77;
    auto sc = toy_solver(6);

    auto res = elbo_batch(model, batch, tc, sc, 0, true);

    // FD oracle over a handful of coordinates in every parameter block.
    int checked = 0;
    for (std::size_t p = 0; p < model.params().size(); ++p) {
        auto& param = model.params()[p];
        const std::size_t stride = std::max<std::size_t>(param.value.size() / 3, 1);
        for (std::size_t j = 0; j < param.value.size(); j += stride) {
            const double save = param.value[j];
            const double step = 1e-5;
            param.value[j] = save + step;
            const double fp = elbo_batch(model, batch, tc, sc, 0, false).metrics.loss;
            param.value[j] = save - step;
            const double fm = elbo_batch(model, batch, tc, sc, 0, false).metrics.loss;
            param.value[j] = save;
            const double fd = (fp - fm) / (2 * step);
            if (std::abs(fd) < 1e-9 && std::abs(res.grads[p][j]) < 1e-9) continue;
            CHECK(oracles::rel_err(res.grads[p][j], fd) < 1e-3);
            ++checked;
        }
    }
    CHECK(checked >= 10);
}

TEST_CASE("adam: iterates match the scalar reference to 1e-10") {
    std::vector<ParamT<double>> params(1);
    params[0].name = "theta";
    params[0].shape = {1};
    params[0].value = {0.0};
    AdamOptimizer<double> opt(0.9, 0.999, 1e-8);
    oracles::ScalarAdam ref{1e-2, 0.9, 0.999, 1e-8};
    double theta_ref = 0.0;
    for (int it = 0; it < 200; ++it) {
        const double g = params[0].value[0] - 3.0;  // d/dtheta 0.5 (theta-3)^2
        std::vector<std::vector<double>> grads = {{g}};
        opt.step(params, grads, 1e-2);
        const double g_ref = theta_ref - 3.0;
        theta_ref = ref.step(theta_ref, g_ref);
        CHECK(std::abs(params[0].value[0] - theta_ref) < 1e-10);
    }
    CHECK(std::abs(params[0].value[0] - 3.0) < 3.0);  // moving toward the optimum
}

TEST_CASE("train config: lr schedule semantics and validation") {
    TrainConfig tc;
    tc.lr_schedule = {{0, 1e-3}};
    CHECK(tc.learning_rate(0) == 1e-3);
    CHECK(tc.learning_rate(999) == 1e-3);
    tc.lr_schedule = {{0, 1e-3}, {50, 3e-3}};
    CHECK(tc.learning_rate(49) == 1e-3);
    CHECK(tc.learning_rate(50) == 3e-3);
    CHECK(tc.learning_rate(120) == 3e-3);

    TrainConfig bad;
    bad.kl_coef = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    TrainConfig bad2;
    bad2.lr_schedule = {{5, 1e-3}};
    CHECK_THROWS_AS(bad2.validate(), ConfigError);
}

TEST_CASE("train: epoch rows, zero-epoch row, and deterministic reruns") {
    ToyRegressionConfig dcfg;
    dcfg.n = 24;
    dcfg.seed = 1;
    auto train_set = make_toy_regression<double>(dcfg);
    dcfg.seed = 2;
    auto test_set = make_toy_regression<double>(dcfg);
    ToyTaskT<double> task(train_set, test_set, tiny_toy_geometry());

    TrainConfig tc;
    tc.kl_coef = 0.0;
    tc.batch_size = 12;
    tc.epochs = 2;
    tc.mc_samples = 2;
    tc.eval_mc_samples = 30;
    tc.seed = 99;
    auto sc = toy_solver(6);

    auto m1 = tiny_model(41);
    auto log1 = train(m1, task, tc, sc);
    REQUIRE(log1.rows.size() == 2);
    for (const auto& r : log1.rows) {
        CHECK(std::isfinite(r.train_loss));
        CHECK(std::isfinite(r.test_nll));
        CHECK(r.mean_nfe_f == 12.0);  // 6 midpoint steps
    }

    auto m2 = tiny_model(41);
    auto log2 = train(m2, task, tc, sc);
    for (std::size_t i = 0; i < log1.rows.size(); ++i) {
        CHECK(log1.rows[i].train_loss == log2.rows[i].train_loss);
        CHECK(log1.rows[i].train_kl == log2.rows[i].train_kl);
        CHECK(log1.rows[i].test_acc == log2.rows[i].test_acc);
        CHECK(log1.rows[i].test_nll == log2.rows[i].test_nll);
        CHECK(log1.rows[i].mean_nfe_f == log2.rows[i].mean_nfe_f);
    }

    TrainConfig tc0 = tc;
    tc0.epochs = 0;
    auto m3 = tiny_model(41);
    auto log0 = train(m3, task, tc0, sc);
    REQUIRE(log0.rows.size() == 1);
    CHECK(std::isnan(log0.rows[0].train_loss));
    CHECK(std::isfinite(log0.rows[0].test_nll));
}

TEST_CASE("checkpoint: round-trip and mismatch detection") {
    auto model = tiny_model(7);
    const std::string path = "/tmp/sdebnn_test_ckpt.bin";
    save_checkpoint(path, checkpoint_from_model(model, "{\"k\":1}"));
    auto data = load_checkpoint(path);
    CHECK(data.config_json == "{\"k\":1}");

    auto model2 = tiny_model(8);  // same geometry, different init
    load_params_into(model2, data);
    for (std::size_t p = 0; p < model.params().size(); ++p)
        for (std::size_t j = 0; j < model.params()[p].value.size(); ++j)
            CHECK(model.params()[p].value[j] == model2.params()[p].value[j]);

    // different geometry -> descriptive error
    ModelGeometry g2 = tiny_toy_geometry();
    g2.fx_hidden = 5;
    SdeBnnModel other(g2, PriorConfig{0.3, 0}, PosteriorForm::integrate_fq,
                      DynamicsConfig{}, 3);
    CHECK_THROWS_AS(load_params_into(other, data), FormatError);
    std::filesystem::remove(path);
}

TEST_CASE("auc_over_epochs: flat, triangle, and domination") {
    TrainingLog flat;
    for (int e = 0; e < 5; ++e) {
        TrainingLogRow r;
        r.epoch = e;
        r.test_acc = 0.9;
        flat.rows.push_back(r);
    }
    CHECK(auc_over_epochs(flat) == doctest::Approx(0.9).epsilon(1e-12));

    TrainingLog tri;
    for (int e = 0; e <= 10; ++e) {
        TrainingLogRow r;
        r.epoch = e;
        r.test_acc = e / 10.0;
        tri.rows.push_back(r);
    }
    CHECK(auc_over_epochs(tri) == doctest::Approx(0.5).epsilon(1e-12));

    // pointwise domination implies AUC ordering
    TrainingLog hi = tri;
    for (auto& r : hi.rows) r.test_acc = std::min(1.0, r.test_acc + 0.05);
    CHECK(auc_over_epochs(hi) >= auc_over_epochs(tri));

    // uniform re-indexing leaves the normalized area unchanged
    TrainingLog reindexed = tri;
    for (auto& r : reindexed.rows) r.epoch *= 7;
    CHECK(auc_over_epochs(reindexed) == doctest::Approx(auc_over_epochs(tri)).epsilon(1e-12));

    TrainingLog one;
    one.rows.push_back({});
    CHECK_THROWS_AS(auc_over_epochs(one), ContractError);
}
