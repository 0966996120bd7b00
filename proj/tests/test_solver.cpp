#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "sdebnn/solver.hpp"

using namespace sdebnn;

namespace {

// Scalar drift acting on the w channel only.
struct ScalarField final : DriftField {
    std::function<double(double, double)> f;
    explicit ScalarField(std::function<double(double, double)> fn) : f(std::move(fn)) {}
    JointStateT<double> evaluate(const JointStateT<double>& s, double t) override {
        JointStateT<double> d;
        d.w = Tensor::from({f(s.w.at(0), t)}, {1});
        return d;
    }
};

struct ZeroField final : DriftField {
    JointStateT<double> evaluate(const JointStateT<double>& s, double) override {
        JointStateT<double> d;
        d.w = Tensor::zeros(s.w.shape());
        return d;
    }
};

struct ConstDiffusion final : DiffusionField {
    double sigma;
    std::size_t d;
    ConstDiffusion(double s, std::size_t dim) : sigma(s), d(dim) {}
    std::size_t dim() const override { return d; }
    Tensor apply(const JointStateT<double>&, double, const Tensor& dW) override {
        return scale(dW, sigma);
    }
};

struct NoDiffusion final : DiffusionField {
    std::size_t dim() const override { return 0; }
    Tensor apply(const JointStateT<double>&, double, const Tensor& dW) override {
        return dW;
    }
};

JointStateT<double> scalar_state(double w0) {
    JointStateT<double> s;
    s.w = Tensor::from({w0}, {1});
    return s;
}

SolverConfig fixed_cfg(SolverMethod m, int steps, double t0 = 0.0, double T = 1.0) {
    SolverConfig c;
    c.method = m;
    c.mode = SolverMode::fixed;
    c.steps = steps;
    c.t0 = t0;
    c.T = T;
    return c;
}

}  // namespace

TEST_CASE("solve: zero drift and zero diffusion is the constant path") {
    ZeroField f;
    NoDiffusion g;
    for (auto method : {SolverMethod::euler_maruyama, SolverMethod::midpoint}) {
        auto rep = solve<double>(f, g, nullptr, scalar_state(1.25), fixed_cfg(method, 7));
        CHECK(rep.final_state.w.at(0) == 1.25);
    }
}

TEST_CASE("solve: euler on dw=-w dt matches the geometric recursion") {
    ScalarField f([](double w, double) { return -w; });
    NoDiffusion g;
    auto rep = solve<double>(f, g, nullptr, scalar_state(1.0),
                             fixed_cfg(SolverMethod::euler_maruyama, 10));
    const double want = std::pow(0.9, 10);  // 0.34867844...
    CHECK(rep.final_state.w.at(0) == doctest::Approx(want).epsilon(1e-12));
    CHECK(rep.nfe_f == 10);
    CHECK(rep.nfe_f_path == 10);
}

TEST_CASE("solve: one midpoint step of dw=-w dt is the hand-expanded update") {
    ScalarField f([](double w, double) { return -w; });
    NoDiffusion g;
    auto rep = solve<double>(f, g, nullptr, scalar_state(1.0),
                             fixed_cfg(SolverMethod::midpoint, 1, 0.0, 0.1));
    CHECK(rep.final_state.w.at(0) == doctest::Approx(0.905).epsilon(1e-14));
}

TEST_CASE("solve: fixed-step NFE accounting is exact") {
    ScalarField f([](double w, double) { return -w; });
    NoDiffusion g;
    for (int steps : {1, 5, 20}) {
        auto mid = solve<double>(f, g, nullptr, scalar_state(1.0),
                                 fixed_cfg(SolverMethod::midpoint, steps));
        CHECK(mid.nfe_f == 2 * steps);
        CHECK(mid.nfe_g == 0);
        CHECK(mid.accepted_steps == steps);
        CHECK(mid.rejected_steps == 0);
        CHECK(static_cast<int>(mid.step_log.size()) == steps);
    }
}

TEST_CASE("solve: deterministic replay is bit-identical") {
    ScalarField f([](double w, double t) { return -w + 0.3 * std::sin(t); });
    ConstDiffusion g(0.2, 1);
    auto run = [&]() {
        BrownianPath path(1234, 1, 0.0, 1.0);
        return solve<double>(f, g, &path, scalar_state(0.5),
                             fixed_cfg(SolverMethod::midpoint, 20));
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(r1.final_state.w.at(0) == r2.final_state.w.at(0));
    CHECK(r1.nfe_f == r2.nfe_f);
    CHECK(r1.nfe_g == r2.nfe_g);
    REQUIRE(r1.step_log.size() == r2.step_log.size());
    for (std::size_t i = 0; i < r1.step_log.size(); ++i) {
        CHECK(r1.step_log[i].t == r2.step_log[i].t);
        CHECK(r1.step_log[i].h == r2.step_log[i].h);
    }
}

TEST_CASE("solve: OU weak convergence of the terminal variance") {
    // dw = -w dt + sigma dB, w0 = 0: Var[w_T] = sigma^2 (1 - e^{-2T}) / 2.
    const double sigma = 0.2, T = 1.0;
    ScalarField f([](double w, double) { return -w; });
    ConstDiffusion g(sigma, 1);
    const int n_paths = 10000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n_paths; ++i) {
        BrownianPath path(static_cast<std::uint64_t>(i) + 77, 1, 0.0, T);
        auto rep = solve<double>(f, g, &path, scalar_state(0.0),
                                 fixed_cfg(SolverMethod::midpoint, 20, 0.0, T));
        const double w = rep.final_state.w.at(0);
        sum += w;
        sumsq += w * w;
    }
    const double mean = sum / n_paths;
    const double var = sumsq / n_paths - mean * mean;
    const double analytic = sigma * sigma * (1.0 - std::exp(-2.0 * T)) / 2.0;
    CHECK(std::abs(var - analytic) < 0.05 * analytic);
}

TEST_CASE("solve: midpoint shows order-2 step halving on dw=-w dt") {
    ScalarField f([](double w, double) { return -w; });
    NoDiffusion g;
    const double exact = std::exp(-1.0);
    auto err_at = [&](int steps) {
        auto rep = solve<double>(f, g, nullptr, scalar_state(1.0),
                                 fixed_cfg(SolverMethod::midpoint, steps));
        return std::abs(rep.final_state.w.at(0) - exact);
    };
    const double ratio = err_at(10) / err_at(20);
    CHECK(ratio > 3.2);
    CHECK(ratio < 4.8);
}

TEST_CASE("adaptive_controller: boundary cases from the formula") {
    {
        auto [accept, next_h] = adaptive_controller(0.0, 0.1, 1e-3, 1e-3, 1.0);
        CHECK(accept);
        CHECK(next_h == doctest::Approx(0.5));  // growth clamp: 5h
    }
    {
        const double tol = 1e-3 + 1e-3 * 2.0;
        auto [accept, next_h] = adaptive_controller(tol, 0.1, 1e-3, 1e-3, 2.0);
        CHECK(accept);
        CHECK(next_h == doctest::Approx(0.09));  // 0.9h at err == tol
    }
    {
        auto [accept, next_h] = adaptive_controller(1.0, 0.1, 1e-6, 1e-6, 1.0);
        CHECK_FALSE(accept);
        CHECK(next_h == doctest::Approx(0.02));  // shrink clamp: 0.2h
    }
}

TEST_CASE("solve: adaptive endpoint on the linear ODE is within tolerance") {
    ScalarField f([](double w, double) { return -w; });
    NoDiffusion g;
    SolverConfig cfg;
    cfg.mode = SolverMode::adaptive;
    cfg.method = SolverMethod::midpoint;
    cfg.atol = 1e-5;
    cfg.rtol = 1e-5;
    cfg.t0 = 0.0;
    cfg.T = 1.0;
    auto rep = solve<double>(f, g, nullptr, scalar_state(1.0), cfg);
    const double exact = std::exp(-1.0);
    CHECK(std::abs(rep.final_state.w.at(0) - exact) < cfg.atol + cfg.rtol * exact);
    CHECK(rep.accepted_steps > 0);
    CHECK(rep.rejected_steps >= 0);
    CHECK(rep.nfe_f <= cfg.max_nfe);
    // retained path = two half steps per accepted step, 2 evals each
    CHECK(rep.nfe_f_path == 4 * rep.accepted_steps);
    CHECK(static_cast<long>(rep.step_log.size()) == 2 * rep.accepted_steps);
}

TEST_CASE("solve: adaptive endpoint with noise stays consistent under replay") {
    ScalarField f([](double w, double) { return -w; });
    ConstDiffusion g(0.1, 1);
    SolverConfig cfg;
    cfg.mode = SolverMode::adaptive;
    cfg.method = SolverMethod::midpoint;
    cfg.atol = 1e-3;
    cfg.rtol = 1e-3;
    cfg.t0 = 0.0;
    cfg.T = 1.0;
    BrownianPath path(555, 1, 0.0, 1.0);
    auto rep = solve<double>(f, g, &path, scalar_state(1.0), cfg);

    // Replaying the frozen schedule over the same path reproduces the endpoint.
    BrownianPath path2(555, 1, 0.0, 1.0);
    ScalarField f2([](double w, double) { return -w; });
    auto end = replay<double>(f2, g, &path2, scalar_state(1.0), rep.step_log, cfg.method);
    CHECK(end.w.at(0) == rep.final_state.w.at(0));
}

TEST_CASE("solve: NFE budget raises a budget error") {
    ScalarField f([](double w, double) { return -w; });
    NoDiffusion g;
    auto cfg = fixed_cfg(SolverMethod::midpoint, 100);
    cfg.max_nfe = 10;
    CHECK_THROWS_AS(solve<double>(f, g, nullptr, scalar_state(1.0), cfg), NfeBudgetError);
}

TEST_CASE("solve: divergence raises an error carrying the failing time") {
    ScalarField f([](double w, double) { return w * w; });
    NoDiffusion g;
    try {
        solve<double>(f, g, nullptr, scalar_state(1e200),
                      fixed_cfg(SolverMethod::euler_maruyama, 10));
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.t > 0.0);
        CHECK(e.t <= 1.0);
    }
}

TEST_CASE("solve: non-finite field evaluations surface as divergence") {
    // exp(w) overflows, so the activation domain check fires inside the
    // field; the solver reports it as divergence at the failing time
    ScalarField f([](double w, double) {
        return apply_activation_scalar(std::exp(w), ActivationKind::tanh);
    });
    NoDiffusion g;
    try {
        solve<double>(f, g, nullptr, scalar_state(800.0),
                      fixed_cfg(SolverMethod::euler_maruyama, 4));
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.t >= 0.0);
        CHECK(e.t < 1.0);
    }
}

TEST_CASE("solver config validation") {
    SolverConfig c;
    c.t0 = 2.0;
    c.T = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    SolverConfig c2;
    c2.mode = SolverMode::fixed;
    c2.steps = 0;
    CHECK_THROWS_AS(c2.validate(), ConfigError);
    SolverConfig c3;
    c3.mode = SolverMode::adaptive;
    c3.atol = -1.0;
    CHECK_THROWS_AS(c3.validate(), ConfigError);
}
