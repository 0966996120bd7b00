#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sdebnn/brownian.hpp"
#include "sdebnn/common.hpp"
#include "sdebnn/state.hpp"
#include "sdebnn/tensor.hpp"

namespace sdebnn {

enum class SolverMethod { euler_maruyama, midpoint };
enum class SolverMode { fixed, adaptive };

/// How the step-doubling estimate feeds the accept test. per_unit_time keeps
/// the accumulated error near tol (right for deterministic dynamics);
/// per_step compares the raw local estimate, the convention ML SDE solvers
/// use, and what the noisy presets run with: the stochastic local error is
/// O(h^{3/2}), so per-unit-time control would force very small steps.
enum class ErrorNorm { per_unit_time, per_step };

inline const char* to_string(SolverMethod m) {
    return m == SolverMethod::euler_maruyama ? "euler_maruyama" : "midpoint";
}
inline const char* to_string(SolverMode m) {
    return m == SolverMode::fixed ? "fixed" : "adaptive";
}

struct SolverConfig {
    SolverMethod method = SolverMethod::midpoint;
    SolverMode mode = SolverMode::fixed;
    int steps = 20;          // fixed mode
    double atol = 1e-3;      // adaptive mode
    double rtol = 1e-3;      // adaptive mode
    double t0 = 1.0;
    double T = 2.0;
    long max_nfe = 100000;   // budget on total drift evaluations
    double initial_step = 0.0;  // adaptive; 0 -> (T - t0) / 16
    ErrorNorm error_norm = ErrorNorm::per_unit_time;

    void validate() const {
        if (!(t0 < T)) throw ConfigError("solver: need t0 < T");
        if (mode == SolverMode::fixed && steps <= 0)
            throw ConfigError("solver: steps must be positive");
        if (mode == SolverMode::adaptive && (atol <= 0 || rtol <= 0))
            throw ConfigError("solver: atol/rtol must be positive");
        if (max_nfe <= 0) throw ConfigError("solver: max_nfe must be positive");
    }
};

struct FieldSnapshot {
    virtual ~FieldSnapshot() = default;
};

// ---------------------------------------------------------------------------
// Drift field interface. evaluate() must be deterministic given (state, t,
// internal cache state). Fields with evaluation-order-dependent caches expose
// snapshot/restore so the adaptive solver can bracket trial steps, and report
// the cache-visible evaluation count for the parity invariant.
// ---------------------------------------------------------------------------
template <typename Real>
class DriftFieldT {
public:
    virtual ~DriftFieldT() = default;
    virtual JointStateT<Real> evaluate(const JointStateT<Real>& state, Real t) = 0;
    virtual void begin_step() {}
    virtual std::unique_ptr<FieldSnapshot> snapshot() const { return nullptr; }
    virtual void restore(const FieldSnapshot* /*snap*/) {}
    /// Drift evaluations seen by the field's own state machine (== retained
    /// path evaluations once trial steps have been rolled back).
    virtual long cache_evaluations() const { return 0; }
};

template <typename Real>
class DiffusionFieldT {
public:
    virtual ~DiffusionFieldT() = default;
    /// Brownian dimension; 0 means the system is noise-free.
    virtual std::size_t dim() const = 0;
    /// Returns the weight-channel increment g(state, t) * dW.
    virtual TensorT<Real> apply(const JointStateT<Real>& state, Real t,
                                const TensorT<Real>& dW) = 0;
};

struct StepRecord {
    double t;
    double h;
};

template <typename Real>
struct SolverReportT {
    JointStateT<Real> final_state;
    long nfe_f = 0;       // every drift evaluation, including discarded trials
    long nfe_f_path = 0;  // drift evaluations on the retained path only
    long nfe_g = 0;
    long accepted_steps = 0;
    long rejected_steps = 0;
    std::vector<StepRecord> step_log;  // retained update steps, in order
};

/// Step-size controller: accept iff err_est <= atol + rtol * state_norm;
/// next_h = h * clamp(0.9 * sqrt(tol / err), 0.2, 5.0).
inline std::pair<bool, double> adaptive_controller(double err_est, double h,
                                                   double atol, double rtol,
                                                   double state_norm) {
    const double tol = atol + rtol * state_norm;
    const bool accept = err_est <= tol;
    double fac = 5.0;
    if (err_est > 0.0) fac = std::clamp(0.9 * std::sqrt(tol / err_est), 0.2, 5.0);
    return {accept, h * fac};
}

namespace detail {

template <typename Real>
struct StepCounters {
    long nfe_f = 0;
    long nfe_g = 0;
    long max_nfe = 0;
};

template <typename Real>
JointStateT<Real> eval_drift(DriftFieldT<Real>& field, const JointStateT<Real>& s,
                             Real t, StepCounters<Real>& c) {
    if (c.nfe_f >= c.max_nfe)
        throw NfeBudgetError("solver: drift evaluation budget exhausted (max_nfe=" +
                             std::to_string(c.max_nfe) + ")");
    ++c.nfe_f;
    try {
        return field.evaluate(s, t);
    } catch (const NumericDomainError& e) {
        // a blow-up inside the field is the solve diverging
        throw DivergenceError(static_cast<double>(t),
                              "solver: drift evaluation became non-finite at t=" +
                                  std::to_string(static_cast<double>(t)) + " (" +
                                  e.what() + ")");
    }
}

/// One Euler-Maruyama or stochastic-midpoint update over [t, t+h].
template <typename Real>
JointStateT<Real> advance_one(DriftFieldT<Real>& field, DiffusionFieldT<Real>& diffusion,
                              BrownianPathT<Real>* path, const JointStateT<Real>& s,
                              Real t, Real h, SolverMethod method,
                              StepCounters<Real>& c) {
    field.begin_step();
    const bool noisy = diffusion.dim() > 0 && path != nullptr;
    TensorT<Real> dW;
    if (noisy) dW = path->increment(t, t + h);

    if (method == SolverMethod::euler_maruyama) {
        const auto f0 = eval_drift(field, s, t, c);
        auto next = state_add_scaled(s, f0, h);
        if (noisy) {
            ++c.nfe_g;
            next.w = add(next.w, diffusion.apply(s, t, dW));
        }
        return next;
    }

    // Stochastic midpoint: half drift + half noise to the middle, then a full
    // step using the midpoint field values and the same Brownian increment.
    const auto f0 = eval_drift(field, s, t, c);
    auto mid = state_add_scaled(s, f0, h / Real(2));
    if (noisy) {
        ++c.nfe_g;
        mid.w = add(mid.w, scale(diffusion.apply(s, t, dW), Real(0.5)));
    }
    const Real tm = t + h / Real(2);
    const auto fm = eval_drift(field, mid, tm, c);
    auto next = state_add_scaled(s, fm, h);
    if (noisy) {
        ++c.nfe_g;
        next.w = add(next.w, diffusion.apply(mid, tm, dW));
    }
    return next;
}

}  // namespace detail

template <typename Real>
long count_path_evals(const SolverReportT<Real>& rep, SolverMethod method) {
    const long per = method == SolverMethod::midpoint ? 2 : 1;
    return per * static_cast<long>(rep.step_log.size());
}

/// The static step schedule of a fixed-mode config (what solve() would log).
inline std::vector<StepRecord> fixed_step_log(const SolverConfig& cfg) {
    std::vector<StepRecord> log;
    log.reserve(static_cast<std::size_t>(cfg.steps));
    for (int k = 0; k < cfg.steps; ++k) {
        const double tk = cfg.t0 + (cfg.T - cfg.t0) * k / static_cast<double>(cfg.steps);
        const double tk1 =
            cfg.t0 + (cfg.T - cfg.t0) * (k + 1) / static_cast<double>(cfg.steps);
        log.push_back({tk, tk1 - tk});
    }
    return log;
}

// ---------------------------------------------------------------------------
// solve: integrates the augmented system from cfg.t0 to cfg.T. Fixed mode
// takes cfg.steps equal steps. Adaptive mode estimates local error by step
// doubling (one full step against two half steps driven by bridge-split
// Brownian increments) and keeps the fine solution on acceptance; the field
// cache is snapshot/restored around trials so only retained-path evaluations
// reach its state machine.
// ---------------------------------------------------------------------------
template <typename Real>
SolverReportT<Real> solve(DriftFieldT<Real>& field, DiffusionFieldT<Real>& diffusion,
                          BrownianPathT<Real>* path, JointStateT<Real> init,
                          const SolverConfig& cfg) {
    cfg.validate();
    if (diffusion.dim() > 0 && path == nullptr)
        throw ContractError("solve: noisy diffusion requires a Brownian path");

    SolverReportT<Real> rep;
    detail::StepCounters<Real> c;
    c.max_nfe = cfg.max_nfe;
    const Real t0 = static_cast<Real>(cfg.t0), T = static_cast<Real>(cfg.T);
    JointStateT<Real> s = std::move(init);

    if (cfg.mode == SolverMode::fixed) {
        const int N = cfg.steps;
        for (int k = 0; k < N; ++k) {
            const Real tk = t0 + (T - t0) * static_cast<Real>(k) / static_cast<Real>(N);
            const Real tk1 = t0 + (T - t0) * static_cast<Real>(k + 1) / static_cast<Real>(N);
            const Real h = tk1 - tk;
            s = detail::advance_one(field, diffusion, path, s, tk, h, cfg.method, c);
            if (!s.all_finite())
                throw DivergenceError(static_cast<double>(tk1),
                                      "solver: state became non-finite at t=" +
                                          std::to_string(static_cast<double>(tk1)));
            rep.step_log.push_back({static_cast<double>(tk), static_cast<double>(h)});
            ++rep.accepted_steps;
        }
    } else {
        Real t = t0;
        Real h = static_cast<Real>(cfg.initial_step > 0 ? cfg.initial_step
                                                        : (cfg.T - cfg.t0) / 16.0);
        const Real min_h = (T - t0) * Real(1e-12);
        while (t < T) {
            bool final_step = false;
            if (h >= T - t) {
                h = T - t;
                final_step = true;
            }
            if (h < min_h)
                throw DivergenceError(static_cast<double>(t),
                                      "solver: step size underflow at t=" +
                                          std::to_string(static_cast<double>(t)));
            auto snap = field.snapshot();

            // Coarse trial: one step over [t, t+h].
            const auto coarse =
                detail::advance_one(field, diffusion, path, s, t, h, cfg.method, c);
            field.restore(snap.get());

            // Fine trial: two half steps over the same Brownian segment.
            const Real hh = h / Real(2);
            auto fine = detail::advance_one(field, diffusion, path, s, t, hh, cfg.method, c);
            fine = detail::advance_one(field, diffusion, path, fine, t + hh, hh,
                                       cfg.method, c);

            // The KL accumulator is excluded from step control: it is an
            // integral functional that never feeds back into the dynamics,
            // and its quadratic growth would otherwise dominate the estimate.
            const bool finite = fine.all_finite() && coarse.all_finite();
            double err = std::numeric_limits<double>::infinity();
            double norm = 0.0;
            if (finite) {
                JointStateT<Real> fe = fine, ce = coarse;
                fe.kl = TensorT<Real>();
                ce.kl = TensorT<Real>();
                err = state_rms_diff(fe, ce);
                if (cfg.error_norm == ErrorNorm::per_unit_time)
                    err /= static_cast<double>(h);
                norm = state_rms(fe);
            }
            auto [accept, next_h] =
                adaptive_controller(err, static_cast<double>(h), cfg.atol, cfg.rtol, norm);
            if (!finite) {
                accept = false;
                next_h = static_cast<double>(h) * 0.2;
            }

            if (accept) {
                s = std::move(fine);
                rep.step_log.push_back({static_cast<double>(t), static_cast<double>(hh)});
                rep.step_log.push_back(
                    {static_cast<double>(t + hh), static_cast<double>(hh)});
                t = final_step ? T : t + h;
                ++rep.accepted_steps;
            } else {
                field.restore(snap.get());
                ++rep.rejected_steps;
            }
            h = static_cast<Real>(next_h);
        }
    }

    rep.final_state = std::move(s);
    rep.nfe_f = c.nfe_f;
    rep.nfe_g = c.nfe_g;
    rep.nfe_f_path = field.cache_evaluations() > 0 ? field.cache_evaluations()
                                                   : count_path_evals(rep, cfg.method);
    return rep;
}

/// Re-executes a frozen step schedule (no controller, no trials). Used for
/// the differentiable training pass: the Brownian path replays identically
/// and the field cache schedule is reproduced by construction.
template <typename Real>
JointStateT<Real> replay(DriftFieldT<Real>& field, DiffusionFieldT<Real>& diffusion,
                         BrownianPathT<Real>* path, JointStateT<Real> init,
                         const std::vector<StepRecord>& step_log, SolverMethod method,
                         long max_nfe = 1000000) {
    detail::StepCounters<Real> c;
    c.max_nfe = max_nfe;
    JointStateT<Real> s = std::move(init);
    for (const auto& st : step_log) {
        s = detail::advance_one(field, diffusion, path, s, static_cast<Real>(st.t),
                                static_cast<Real>(st.h), method, c);
    }
    return s;
}

using SolverReport = SolverReportT<double>;
using DriftField = DriftFieldT<double>;
using DiffusionField = DiffusionFieldT<double>;

}  // namespace sdebnn
