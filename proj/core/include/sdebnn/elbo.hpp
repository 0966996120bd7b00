#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "sdebnn/brownian.hpp"
#include "sdebnn/model.hpp"
#include "sdebnn/solver.hpp"

namespace sdebnn {

/// How Brownian path seeds are derived. per_sample shares one weight path per
/// Monte Carlo sample across the batch (one augmented solve per sample);
/// per_example keys the path on each example id, which makes the epoch loss
/// exactly invariant to how examples are grouped into batches, at the price
/// of one solve per example.
enum class SeedMode { per_sample, per_example };

inline const char* to_string(SeedMode m) {
    return m == SeedMode::per_sample ? "per_sample" : "per_example";
}

struct TrainConfig {
    double kl_coef = 0.0;
    std::map<int, double> lr_schedule = {{0, 1e-3}};
    int batch_size = 50;
    int epochs = 100;
    int mc_samples = 1;
    std::uint64_t seed = 0;
    SeedMode seed_mode = SeedMode::per_sample;
    int shards = 1;              // batch shards per solve group (determinism: fixed by config)
    int eval_mc_samples = 0;     // 0: mc_samples (classification) / 30 (regression)
    std::size_t eval_subset = 0; // per-epoch test evaluation subset; 0 = full
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (kl_coef < 0) throw ConfigError("train: kl_coef must be >= 0");
        if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (mc_samples <= 0) throw ConfigError("train: mc_samples must be positive");
        if (shards <= 0) throw ConfigError("train: shards must be positive");
        if (lr_schedule.empty() || lr_schedule.begin()->first != 0)
            throw ConfigError("train: lr_schedule must start at epoch 0");
    }

    double learning_rate(int epoch) const {
        double lr = lr_schedule.begin()->second;
        for (const auto& [e, r] : lr_schedule)
            if (e <= epoch) lr = r;
        return lr;
    }
};

/// The KL integrand 0.5 * ||u(w, t, phi)||^2 with u = (f_q - f_p) / sigma.
template <typename Real>
TensorT<Real> kl_integrand(const TensorT<Real>& w, Real t, const MlpT<Real>& net,
                           const PriorConfigT<Real>& prior, PosteriorForm form) {
    if (!(prior.sigma > Real(0)))
        throw NumericDomainError("kl_integrand: sigma must be positive");
    auto nn = posterior_net_output(w, t, net);
    auto fp = prior_drift(w, t);
    auto gap = form == PosteriorForm::integrate_fq
                   ? sub(sub(nn, fp), fp)  // f_q - f_p = NN - 2 f_p
                   : sub(nn, fp);          // NN - f_p
    return scale(sum_sq(scale(gap, Real(1) / prior.sigma)), Real(0.5));
}

/// Brownian seed for one solve unit. per_sample ignores the example id, so a
/// given sample index sees the same path no matter how many samples run.
inline std::uint64_t elbo_path_seed(std::uint64_t global_seed, std::uint64_t epoch,
                                    std::uint64_t example_id, int sample, SeedMode mode) {
    if (mode == SeedMode::per_example)
        return hash_mix(global_seed, 0x9A7Bull, hash_mix(example_id, epoch),
                        static_cast<std::uint64_t>(sample));
    return hash_mix(global_seed, 0x9A7Bull, epoch, static_cast<std::uint64_t>(sample));
}

// ---------------------------------------------------------------------------
// One batch as the objective sees it: the augmented initial activation state
// plus the targets of whichever head is configured.
// ---------------------------------------------------------------------------
template <typename Real>
struct BatchT {
    TensorT<Real> x0;                     // (B, D) or (B, C, H, W), augmented
    std::vector<int> labels;              // categorical head
    std::vector<Real> targets;            // gaussian head
    std::vector<std::uint64_t> example_ids;

    std::size_t size() const { return x0.shape()[0]; }
};

template <typename Real>
struct ElboMetrics {
    double loss = 0;
    double nll = 0;
    double kl = 0;
    double mean_nfe_f = 0;   // per-solve drift evaluations (schedule pass)
    long solves = 0;
};

template <typename Real>
struct ElboResult {
    ElboMetrics<Real> metrics;
    std::vector<std::vector<Real>> grads;  // aligned with model.params()
};

namespace detail {

/// Rows of a batch tensor (dense (B,D) or conv (B,C,H,W)).
template <typename Real>
TensorT<Real> take_rows(const TensorT<Real>& x, std::size_t begin, std::size_t end) {
    const auto& s = x.shape();
    std::size_t per = 1;
    for (std::size_t i = 1; i < s.size(); ++i) per *= s[i];
    std::vector<Real> out(x.data() + begin * per, x.data() + end * per);
    auto shape = s;
    shape[0] = end - begin;
    return TensorT<Real>::from(std::move(out), std::move(shape));
}

struct SolveUnit {
    std::size_t row_begin, row_end;  // batch rows covered by this solve
    std::uint64_t path_seed;
    int sample;
    double weight;     // (rows / batch) weight of its nll in the loss
    double kl_weight;  // weight of its kl term (0 for non-owning shards)
};

}  // namespace detail

// ---------------------------------------------------------------------------
// The variational objective over one batch:
//   loss = mean over mc samples of [ sum_g (B_g/B) * (NLL_g + kl_coef*kl_g) ]
// Each solve unit runs the schedule-producing plain pass and, when gradients
// are requested, a taped replay over the frozen steps with the same Brownian
// path. Units run in parallel on independent tapes; gradients reduce in unit
// order so results do not depend on thread scheduling.
// ---------------------------------------------------------------------------
template <typename Real>
ElboResult<Real> elbo_batch(const SdeBnnModelT<Real>& model, const BatchT<Real>& batch,
                            const TrainConfig& tc, const SolverConfig& sc,
                            std::uint64_t epoch, bool with_grads) {
    tc.validate();
    sc.validate();
    const std::size_t B = batch.size();
    if (B == 0) throw ContractError("elbo: empty batch");

    // Build the solve units: groups x samples.
    std::vector<detail::SolveUnit> units;
    const int S = tc.mc_samples;
    if (tc.seed_mode == SeedMode::per_example) {
        // Example-keyed paths: the epoch loss cannot depend on batch grouping.
        for (std::size_t i = 0; i < B; ++i)
            for (int s = 0; s < S; ++s)
                units.push_back({i, i + 1,
                                 elbo_path_seed(tc.seed, epoch, batch.example_ids[i], s,
                                                tc.seed_mode),
                                 s, 1.0 / static_cast<double>(B),
                                 1.0 / static_cast<double>(B)});
    } else {
        // Sample-keyed paths shared across the batch; shards recompute the
        // identical weight trajectory and shard 0 carries the kl term once.
        const int shards = std::min<int>(tc.shards, static_cast<int>(B));
        for (int s = 0; s < S; ++s) {
            const std::uint64_t seed = elbo_path_seed(tc.seed, epoch, 0, s, tc.seed_mode);
            for (int k = 0; k < shards; ++k) {
                const std::size_t lo = B * k / shards, hi = B * (k + 1) / shards;
                if (lo == hi) continue;
                units.push_back({lo, hi, seed, s,
                                 static_cast<double>(hi - lo) / static_cast<double>(B),
                                 k == 0 ? 1.0 : 0.0});
            }
        }
    }

    const std::size_t P = model.params().size();
    std::vector<ElboMetrics<Real>> unit_metrics(units.size());
    std::vector<std::vector<std::vector<Real>>> unit_grads(
        with_grads ? units.size() : 0);

    const double inv_samples = 1.0 / static_cast<double>(S);
    const Real T_end = static_cast<Real>(sc.T);

    std::exception_ptr failure = nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1)
#endif
    for (long ui = 0; ui < static_cast<long>(units.size()); ++ui) {
        if (failure) continue;
        try {
            const auto& u = units[ui];
            auto x0 = detail::take_rows(batch.x0, u.row_begin, u.row_end);

            BrownianPathT<Real> path(u.path_seed, model.hyper().dim(),
                                     static_cast<Real>(sc.t0), T_end);
            auto diffusion = model.make_diffusion();

            JointStateT<Real> final_state;
            Tape<Real> tape;
            BoundModelT<Real> bound;
            long nfe = 0;
            if (with_grads && sc.mode == SolverMode::fixed) {
                // Fixed schedules are static; run the taped pass directly.
                bound = model.bind(&tape);
                auto field_t = model.make_field(bound, x0);
                auto init_t = model.initial_state(x0, bound);
                final_state = replay<Real>(*field_t, *diffusion, &path,
                                           std::move(init_t), fixed_step_log(sc),
                                           sc.method, sc.max_nfe);
                nfe = sc.steps * (sc.method == SolverMethod::midpoint ? 2 : 1);
                if (!final_state.all_finite()) {
                    // rerun through the controller to surface the failing time
                    auto plain = model.bind(nullptr);
                    auto field = model.make_field(plain, x0);
                    (void)solve<Real>(*field, *diffusion, &path,
                                      model.initial_state(x0, plain), sc);
                }
            } else {
                // Schedule-producing plain pass; replayed on tape when training.
                auto plain = model.bind(nullptr);
                auto field = model.make_field(plain, x0);
                auto init = model.initial_state(x0, plain);
                auto rep = solve<Real>(*field, *diffusion, &path, std::move(init), sc);
                nfe = rep.nfe_f;
                if (with_grads) {
                    bound = model.bind(&tape);
                    auto field_t = model.make_field(bound, x0);
                    auto init_t = model.initial_state(x0, bound);
                    final_state = replay<Real>(*field_t, *diffusion, &path,
                                               std::move(init_t), rep.step_log, sc.method,
                                               2 * sc.max_nfe + 16);
                } else {
                    bound = plain;
                    final_state = rep.final_state;
                }
            }

            auto hT = model.readout(final_state, T_end);
            auto pred = model.head_forward(bound, hT);
            TensorT<Real> nll;
            if (model.geometry().head == HeadKind::categorical) {
                std::vector<int> labels(batch.labels.begin() + u.row_begin,
                                        batch.labels.begin() + u.row_end);
                nll = softmax_cross_entropy(pred, labels);
            } else {
                std::vector<Real> targets(batch.targets.begin() + u.row_begin,
                                          batch.targets.begin() + u.row_end);
                nll = gaussian_nll(pred, targets);
            }

            auto loss = scale(nll, static_cast<Real>(u.weight));
            if (u.kl_weight > 0 && tc.kl_coef > 0)
                loss = add(loss, scale(final_state.kl,
                                       static_cast<Real>(tc.kl_coef * u.kl_weight)));

            auto& m = unit_metrics[ui];
            m.loss = loss.value() * inv_samples;
            m.nll = nll.value() * u.weight * inv_samples;
            m.kl = final_state.kl.value() * u.kl_weight * inv_samples;
            m.mean_nfe_f = static_cast<double>(nfe);
            m.solves = 1;

            if (with_grads) {
                tape.backward(scale(loss, static_cast<Real>(inv_samples)));
                auto& g = unit_grads[ui];
                g.resize(P);
                for (std::size_t p = 0; p < P; ++p)
                    g[p] = tape.grad(bound.leaves[p]).vec();
            }
        } catch (const DivergenceError& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
            {
                if (!failure) {
                    const auto& u = units[ui];
                    failure = std::make_exception_ptr(DivergenceError(
                        e.t, std::string(e.what()) + " [batch rows " +
                                 std::to_string(u.row_begin) + ".." +
                                 std::to_string(u.row_end) + ", sample " +
                                 std::to_string(u.sample) + ", path seed " +
                                 std::to_string(u.path_seed) + "]"));
                }
            }
        } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
            {
                if (!failure) failure = std::current_exception();
            }
        }
    }
    if (failure) std::rethrow_exception(failure);

    ElboResult<Real> out;
    if (with_grads) {
        out.grads.assign(P, {});
        for (std::size_t p = 0; p < P; ++p)
            out.grads[p].assign(model.params()[p].value.size(), Real(0));
    }
    double nfe_sum = 0;
    for (std::size_t ui = 0; ui < units.size(); ++ui) {
        out.metrics.loss += unit_metrics[ui].loss;
        out.metrics.nll += unit_metrics[ui].nll;
        out.metrics.kl += unit_metrics[ui].kl;
        nfe_sum += unit_metrics[ui].mean_nfe_f;
        out.metrics.solves += unit_metrics[ui].solves;
        if (with_grads)
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t j = 0; j < out.grads[p].size(); ++j)
                    out.grads[p][j] += unit_grads[ui][p][j];
    }
    out.metrics.mean_nfe_f = nfe_sum / static_cast<double>(units.size());
    return out;
}

// -- Adam -------------------------------------------------------------------

template <typename Real>
class AdamOptimizer {
public:
    AdamOptimizer(double beta1, double beta2, double eps)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<ParamT<Real>>& params,
              const std::vector<std::vector<Real>>& grads, double lr) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t p = 0; p < params.size(); ++p) {
                m_[p].assign(params[p].value.size(), Real(0));
                v_[p].assign(params[p].value.size(), Real(0));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t p = 0; p < params.size(); ++p) {
            auto& val = params[p].value;
            for (std::size_t j = 0; j < val.size(); ++j) {
                const double g = static_cast<double>(grads[p][j]);
                m_[p][j] = static_cast<Real>(beta1_ * m_[p][j] + (1.0 - beta1_) * g);
                v_[p][j] = static_cast<Real>(beta2_ * v_[p][j] + (1.0 - beta2_) * g * g);
                const double mh = m_[p][j] / bc1;
                const double vh = v_[p][j] / bc2;
                val[j] -= static_cast<Real>(lr * mh / (std::sqrt(vh) + eps_));
            }
        }
    }

    long steps() const { return t_; }

private:
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<Real>> m_, v_;
};

}  // namespace sdebnn
