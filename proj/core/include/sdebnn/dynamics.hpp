#pragma once

#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "sdebnn/common.hpp"
#include "sdebnn/solver.hpp"
#include "sdebnn/state.hpp"
#include "sdebnn/tensor.hpp"
#include "sdebnn/weight_process.hpp"

namespace sdebnn {

enum class Variant { baseline, nesterov_direct, nesterov_skip };
enum class TimeScaling { nesterov_time_scale, none };
enum class ParityMode { per_evaluation, per_step };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::baseline: return "baseline";
        case Variant::nesterov_direct: return "nesterov_direct";
        case Variant::nesterov_skip: return "nesterov_skip";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "baseline") return Variant::baseline;
    if (s == "nesterov_direct") return Variant::nesterov_direct;
    if (s == "nesterov_skip") return Variant::nesterov_skip;
    throw ConfigError("unknown variant: " + s);
}

struct DynamicsConfig {
    double xi = 1.0;
    TimeScaling scaling = TimeScaling::nesterov_time_scale;
    ActivationKind activation = ActivationKind::swish;
    Variant variant = Variant::nesterov_skip;
    ParityMode parity = ParityMode::per_evaluation;
};

/// h_t = sigma_f(t^{-3/2} e^{t/2}) x_t. The scale factor is singular at t=0,
/// which is why the integration horizon starts strictly above zero.
template <typename Real>
Real time_scale_factor(Real t, ActivationKind kind) {
    if (!(t > Real(0)))
        throw NumericDomainError("time_scale: factor is singular at t <= 0");
    const Real raw = std::pow(t, Real(-1.5)) * std::exp(t / Real(2));
    return apply_activation_scalar(raw, kind);
}

template <typename Real>
TensorT<Real> time_scale(Real t, const TensorT<Real>& x, ActivationKind kind) {
    return scale(x, time_scale_factor(t, kind));
}

// ---------------------------------------------------------------------------
// Residual cache: the (epsilon, h_temp, NFE_f) state machine. Per evaluation,
// epsilon = parity of the evaluation counter; h_temp is overwritten exactly at
// even-parity evaluations (after that evaluation's drift has been computed)
// and retained at odd ones. h_temp starts as the network input x.
// ---------------------------------------------------------------------------
template <typename Real>
struct ResidualCacheT {
    long nfe_f = 0;
    long steps_started = 0;  // per-step parity alternative (Open Question flag)
    TensorT<Real> h_temp;
    ParityMode mode = ParityMode::per_evaluation;

    bool recording = false;
    std::vector<int> eps_log;
    std::vector<char> write_log;

    int epsilon() const {
        const long c = mode == ParityMode::per_evaluation
                           ? nfe_f
                           : (steps_started > 0 ? steps_started - 1 : 0);
        return static_cast<int>(c & 1);
    }
};

// ---------------------------------------------------------------------------
// Shared plumbing for the SDE-BNN drift fields: the weight channel drift and
// the KL rate, both derived from one NN_phi evaluation. Parameters are bound
// tensors; whether the evaluation is recorded on a tape follows from them.
// ---------------------------------------------------------------------------
template <typename Real>
class SdeBnnFieldBase : public DriftFieldT<Real> {
public:
    SdeBnnFieldBase(const HyperNetworkT<Real>* hyper, MlpT<Real> phi,
                    PriorConfigT<Real> prior, PosteriorForm form, DynamicsConfig dyn)
        : hyper_(hyper), phi_(std::move(phi)), prior_(prior), form_(form), dyn_(dyn) {
        prior_.validate();
    }

    const DynamicsConfig& dynamics() const { return dyn_; }

    /// Prior-predictive mode: the weight channel follows f_p instead of the
    /// learned posterior drift (and accumulates no KL).
    void use_prior_weight_drift(bool on) { prior_weights_ = on; }
    bool prior_weight_drift() const { return prior_weights_; }

protected:
    std::pair<TensorT<Real>, TensorT<Real>> weight_drift_and_kl(const TensorT<Real>& w,
                                                                Real t) const {
        if (prior_weights_)
            return {prior_drift(w, t), TensorT<Real>::zeros({1})};
        auto nn = posterior_net_output(w, t, phi_);
        auto fp = prior_drift(w, t);
        TensorT<Real> drift, gap;
        if (form_ == PosteriorForm::integrate_fq) {
            drift = sub(nn, fp);        // f_q = NN - f_p
            gap = sub(drift, fp);       // f_q - f_p
        } else {
            drift = nn;                 // integrate NN directly
            gap = sub(nn, fp);          // NN - f_p
        }
        auto u = scale(gap, Real(1) / prior_.sigma);
        auto kl_rate = scale(sum_sq(u), Real(0.5));
        return {std::move(drift), std::move(kl_rate)};
    }

    const HyperNetworkT<Real>* hyper_;
    MlpT<Real> phi_;
    PriorConfigT<Real> prior_;
    PosteriorForm form_;
    DynamicsConfig dyn_;
    bool prior_weights_ = false;
};

/// Baseline SDE-BNN: the state carries h directly in x, no momentum channel.
/// dh = f_w(h, t); dw = posterior drift; d(kl) = 0.5 ||u||^2.
template <typename Real>
class BaselineFieldT final : public SdeBnnFieldBase<Real> {
public:
    using SdeBnnFieldBase<Real>::SdeBnnFieldBase;

    JointStateT<Real> evaluate(const JointStateT<Real>& s, Real t) override {
        JointStateT<Real> d;
        d.x = activation_drift(s.x, t, s.w, *this->hyper_, this->dyn_.activation);
        auto [dw, dkl] = this->weight_drift_and_kl(s.w, t);
        d.w = std::move(dw);
        d.kl = std::move(dkl);
        return d;
    }
};

/// Nesterov dynamics with the direct residual term:
/// dx = sigma_f(m); dm = -m - sigma_f(f_w(h,t)) - xi*h; h = time_scale(t, x).
template <typename Real>
class NesterovDirectFieldT final : public SdeBnnFieldBase<Real> {
public:
    using SdeBnnFieldBase<Real>::SdeBnnFieldBase;

    JointStateT<Real> evaluate(const JointStateT<Real>& s, Real t) override {
        const auto& dyn = this->dyn_;
        auto h = dyn.scaling == TimeScaling::nesterov_time_scale
                     ? time_scale(t, s.x, dyn.activation)
                     : s.x;
        auto fx = activation_drift(h, t, s.w, *this->hyper_, dyn.activation);
        JointStateT<Real> d;
        d.x = apply_activation(s.m, dyn.activation);
        auto dm = add(s.m, apply_activation(fx, dyn.activation));
        if (dyn.xi != 0.0)
            dm = add(dm, scale(h, static_cast<Real>(dyn.xi)));
        d.m = neg(dm);
        auto [dw, dkl] = this->weight_drift_and_kl(s.w, t);
        d.w = std::move(dw);
        d.kl = std::move(dkl);
        return d;
    }
};

/// Nesterov dynamics with the NFE-parity residual skip:
/// dm = -m - sigma_f(f_w(h,t) + eps*xi*h_temp), with (eps, h_temp) driven by
/// the evaluation counter. The cache mutates inside evaluate(), so the field
/// exposes snapshot/restore for the adaptive solver's trial steps and the
/// per-step parity hook.
template <typename Real>
class NesterovSkipFieldT final : public SdeBnnFieldBase<Real> {
public:
    NesterovSkipFieldT(const HyperNetworkT<Real>* hyper, MlpT<Real> phi,
                       PriorConfigT<Real> prior, PosteriorForm form, DynamicsConfig dyn,
                       TensorT<Real> network_input)
        : SdeBnnFieldBase<Real>(hyper, std::move(phi), prior, form, dyn) {
        cache_.h_temp = std::move(network_input);
        cache_.mode = dyn.parity;
    }

    ResidualCacheT<Real>& cache() { return cache_; }
    const ResidualCacheT<Real>& cache() const { return cache_; }

    JointStateT<Real> evaluate(const JointStateT<Real>& s, Real t) override {
        const auto& dyn = this->dyn_;
        auto h = dyn.scaling == TimeScaling::nesterov_time_scale
                     ? time_scale(t, s.x, dyn.activation)
                     : s.x;
        if (cache_.h_temp.shape() != h.shape())
            throw ContractError("residual cache: h_temp shape does not match h");

        const int eps = cache_.epsilon();
        auto fx = activation_drift(h, t, s.w, *this->hyper_, dyn.activation);
        auto inner = (eps == 1 && dyn.xi != 0.0)
                         ? add(fx, scale(cache_.h_temp, static_cast<Real>(dyn.xi)))
                         : fx;

        JointStateT<Real> d;
        d.x = apply_activation(s.m, dyn.activation);
        d.m = neg(add(s.m, apply_activation(inner, dyn.activation)));
        auto [dw, dkl] = this->weight_drift_and_kl(s.w, t);
        d.w = std::move(dw);
        d.kl = std::move(dkl);

        // Cache protocol: the even-parity evaluation injects nothing and
        // caches h after its drift is computed; the next (odd) one injects it.
        const bool write = cache_.epsilon() == 0;
        if (write) cache_.h_temp = h;
        if (cache_.recording) {
            cache_.eps_log.push_back(eps);
            cache_.write_log.push_back(write ? 1 : 0);
        }
        ++cache_.nfe_f;
        return d;
    }

    void begin_step() override { ++cache_.steps_started; }

    std::unique_ptr<FieldSnapshot> snapshot() const override {
        auto snap = std::make_unique<Snapshot>();
        snap->cache = cache_;
        return snap;
    }

    void restore(const FieldSnapshot* snap) override {
        const auto* s = dynamic_cast<const Snapshot*>(snap);
        if (!s) throw ContractError("residual cache: foreign snapshot");
        cache_ = s->cache;
    }

    long cache_evaluations() const override { return cache_.nfe_f; }

private:
    struct Snapshot final : FieldSnapshot {
        ResidualCacheT<Real> cache;
    };

    ResidualCacheT<Real> cache_;
};

/// nesterov_skip_drift with a caller-supplied cache, mirroring the module's
/// operation signature; used by unit tests that drive the state machine by
/// hand.
template <typename Real>
JointStateT<Real> nesterov_skip_drift(const JointStateT<Real>& s, Real t,
                                      ResidualCacheT<Real>& cache,
                                      const HyperNetworkT<Real>& hyper,
                                      const MlpT<Real>& phi,
                                      const PriorConfigT<Real>& prior,
                                      PosteriorForm form, const DynamicsConfig& dyn) {
    NesterovSkipFieldT<Real> field(&hyper, phi, prior, form, dyn, cache.h_temp);
    field.cache() = cache;
    auto d = field.evaluate(s, t);
    cache = field.cache();
    return d;
}

}  // namespace sdebnn
