#pragma once

#include <cmath>
#include <cstddef>

#include "sdebnn/tensor.hpp"

namespace sdebnn {

// ---------------------------------------------------------------------------
// Augmented solver state: activation channel, optional momentum channel, flat
// weight vector, and the running KL path accumulator. The baseline variant
// stores h directly in x and leaves m empty. Drift evaluations return another
// JointState holding per-channel rates.
// ---------------------------------------------------------------------------
template <typename Real>
struct JointStateT {
    TensorT<Real> x;
    TensorT<Real> m;
    TensorT<Real> w;
    TensorT<Real> kl;

    bool has_momentum() const { return !m.empty(); }

    bool all_finite() const {
        if (!x.empty() && !x.all_finite()) return false;
        if (!m.empty() && !m.all_finite()) return false;
        if (!w.empty() && !w.all_finite()) return false;
        if (!kl.empty() && !kl.all_finite()) return false;
        return true;
    }
};

/// s + c * d, channel by channel. Channels absent from either side pass
/// through unchanged.
template <typename Real>
JointStateT<Real> state_add_scaled(const JointStateT<Real>& s,
                                   const JointStateT<Real>& d, Real c) {
    JointStateT<Real> out;
    out.x = d.x.empty() ? s.x : add(s.x, scale(d.x, c));
    out.m = s.m.empty() || d.m.empty() ? s.m : add(s.m, scale(d.m, c));
    out.w = d.w.empty() ? s.w : add(s.w, scale(d.w, c));
    out.kl = s.kl.empty() || d.kl.empty() ? s.kl : add(s.kl, scale(d.kl, c));
    return out;
}

/// Root-mean-square over every state entry (x, m, w and kl).
template <typename Real>
double state_rms(const JointStateT<Real>& s) {
    double acc = 0;
    std::size_t n = 0;
    auto fold = [&](const TensorT<Real>& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double v = static_cast<double>(t.at(i));
            acc += v * v;
        }
        n += t.numel();
    };
    if (!s.x.empty()) fold(s.x);
    if (!s.m.empty()) fold(s.m);
    if (!s.w.empty()) fold(s.w);
    if (!s.kl.empty()) fold(s.kl);
    return n == 0 ? 0.0 : std::sqrt(acc / static_cast<double>(n));
}

/// RMS of (a - b) over every state entry.
template <typename Real>
double state_rms_diff(const JointStateT<Real>& a, const JointStateT<Real>& b) {
    double acc = 0;
    std::size_t n = 0;
    auto fold = [&](const TensorT<Real>& u, const TensorT<Real>& v) {
        for (std::size_t i = 0; i < u.numel(); ++i) {
            const double d = static_cast<double>(u.at(i)) - static_cast<double>(v.at(i));
            acc += d * d;
        }
        n += u.numel();
    };
    if (!a.x.empty()) fold(a.x, b.x);
    if (!a.m.empty()) fold(a.m, b.m);
    if (!a.w.empty()) fold(a.w, b.w);
    if (!a.kl.empty()) fold(a.kl, b.kl);
    return n == 0 ? 0.0 : std::sqrt(acc / static_cast<double>(n));
}

}  // namespace sdebnn
