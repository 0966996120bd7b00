#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sdebnn/common.hpp"
#include "sdebnn/solver.hpp"
#include "sdebnn/tensor.hpp"

namespace sdebnn {

// ---------------------------------------------------------------------------
// The Bayesian layer over weights: an Ornstein-Uhlenbeck prior, a learned
// posterior drift, and the hypernetwork that reads the flat weight vector w_t
// as the parameters of the activation drift network f_w.
// ---------------------------------------------------------------------------

template <typename Real>
struct PriorConfigT {
    Real sigma = Real(0.1);
    std::size_t dim = 0;

    void validate() const {
        if (!(sigma > Real(0)))
            throw ConfigError("prior: sigma must be positive");
    }
};

/// OU prior drift f_p(w, t) = -w.
template <typename Real>
TensorT<Real> prior_drift(const TensorT<Real>& w, Real /*t*/) {
    return neg(w);
}

/// State-independent diagonal diffusion g = sigma * I acting on the weight
/// channel.
template <typename Real>
class OuDiffusionT final : public DiffusionFieldT<Real> {
public:
    OuDiffusionT(Real sigma, std::size_t dim) : sigma_(sigma), dim_(dim) {}
    std::size_t dim() const override { return dim_; }
    TensorT<Real> apply(const JointStateT<Real>&, Real, const TensorT<Real>& dW) override {
        return scale(dW, sigma_);
    }
    Real sigma() const { return sigma_; }

private:
    Real sigma_;
    std::size_t dim_;
};

/// prior_diffusion as a plain op: sigma * dW per coordinate.
template <typename Real>
TensorT<Real> prior_diffusion_increment(const TensorT<Real>& dW,
                                        const PriorConfigT<Real>& cfg) {
    return scale(dW, cfg.sigma);
}

// -- small MLP used for the posterior drift NN_phi --

template <typename Real>
struct MlpT {
    std::vector<TensorT<Real>> W;
    std::vector<TensorT<Real>> b;
    ActivationKind hidden_act = ActivationKind::tanh;

    std::size_t layers() const { return W.size(); }

    TensorT<Real> forward(TensorT<Real> x) const {
        for (std::size_t l = 0; l < W.size(); ++l) {
            x = affine(x, W[l], b[l]);
            if (l + 1 < W.size()) x = apply_activation(x, hidden_act);
        }
        return x;
    }
};

/// Hidden widths of NN_phi; input is (dim(w) + 1) with t appended, output is
/// dim(w). Presets encode Table-style strings such as "1-64-1" as the list of
/// hidden widths.
struct PosteriorNetGeometry {
    std::size_t weight_dim = 0;
    std::vector<std::size_t> hidden;
};

enum class PosteriorForm {
    integrate_fq,  // dw = f_q dt,      u = (f_q - f_p)/sigma = (NN + 2w)/sigma
    integrate_nn,  // dw = NN_phi dt,   u = (NN - f_p)/sigma  = (NN + w)/sigma
};

inline const char* to_string(PosteriorForm f) {
    return f == PosteriorForm::integrate_fq ? "integrate_fq" : "integrate_nn";
}

/// f_q(w, t, phi) = NN_phi(w, t) - f_p(w, t).
template <typename Real>
TensorT<Real> posterior_drift(const TensorT<Real>& w, Real t, const MlpT<Real>& net) {
    const std::size_t d = w.numel();
    auto row = reshape(w, {1, d});
    auto tcol = TensorT<Real>::full({1, 1}, t);
    auto nn = net.forward(concat_cols(row, tcol));
    if (nn.numel() != d)
        throw ShapeError("posterior_drift: network output does not match weight dim");
    return reshape(sub(nn, prior_drift(row, t)), {d});
}

/// NN_phi(w, t) alone, for the integrate_nn posterior form and the KL term.
template <typename Real>
TensorT<Real> posterior_net_output(const TensorT<Real>& w, Real t, const MlpT<Real>& net) {
    const std::size_t d = w.numel();
    auto row = reshape(w, {1, d});
    auto tcol = TensorT<Real>::full({1, 1}, t);
    auto nn = net.forward(concat_cols(row, tcol));
    if (nn.numel() != d)
        throw ShapeError("posterior_net: network output does not match weight dim");
    return reshape(nn, {d});
}

// -- hypernetwork: flat w  <->  layers of the activation drift net f_w --

enum class BlockKind { dense, conv };

/// Geometry of the stack of drift blocks f_w evaluates. Dense blocks act on
/// (B, state_dim) features; conv blocks act on (B, channels, height, width)
/// maps with 3x3 same-padding kernels. Time enters each block as one extra
/// broadcast feature/channel.
struct DriftNetSpec {
    BlockKind kind = BlockKind::dense;
    std::size_t state_dim = 0;  // dense features, or conv channels
    std::size_t hidden = 32;    // f_x hidden width (features or channels)
    int blocks = 1;
    std::size_t height = 0, width = 0;  // conv only
    std::size_t ksize = 3;              // conv only

    void validate() const {
        if (state_dim == 0) throw ConfigError("drift net: state_dim must be positive");
        if (hidden == 0) throw ConfigError("drift net: hidden width must be positive");
        if (blocks < 1) throw ConfigError("drift net: blocks must be >= 1");
        if (kind == BlockKind::conv && (height == 0 || width == 0))
            throw ConfigError("drift net: conv blocks need height/width");
    }
};

struct TensorSpec {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t len = 0;
};

template <typename Real>
class HyperNetworkT {
public:
    explicit HyperNetworkT(DriftNetSpec spec) : spec_(spec) {
        spec_.validate();
        std::size_t off = 0;
        auto push = [&](std::string name, std::vector<std::size_t> shape) {
            TensorSpec ts;
            ts.name = std::move(name);
            ts.shape = std::move(shape);
            ts.offset = off;
            ts.len = TensorT<Real>::num_from(ts.shape);
            off += ts.len;
            layout_.push_back(std::move(ts));
        };
        for (int blk = 0; blk < spec_.blocks; ++blk) {
            const std::string p = "block" + std::to_string(blk) + ".";
            if (spec_.kind == BlockKind::dense) {
                push(p + "W1", {spec_.state_dim + 1, spec_.hidden});
                push(p + "b1", {spec_.hidden});
                push(p + "W2", {spec_.hidden, spec_.state_dim});
                push(p + "b2", {spec_.state_dim});
            } else {
                push(p + "K1", {spec_.hidden, spec_.state_dim + 1, spec_.ksize, spec_.ksize});
                push(p + "b1", {spec_.hidden});
                push(p + "K2", {spec_.state_dim, spec_.hidden, spec_.ksize, spec_.ksize});
                push(p + "b2", {spec_.state_dim});
            }
        }
        dim_ = off;
    }

    const DriftNetSpec& spec() const { return spec_; }
    std::size_t dim() const { return dim_; }
    const std::vector<TensorSpec>& layout() const { return layout_; }

    /// Slices w into the layer tensors (bijective; differentiable through w).
    std::vector<TensorT<Real>> unflatten(const TensorT<Real>& w) const {
        if (w.numel() != dim_)
            throw ConfigError("hypernetwork: dim(w)=" + std::to_string(w.numel()) +
                              " but the drift net needs " + std::to_string(dim_));
        std::vector<TensorT<Real>> parts;
        parts.reserve(layout_.size());
        for (const auto& ts : layout_)
            parts.push_back(reshape(slice1d(w, ts.offset, ts.len), ts.shape));
        return parts;
    }

    /// Inverse of unflatten for plain values.
    TensorT<Real> flatten(const std::vector<TensorT<Real>>& parts) const {
        if (parts.size() != layout_.size())
            throw ContractError("hypernetwork: wrong number of parts");
        std::vector<Real> flat(dim_);
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (parts[i].numel() != layout_[i].len)
                throw ShapeError("hypernetwork: part size mismatch at " + layout_[i].name);
            for (std::size_t j = 0; j < layout_[i].len; ++j)
                flat[layout_[i].offset + j] = parts[i].at(j);
        }
        return TensorT<Real>::from(std::move(flat), {dim_});
    }

    /// f_w(h, t): reshapes w into the drift layers and evaluates the block
    /// stack on h with t injected as a broadcast feature/channel.
    TensorT<Real> drift(const TensorT<Real>& h, Real t, const TensorT<Real>& w,
                        ActivationKind act) const {
        const auto parts = unflatten(w);
        TensorT<Real> v = h;
        for (int blk = 0; blk < spec_.blocks; ++blk) {
            const std::size_t base = static_cast<std::size_t>(blk) * 4;
            if (spec_.kind == BlockKind::dense) {
                if (v.shape().size() != 2 || v.shape()[1] != spec_.state_dim)
                    throw ShapeError("drift: h must be (B, state_dim)");
                auto tcol = TensorT<Real>::full({v.shape()[0], 1}, t);
                auto z = apply_activation(
                    affine(concat_cols(v, tcol), parts[base], parts[base + 1]), act);
                v = affine(z, parts[base + 2], parts[base + 3]);
            } else {
                if (v.shape().size() != 4 || v.shape()[1] != spec_.state_dim ||
                    v.shape()[2] != spec_.height || v.shape()[3] != spec_.width)
                    throw ShapeError("drift: h must be (B, C, H, W) matching the geometry");
                auto tpl = TensorT<Real>::full({v.shape()[0], 1, spec_.height, spec_.width}, t);
                const int pad = static_cast<int>(spec_.ksize / 2);
                auto z = apply_activation(
                    channel_bias(conv2d(concat_channels(v, tpl), parts[base], 1, pad),
                                 parts[base + 1]),
                    act);
                v = channel_bias(conv2d(z, parts[base + 2], 1, pad), parts[base + 3]);
            }
        }
        return v;
    }

private:
    DriftNetSpec spec_;
    std::vector<TensorSpec> layout_;
    std::size_t dim_ = 0;
};

/// activation_drift per the module contract: w sliced into f_w's layers and
/// evaluated on (h, t).
template <typename Real>
TensorT<Real> activation_drift(const TensorT<Real>& h, Real t, const TensorT<Real>& w,
                               const HyperNetworkT<Real>& hyper, ActivationKind act) {
    return hyper.drift(h, t, w, act);
}

/// Initial weights w0: fan-in-scaled normals damped by 0.1; biases zero.
template <typename Real>
TensorT<Real> init_drift_weights(const HyperNetworkT<Real>& hyper, std::uint64_t seed) {
    std::vector<Real> flat(hyper.dim(), Real(0));
    std::size_t t_idx = 0;
    for (const auto& ts : hyper.layout()) {
        const bool is_bias = ts.shape.size() == 1;
        if (!is_bias) {
            // dense W is (in, out); conv K is OIHW with fan-in I*kh*kw
            const std::size_t fan_in = ts.shape.size() == 2
                                           ? ts.shape[0]
                                           : ts.shape[1] * ts.shape[2] * ts.shape[3];
            const Real sd = Real(0.1) / std::sqrt(static_cast<Real>(fan_in));
            const std::uint64_t key = hash_mix(seed, 0xA11ull, t_idx);
            for (std::size_t j = 0; j < ts.len; ++j)
                flat[ts.offset + j] = sd * static_cast<Real>(normal_from_key(key, j));
        }
        ++t_idx;
    }
    return TensorT<Real>::from(std::move(flat), {hyper.dim()});
}

/// Fresh NN_phi parameters: tanh hidden layers, fan-in-scaled init, zero
/// final layer so the posterior starts at the prior-corrected origin.
template <typename Real>
MlpT<Real> init_posterior_net(const PosteriorNetGeometry& geom, std::uint64_t seed) {
    if (geom.weight_dim == 0) throw ConfigError("posterior net: weight_dim must be set");
    MlpT<Real> net;
    std::vector<std::size_t> widths;
    widths.push_back(geom.weight_dim + 1);
    for (auto h : geom.hidden) {
        if (h == 0) throw ConfigError("posterior net: zero hidden width");
        widths.push_back(h);
    }
    widths.push_back(geom.weight_dim);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const std::size_t in = widths[l], out = widths[l + 1];
        std::vector<Real> Wv(in * out, Real(0));
        const bool last = l + 2 == widths.size();
        if (!last) {
            const Real sd = Real(1) / std::sqrt(static_cast<Real>(in));
            const std::uint64_t key = hash_mix(seed, 0xF1ull, l);
            for (std::size_t j = 0; j < Wv.size(); ++j)
                Wv[j] = sd * static_cast<Real>(normal_from_key(key, j));
        }
        net.W.push_back(TensorT<Real>::from(std::move(Wv), {in, out}));
        net.b.push_back(TensorT<Real>::zeros({out}));
    }
    return net;
}

using PriorConfig = PriorConfigT<double>;
using HyperNetwork = HyperNetworkT<double>;
using Mlp = MlpT<double>;

}  // namespace sdebnn
