#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sdebnn/dynamics.hpp"
#include "sdebnn/weight_process.hpp"

namespace sdebnn {

enum class HeadKind { categorical, gaussian };

inline const char* to_string(HeadKind k) {
    return k == HeadKind::categorical ? "categorical" : "gaussian";
}

// ---------------------------------------------------------------------------
// Model geometry: how raw inputs become the augmented activation state, the
// drift-net sizes, and the likelihood head. The weight-vector dimension falls
// out of the hypernetwork layout.
// ---------------------------------------------------------------------------
struct ModelGeometry {
    BlockKind kind = BlockKind::dense;
    std::size_t input_dim = 1;    // dense features, or image channels
    std::size_t augment_dim = 2;  // zero-initialized extra dims/channels
    std::size_t fx_hidden = 32;
    int blocks = 1;
    std::size_t height = 0, width = 0;  // conv only
    std::vector<std::size_t> fw_hidden = {32};
    HeadKind head = HeadKind::gaussian;
    std::size_t num_classes = 10;

    std::size_t state_dim() const { return input_dim + augment_dim; }
    std::size_t readout_dim() const {
        return kind == BlockKind::dense ? state_dim() : state_dim() * height * width;
    }
    std::size_t head_out() const {
        return head == HeadKind::categorical ? num_classes : 2;
    }

    DriftNetSpec drift_spec() const {
        DriftNetSpec s;
        s.kind = kind;
        s.state_dim = state_dim();
        s.hidden = fx_hidden;
        s.blocks = blocks;
        s.height = height;
        s.width = width;
        return s;
    }
};

template <typename Real>
struct ParamT {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<Real> value;
};

/// Tape-bound (or constant) views of every learnable: NN_phi, w0, head.
template <typename Real>
struct BoundModelT {
    MlpT<Real> phi;
    TensorT<Real> w0;
    TensorT<Real> head_W;
    TensorT<Real> head_b;
    std::vector<TensorT<Real>> leaves;  // aligned with the model's param order
};

// ---------------------------------------------------------------------------
// The assembled SDE-BNN: geometry plus a flat named parameter store. Binding
// against a tape yields differentiable leaves; binding against nullptr yields
// constants for plain evaluation, so the same forward code serves both.
// ---------------------------------------------------------------------------
template <typename Real>
class SdeBnnModelT {
public:
    SdeBnnModelT(ModelGeometry geom, PriorConfigT<Real> prior, PosteriorForm form,
                 DynamicsConfig dyn, std::uint64_t seed)
        : geom_(geom), hyper_(geom.drift_spec()), prior_(prior), form_(form), dyn_(dyn) {
        prior_.dim = hyper_.dim();
        prior_.validate();

        phi_geom_.weight_dim = hyper_.dim();
        phi_geom_.hidden = geom_.fw_hidden;

        auto w0 = init_drift_weights(hyper_, hash_mix(seed, 0x57A7ull));
        push_param("w0", {hyper_.dim()}, w0);

        auto phi = init_posterior_net<Real>(phi_geom_, hash_mix(seed, 0xF1E1ull));
        for (std::size_t l = 0; l < phi.W.size(); ++l) {
            push_param("phi.W" + std::to_string(l), phi.W[l].shape(), phi.W[l]);
            push_param("phi.b" + std::to_string(l), phi.b[l].shape(), phi.b[l]);
        }

        const std::size_t D = geom_.readout_dim(), K = geom_.head_out();
        std::vector<Real> Wv(D * K);
        const Real sd = Real(1) / std::sqrt(static_cast<Real>(D));
        const std::uint64_t key = hash_mix(seed, 0xEAD5ull);
        for (std::size_t i = 0; i < Wv.size(); ++i)
            Wv[i] = sd * static_cast<Real>(normal_from_key(key, i));
        push_param("head.W", {D, K}, TensorT<Real>::from(std::move(Wv), {D, K}));
        push_param("head.b", {K}, TensorT<Real>::zeros({K}));
    }

    const ModelGeometry& geometry() const { return geom_; }
    const HyperNetworkT<Real>& hyper() const { return hyper_; }
    const PriorConfigT<Real>& prior() const { return prior_; }
    PosteriorForm posterior_form() const { return form_; }
    const DynamicsConfig& dynamics() const { return dyn_; }
    DynamicsConfig& dynamics() { return dyn_; }

    std::vector<ParamT<Real>>& params() { return params_; }
    const std::vector<ParamT<Real>>& params() const { return params_; }

    ParamT<Real>& param(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return p;
        throw ContractError("model: no parameter named " + name);
    }

    BoundModelT<Real> bind(Tape<Real>* tape) const {
        BoundModelT<Real> b;
        b.leaves.reserve(params_.size());
        for (const auto& p : params_) {
            auto t = TensorT<Real>::from(p.value, p.shape);
            b.leaves.push_back(tape ? tape->leaf(std::move(t)) : std::move(t));
        }
        std::size_t idx = 0;
        b.w0 = b.leaves[idx++];
        const std::size_t phi_layers = phi_geom_.hidden.size() + 1;
        b.phi.hidden_act = ActivationKind::tanh;
        for (std::size_t l = 0; l < phi_layers; ++l) {
            b.phi.W.push_back(b.leaves[idx++]);
            b.phi.b.push_back(b.leaves[idx++]);
        }
        b.head_W = b.leaves[idx++];
        b.head_b = b.leaves[idx++];
        return b;
    }

    /// Drift field for one solve. x0 is the (augmented) network input batch;
    /// the skip variant's cache starts from it.
    std::unique_ptr<DriftFieldT<Real>> make_field(const BoundModelT<Real>& bound,
                                                  const TensorT<Real>& x0) const {
        switch (dyn_.variant) {
            case Variant::baseline:
                return std::make_unique<BaselineFieldT<Real>>(&hyper_, bound.phi, prior_,
                                                              form_, dyn_);
            case Variant::nesterov_direct:
                return std::make_unique<NesterovDirectFieldT<Real>>(&hyper_, bound.phi,
                                                                    prior_, form_, dyn_);
            case Variant::nesterov_skip:
                return std::make_unique<NesterovSkipFieldT<Real>>(
                    &hyper_, bound.phi, prior_, form_, dyn_, x0.detached());
        }
        throw ContractError("model: unknown variant");
    }

    std::unique_ptr<DiffusionFieldT<Real>> make_diffusion() const {
        return std::make_unique<OuDiffusionT<Real>>(prior_.sigma, hyper_.dim());
    }

    JointStateT<Real> initial_state(const TensorT<Real>& x0,
                                    const BoundModelT<Real>& bound) const {
        JointStateT<Real> s;
        s.x = x0;
        if (dyn_.variant != Variant::baseline) s.m = TensorT<Real>::zeros(x0.shape());
        s.w = bound.w0;
        s.kl = TensorT<Real>::zeros({1});
        return s;
    }

    /// Prediction input h_T: the Nesterov variants read out through the time
    /// scale map; the baseline carries h directly.
    TensorT<Real> readout(const JointStateT<Real>& final_state, Real T) const {
        if (dyn_.variant == Variant::baseline ||
            dyn_.scaling == TimeScaling::none)
            return final_state.x;
        return time_scale(T, final_state.x, dyn_.activation);
    }

    TensorT<Real> head_forward(const BoundModelT<Real>& bound,
                               const TensorT<Real>& hT) const {
        TensorT<Real> flat = hT;
        if (geom_.kind == BlockKind::conv)
            flat = reshape(hT, {hT.shape()[0], geom_.readout_dim()});
        return affine(flat, bound.head_W, bound.head_b);
    }

private:
    void push_param(std::string name, std::vector<std::size_t> shape,
                    const TensorT<Real>& init) {
        ParamT<Real> p;
        p.name = std::move(name);
        p.shape = std::move(shape);
        p.value = init.vec();
        params_.push_back(std::move(p));
    }

    ModelGeometry geom_;
    HyperNetworkT<Real> hyper_;
    PriorConfigT<Real> prior_;
    PosteriorForm form_;
    DynamicsConfig dyn_;
    PosteriorNetGeometry phi_geom_;
    std::vector<ParamT<Real>> params_;
};

// -- checkpoint file: named f64 tensors plus the resolved config ------------

struct CheckpointData {
    std::string config_json;
    std::vector<ParamT<double>> tensors;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

template <typename Real>
CheckpointData checkpoint_from_model(const SdeBnnModelT<Real>& model,
                                     const std::string& config_json) {
    CheckpointData d;
    d.config_json = config_json;
    for (const auto& p : model.params()) {
        ParamT<double> q;
        q.name = p.name;
        q.shape = p.shape;
        q.value.assign(p.value.begin(), p.value.end());
        d.tensors.push_back(std::move(q));
    }
    return d;
}

/// Loads checkpoint tensors into an already-constructed model; throws a
/// descriptive error on any name or shape mismatch.
template <typename Real>
void load_params_into(SdeBnnModelT<Real>& model, const CheckpointData& data) {
    if (data.tensors.size() != model.params().size())
        throw FormatError("checkpoint: expected " +
                          std::to_string(model.params().size()) + " tensors, found " +
                          std::to_string(data.tensors.size()));
    for (std::size_t i = 0; i < data.tensors.size(); ++i) {
        auto& dst = model.params()[i];
        const auto& src = data.tensors[i];
        if (src.name != dst.name)
            throw FormatError("checkpoint: tensor " + std::to_string(i) + " is '" +
                              src.name + "', model expects '" + dst.name + "'");
        if (src.shape != dst.shape)
            throw FormatError("checkpoint: shape mismatch for '" + src.name + "'");
        dst.value.assign(src.value.begin(), src.value.end());
    }
}

using SdeBnnModel = SdeBnnModelT<double>;

}  // namespace sdebnn
