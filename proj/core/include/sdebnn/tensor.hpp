#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sdebnn/common.hpp"

namespace sdebnn {

enum class ActivationKind { swish, mish, tanh, identity };

inline const char* to_string(ActivationKind k) {
    switch (k) {
        case ActivationKind::swish: return "swish";
        case ActivationKind::mish: return "mish";
        case ActivationKind::tanh: return "tanh";
        case ActivationKind::identity: return "identity";
    }
    return "?";
}

inline ActivationKind activation_from_string(const std::string& s) {
    if (s == "swish") return ActivationKind::swish;
    if (s == "mish") return ActivationKind::mish;
    if (s == "tanh") return ActivationKind::tanh;
    if (s == "identity") return ActivationKind::identity;
    throw ConfigError("unknown activation kind: " + s);
}

template <typename Real>
class Tape;

// ---------------------------------------------------------------------------
// Dense row-major tensor. Tensors are immutable values: every operation
// returns a new tensor and shares input buffers via shared_ptr. A tensor is
// either a constant (tape == nullptr) or bound to a tape node. Operations on
// constants never touch a tape, so the same model code runs in plain
// evaluation mode or recording mode depending only on its inputs.
// ---------------------------------------------------------------------------
template <typename Real>
class TensorT {
public:
    using Shape = std::vector<std::size_t>;

    TensorT() = default;

    static TensorT zeros(Shape shape) {
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<Real>>(num_from(t.shape_), Real(0));
        return t;
    }

    static TensorT full(Shape shape, Real v) {
        TensorT t = zeros(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static TensorT scalar(Real v) { return full({1}, v); }

    static TensorT from(std::vector<Real> data, Shape shape) {
        if (num_from(shape) != data.size())
            throw ShapeError("tensor data length does not match shape");
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<Real>>(std::move(data));
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    bool empty() const { return numel() == 0; }

    const Real* data() const { return data_->data(); }
    const std::vector<Real>& vec() const { return *data_; }
    Real at(std::size_t i) const { return (*data_)[i]; }

    /// Scalar accessor; contract: numel() == 1.
    Real value() const {
        if (numel() != 1) throw ContractError("value() requires a scalar tensor");
        return (*data_)[0];
    }

    bool on_tape() const { return tape_ != nullptr; }
    Tape<Real>* tape() const { return tape_; }
    int node() const { return node_; }
    bool requires_grad() const { return requires_grad_; }

    /// Detached copy sharing the same buffer (constant, off-tape).
    TensorT detached() const {
        TensorT t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    bool all_finite() const {
        for (Real v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static std::size_t num_from(const Shape& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

private:
    friend class Tape<Real>;

    Shape shape_;
    std::shared_ptr<std::vector<Real>> data_;
    Tape<Real>* tape_ = nullptr;
    int node_ = -1;
    bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape. Append-only list of recorded nodes; parents always
// precede children, so one reverse sweep propagates adjoints. A tape is
// confined to one thread; parallelism happens across independent tapes.
// ---------------------------------------------------------------------------
template <typename Real>
class Tape {
public:
    using Tensor = TensorT<Real>;

    /// Registers `init` as a leaf. With requires_grad=false the value is
    /// returned as a plain constant and never participates in gradients.
    Tensor leaf(Tensor init, bool requires_grad = true) {
        if (!requires_grad) return init.detached();
        Tensor t = init.detached();
        t.tape_ = this;
        t.requires_grad_ = true;
        t.node_ = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{nullptr, true, t.numel()});
        return t;
    }

    /// Records an op result. `backward` receives the tape and must scatter
    /// the node's adjoint to its parents via accum().
    Tensor record(Tensor value, std::function<void(Tape&)> backward) {
        value.tape_ = this;
        value.requires_grad_ = false;
        value.node_ = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{std::move(backward), false, value.numel()});
        return value;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Adjoint buffers of interior nodes
    /// are released as soon as they have been consumed; leaf gradients are
    /// kept for grad() queries.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw ContractError("backward: loss must be a scalar");
        if (loss.tape_ != this || loss.node_ < 0)
            throw ContractError("backward: loss is not connected to this tape");
        grads_.assign(nodes_.size(), {});
        accum(loss.node_, 1)[0] = Real(1);
        for (int i = loss.node_; i >= 0; --i) {
            if (grads_[i].empty()) continue;
            if (nodes_[i].backward) nodes_[i].backward(*this);
            if (!nodes_[i].is_leaf) {
                std::vector<Real>().swap(grads_[i]);
            }
        }
        ran_backward_ = true;
    }

    /// Gradient of a leaf (zeros if the leaf was never reached).
    Tensor grad(const Tensor& leaf_tensor) const {
        if (!ran_backward_) throw ContractError("grad: backward() has not run");
        if (leaf_tensor.tape_ != this || leaf_tensor.node_ < 0)
            throw ContractError("grad: tensor is not a node of this tape");
        if (!nodes_[leaf_tensor.node_].is_leaf)
            throw ContractError("grad: tensor is not a leaf");
        const auto& g = grads_[leaf_tensor.node_];
        if (g.empty()) return Tensor::zeros(leaf_tensor.shape());
        return Tensor::from(g, leaf_tensor.shape());
    }

    // -- helpers used inside backward closures --

    const std::vector<Real>* grad_of(int node) const {
        return grads_[node].empty() ? nullptr : &grads_[node];
    }

    std::vector<Real>& accum(int node, std::size_t n) {
        auto& buf = grads_[node];
        if (buf.empty()) buf.assign(n, Real(0));
        return buf;
    }

    void clear() {
        nodes_.clear();
        grads_.clear();
        ran_backward_ = false;
    }

private:
    struct Node {
        std::function<void(Tape&)> backward;
        bool is_leaf = false;
        std::size_t numel = 0;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<Real>> grads_;
    bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------
namespace detail {

template <typename Real>
Tape<Real>* common_tape(std::initializer_list<const TensorT<Real>*> ts) {
    Tape<Real>* tape = nullptr;
    for (const auto* t : ts) {
        if (!t->on_tape()) continue;
        if (tape == nullptr) tape = t->tape();
        else if (tape != t->tape())
            throw ContractError("operands belong to different tapes");
    }
    return tape;
}

template <typename Real>
TensorT<Real> emit(Tape<Real>* tape, TensorT<Real> value,
                   std::function<void(Tape<Real>&)> backward) {
    if (tape == nullptr) return value;
    return tape->record(std::move(value), std::move(backward));
}

template <typename Real>
void check_same_shape(const TensorT<Real>& a, const TensorT<Real>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": operand shapes differ");
}

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using MapM = Eigen::Map<EMat<Real>>;

template <typename Real>
using CMapM = Eigen::Map<const EMat<Real>>;

}  // namespace detail

// -- elementwise arithmetic --

template <typename Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = std::vector<Real>(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto* tape = detail::common_tape<Real>({&a, &b});
    auto value = TensorT<Real>::from(std::move(out), a.shape());
    const int an = a.node(), bn = b.node();
    const std::size_t n = a.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [an, bn, on, n](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g) return;
        if (an >= 0) {
            auto& ga = tp.accum(an, n);
            for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[i];
        }
        if (bn >= 0) {
            auto& gb = tp.accum(bn, n);
            for (std::size_t i = 0; i < n; ++i) gb[i] += (*g)[i];
        }
    });
}

template <typename Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = std::vector<Real>(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto* tape = detail::common_tape<Real>({&a, &b});
    auto value = TensorT<Real>::from(std::move(out), a.shape());
    const int an = a.node(), bn = b.node();
    const std::size_t n = a.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [an, bn, on, n](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g) return;
        if (an >= 0) {
            auto& ga = tp.accum(an, n);
            for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[i];
        }
        if (bn >= 0) {
            auto& gb = tp.accum(bn, n);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= (*g)[i];
        }
    });
}

template <typename Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
    detail::check_same_shape(a, b, "mul");
    auto out = std::vector<Real>(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto* tape = detail::common_tape<Real>({&a, &b});
    auto value = TensorT<Real>::from(std::move(out), a.shape());
    const auto av = a.detached(), bv = b.detached();
    const int an = a.node(), bn = b.node();
    const std::size_t n = a.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [av, bv, an, bn, on, n](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g) return;
        if (an >= 0) {
            auto& ga = tp.accum(an, n);
            for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[i] * bv.at(i);
        }
        if (bn >= 0) {
            auto& gb = tp.accum(bn, n);
            for (std::size_t i = 0; i < n; ++i) gb[i] += (*g)[i] * av.at(i);
        }
    });
}

template <typename Real>
TensorT<Real> neg(const TensorT<Real>& a) {
    auto out = std::vector<Real>(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a.at(i);
    auto* tape = detail::common_tape<Real>({&a});
    auto value = TensorT<Real>::from(std::move(out), a.shape());
    const int an = a.node();
    const std::size_t n = a.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [an, on, n](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || an < 0) return;
        auto& ga = tp.accum(an, n);
        for (std::size_t i = 0; i < n; ++i) ga[i] -= (*g)[i];
    });
}

template <typename Real>
TensorT<Real> scale(const TensorT<Real>& a, Real c) {
    auto out = std::vector<Real>(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    auto* tape = detail::common_tape<Real>({&a});
    auto value = TensorT<Real>::from(std::move(out), a.shape());
    const int an = a.node();
    const std::size_t n = a.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [an, on, n, c](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || an < 0) return;
        auto& ga = tp.accum(an, n);
        for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[i] * c;
    });
}

// -- activations --

namespace detail {

template <typename Real>
inline Real sigmoid(Real x) {
    if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
    const Real e = std::exp(x);
    return e / (Real(1) + e);
}

template <typename Real>
inline Real softplus(Real x) {
    if (x > Real(30)) return x;
    if (x < Real(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
}

template <typename Real>
inline Real act_forward(Real x, ActivationKind k) {
    switch (k) {
        case ActivationKind::swish: return x * sigmoid(x);
        case ActivationKind::mish: return x * std::tanh(softplus(x));
        case ActivationKind::tanh: return std::tanh(x);
        case ActivationKind::identity: return x;
    }
    return x;
}

template <typename Real>
inline Real act_derivative(Real x, ActivationKind k) {
    switch (k) {
        case ActivationKind::swish: {
            const Real s = sigmoid(x);
            return s + x * s * (Real(1) - s);
        }
        case ActivationKind::mish: {
            const Real t = std::tanh(softplus(x));
            return t + x * (Real(1) - t * t) * sigmoid(x);
        }
        case ActivationKind::tanh: {
            const Real t = std::tanh(x);
            return Real(1) - t * t;
        }
        case ActivationKind::identity: return Real(1);
    }
    return Real(1);
}

}  // namespace detail

/// Elementwise scalar activation; identity is unit-test plumbing only.
template <typename Real>
Real apply_activation_scalar(Real x, ActivationKind k) {
    if (!std::isfinite(static_cast<double>(x)))
        throw NumericDomainError("apply_activation: non-finite input");
    return detail::act_forward(x, k);
}

template <typename Real>
TensorT<Real> apply_activation(const TensorT<Real>& x, ActivationKind k) {
    auto out = std::vector<Real>(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real v = x.at(i);
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericDomainError("apply_activation: non-finite input");
        out[i] = detail::act_forward(v, k);
    }
    auto* tape = detail::common_tape<Real>({&x});
    auto value = TensorT<Real>::from(std::move(out), x.shape());
    const auto xv = x.detached();
    const int xn = x.node();
    const std::size_t n = x.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [xv, xn, on, n, k](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || xn < 0) return;
        auto& gx = tp.accum(xn, n);
        for (std::size_t i = 0; i < n; ++i)
            gx[i] += (*g)[i] * detail::act_derivative(xv.at(i), k);
    });
}

// -- affine: x(B,n) * W(n,m) + b(m), bias broadcast over the batch axis --

template <typename Real>
TensorT<Real> affine(const TensorT<Real>& x, const TensorT<Real>& W,
                     const TensorT<Real>& b) {
    if (x.shape().size() != 2 || W.shape().size() != 2)
        throw ShapeError("affine: x and W must be rank-2");
    const std::size_t B = x.shape()[0], n = x.shape()[1];
    const std::size_t n2 = W.shape()[0], m = W.shape()[1];
    if (n != n2) throw ShapeError("affine: inner dimensions disagree");
    if (b.numel() != m) throw ShapeError("affine: bias length != output width");

    auto out = std::vector<Real>(B * m);
    {
        detail::CMapM<Real> X(x.data(), B, n), Wm(W.data(), n, m);
        detail::MapM<Real> O(out.data(), B, m);
        O.noalias() = X * Wm;
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < m; ++j) out[i * m + j] += b.at(j);
    }
    auto* tape = detail::common_tape<Real>({&x, &W, &b});
    auto value = TensorT<Real>::from(std::move(out), {B, m});
    const auto xv = x.detached(), Wv = W.detached();
    const int xn = x.node(), Wn = W.node(), bn = b.node();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value),
                              [xv, Wv, xn, Wn, bn, on, B, n, m](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g) return;
        detail::CMapM<Real> G(g->data(), B, m);
        if (xn >= 0) {
            auto& gx = tp.accum(xn, B * n);
            detail::MapM<Real> GX(gx.data(), B, n);
            detail::CMapM<Real> Wm(Wv.data(), n, m);
            GX.noalias() += G * Wm.transpose();
        }
        if (Wn >= 0) {
            auto& gw = tp.accum(Wn, n * m);
            detail::MapM<Real> GW(gw.data(), n, m);
            detail::CMapM<Real> X(xv.data(), B, n);
            GW.noalias() += X.transpose() * G;
        }
        if (bn >= 0) {
            auto& gb = tp.accum(bn, m);
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < m; ++j) gb[j] += (*g)[i * m + j];
        }
    });
}

// -- conv2d: x NCHW, kernel OIHW, cross-correlation --

namespace detail {

struct ConvDims {
    std::size_t N, C, H, W, O, kh, kw, Ho, Wo;
    int stride, pad;
};

template <typename Real>
ConvDims conv_dims(const TensorT<Real>& x, const TensorT<Real>& k, int stride, int pad) {
    if (x.shape().size() != 4 || k.shape().size() != 4)
        throw ShapeError("conv2d: x must be NCHW and kernel OIHW");
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    if (pad < 0) throw ContractError("conv2d: padding must be >= 0");
    ConvDims d{};
    d.N = x.shape()[0]; d.C = x.shape()[1]; d.H = x.shape()[2]; d.W = x.shape()[3];
    d.O = k.shape()[0]; d.kh = k.shape()[2]; d.kw = k.shape()[3];
    if (k.shape()[1] != d.C) throw ShapeError("conv2d: kernel input channels != x channels");
    const std::size_t Hp = d.H + 2 * static_cast<std::size_t>(pad);
    const std::size_t Wp = d.W + 2 * static_cast<std::size_t>(pad);
    if (d.kh > Hp || d.kw > Wp)
        throw ShapeError("conv2d: kernel larger than padded input");
    d.stride = stride; d.pad = pad;
    d.Ho = (Hp - d.kh) / static_cast<std::size_t>(stride) + 1;
    d.Wo = (Wp - d.kw) / static_cast<std::size_t>(stride) + 1;
    return d;
}

// Rows are (n, ho, wo); columns are (c, i, j).
template <typename Real>
void im2col(const Real* x, const ConvDims& d, std::vector<Real>& A) {
    const std::size_t cols = d.C * d.kh * d.kw;
    A.assign(d.N * d.Ho * d.Wo * cols, Real(0));
    for (std::size_t n = 0; n < d.N; ++n) {
        for (std::size_t ho = 0; ho < d.Ho; ++ho) {
            for (std::size_t wo = 0; wo < d.Wo; ++wo) {
                Real* row = A.data() + ((n * d.Ho + ho) * d.Wo + wo) * cols;
                const long hi0 = static_cast<long>(ho) * d.stride - d.pad;
                const long wi0 = static_cast<long>(wo) * d.stride - d.pad;
                for (std::size_t c = 0; c < d.C; ++c) {
                    for (std::size_t i = 0; i < d.kh; ++i) {
                        const long hi = hi0 + static_cast<long>(i);
                        if (hi < 0 || hi >= static_cast<long>(d.H)) continue;
                        for (std::size_t j = 0; j < d.kw; ++j) {
                            const long wi = wi0 + static_cast<long>(j);
                            if (wi < 0 || wi >= static_cast<long>(d.W)) continue;
                            row[(c * d.kh + i) * d.kw + j] =
                                x[((n * d.C + c) * d.H + hi) * d.W + wi];
                        }
                    }
                }
            }
        }
    }
}

template <typename Real>
void col2im_add(const std::vector<Real>& A, const ConvDims& d, Real* gx) {
    const std::size_t cols = d.C * d.kh * d.kw;
    for (std::size_t n = 0; n < d.N; ++n) {
        for (std::size_t ho = 0; ho < d.Ho; ++ho) {
            for (std::size_t wo = 0; wo < d.Wo; ++wo) {
                const Real* row = A.data() + ((n * d.Ho + ho) * d.Wo + wo) * cols;
                const long hi0 = static_cast<long>(ho) * d.stride - d.pad;
                const long wi0 = static_cast<long>(wo) * d.stride - d.pad;
                for (std::size_t c = 0; c < d.C; ++c) {
                    for (std::size_t i = 0; i < d.kh; ++i) {
                        const long hi = hi0 + static_cast<long>(i);
                        if (hi < 0 || hi >= static_cast<long>(d.H)) continue;
                        for (std::size_t j = 0; j < d.kw; ++j) {
                            const long wi = wi0 + static_cast<long>(j);
                            if (wi < 0 || wi >= static_cast<long>(d.W)) continue;
                            gx[((n * d.C + c) * d.H + hi) * d.W + wi] +=
                                row[(c * d.kh + i) * d.kw + j];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename Real>
TensorT<Real> conv2d(const TensorT<Real>& x, const TensorT<Real>& kernel,
                     int stride, int padding) {
    const auto d = detail::conv_dims(x, kernel, stride, padding);
    const std::size_t cols = d.C * d.kh * d.kw;
    const std::size_t rows = d.N * d.Ho * d.Wo;

    std::vector<Real> A;
    detail::im2col(x.data(), d, A);

    // Kernel as (cols, O): Km[(c,i,j), o] = kernel[o, c, i, j].
    std::vector<Real> Km(cols * d.O);
    for (std::size_t o = 0; o < d.O; ++o)
        for (std::size_t q = 0; q < cols; ++q)
            Km[q * d.O + o] = kernel.at(o * cols + q);

    std::vector<Real> prod(rows * d.O);
    {
        detail::CMapM<Real> Am(A.data(), rows, cols), Kmm(Km.data(), cols, d.O);
        detail::MapM<Real> P(prod.data(), rows, d.O);
        P.noalias() = Am * Kmm;
    }

    // (n*Ho*Wo, O) -> NCHW layout (n, o, ho, wo).
    std::vector<Real> out(d.N * d.O * d.Ho * d.Wo);
    for (std::size_t n = 0; n < d.N; ++n)
        for (std::size_t ho = 0; ho < d.Ho; ++ho)
            for (std::size_t wo = 0; wo < d.Wo; ++wo) {
                const Real* src = prod.data() + ((n * d.Ho + ho) * d.Wo + wo) * d.O;
                for (std::size_t o = 0; o < d.O; ++o)
                    out[((n * d.O + o) * d.Ho + ho) * d.Wo + wo] = src[o];
            }

    auto* tape = detail::common_tape<Real>({&x, &kernel});
    auto value = TensorT<Real>::from(std::move(out), {d.N, d.O, d.Ho, d.Wo});
    const auto xv = x.detached(), kv = kernel.detached();
    const int xn = x.node(), kn = kernel.node();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [xv, kv, xn, kn, on, d](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g) return;
        const std::size_t cols = d.C * d.kh * d.kw;
        const std::size_t rows = d.N * d.Ho * d.Wo;

        // Regather adjoint as (rows, O).
        std::vector<Real> Gm(rows * d.O);
        for (std::size_t n = 0; n < d.N; ++n)
            for (std::size_t o = 0; o < d.O; ++o)
                for (std::size_t ho = 0; ho < d.Ho; ++ho)
                    for (std::size_t wo = 0; wo < d.Wo; ++wo)
                        Gm[((n * d.Ho + ho) * d.Wo + wo) * d.O + o] =
                            (*g)[((n * d.O + o) * d.Ho + ho) * d.Wo + wo];

        if (kn >= 0) {
            std::vector<Real> A;
            detail::im2col(xv.data(), d, A);
            std::vector<Real> dKm(cols * d.O, Real(0));
            detail::CMapM<Real> Am(A.data(), rows, cols), G(Gm.data(), rows, d.O);
            detail::MapM<Real> DK(dKm.data(), cols, d.O);
            DK.noalias() = Am.transpose() * G;
            auto& gk = tp.accum(kn, d.O * cols);
            for (std::size_t o = 0; o < d.O; ++o)
                for (std::size_t q = 0; q < cols; ++q)
                    gk[o * cols + q] += dKm[q * d.O + o];
        }
        if (xn >= 0) {
            std::vector<Real> Km(cols * d.O);
            for (std::size_t o = 0; o < d.O; ++o)
                for (std::size_t q = 0; q < cols; ++q)
                    Km[q * d.O + o] = kv.at(o * cols + q);
            std::vector<Real> dA(rows * cols);
            detail::CMapM<Real> G(Gm.data(), rows, d.O), Kmm(Km.data(), cols, d.O);
            detail::MapM<Real> DA(dA.data(), rows, cols);
            DA.noalias() = G * Kmm.transpose();
            auto& gx = tp.accum(xn, d.N * d.C * d.H * d.W);
            detail::col2im_add(dA, d, gx.data());
        }
    });
}

/// Adds a per-channel bias to an NCHW tensor.
template <typename Real>
TensorT<Real> channel_bias(const TensorT<Real>& x, const TensorT<Real>& b) {
    if (x.shape().size() != 4) throw ShapeError("channel_bias: x must be NCHW");
    const std::size_t N = x.shape()[0], C = x.shape()[1];
    const std::size_t HW = x.shape()[2] * x.shape()[3];
    if (b.numel() != C) throw ShapeError("channel_bias: bias length != channels");
    auto out = std::vector<Real>(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const Real bc = b.at(c);
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[base + i] = x.at(base + i) + bc;
        }
    auto* tape = detail::common_tape<Real>({&x, &b});
    auto value = TensorT<Real>::from(std::move(out), x.shape());
    const int xn = x.node(), bn = b.node();
    const std::size_t total = x.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value),
                              [xn, bn, on, N, C, HW, total](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g) return;
        if (xn >= 0) {
            auto& gx = tp.accum(xn, total);
            for (std::size_t i = 0; i < total; ++i) gx[i] += (*g)[i];
        }
        if (bn >= 0) {
            auto& gb = tp.accum(bn, C);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = (n * C + c) * HW;
                    Real s = 0;
                    for (std::size_t i = 0; i < HW; ++i) s += (*g)[base + i];
                    gb[c] += s;
                }
        }
    });
}

// -- shape ops --

template <typename Real>
TensorT<Real> reshape(const TensorT<Real>& x, typename TensorT<Real>::Shape shape) {
    if (TensorT<Real>::num_from(shape) != x.numel())
        throw ShapeError("reshape: element count mismatch");
    auto value = TensorT<Real>::from(x.vec(), std::move(shape));
    auto* tape = detail::common_tape<Real>({&x});
    const int xn = x.node();
    const std::size_t n = x.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [xn, on, n](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || xn < 0) return;
        auto& gx = tp.accum(xn, n);
        for (std::size_t i = 0; i < n; ++i) gx[i] += (*g)[i];
    });
}

/// Contiguous slice of a rank-1 tensor.
template <typename Real>
TensorT<Real> slice1d(const TensorT<Real>& x, std::size_t offset, std::size_t len) {
    if (x.shape().size() != 1) throw ShapeError("slice1d: x must be rank-1");
    if (offset + len > x.numel()) throw ShapeError("slice1d: out of range");
    std::vector<Real> out(x.data() + offset, x.data() + offset + len);
    auto* tape = detail::common_tape<Real>({&x});
    auto value = TensorT<Real>::from(std::move(out), {len});
    const int xn = x.node();
    const std::size_t n = x.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [xn, on, n, offset, len](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || xn < 0) return;
        auto& gx = tp.accum(xn, n);
        for (std::size_t i = 0; i < len; ++i) gx[offset + i] += (*g)[i];
    });
}

/// Concatenates two rank-2 tensors along columns: (B,n1)+(B,n2) -> (B,n1+n2).
template <typename Real>
TensorT<Real> concat_cols(const TensorT<Real>& a, const TensorT<Real>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0])
        throw ShapeError("concat_cols: need rank-2 operands with equal rows");
    const std::size_t B = a.shape()[0], n1 = a.shape()[1], n2 = b.shape()[1];
    auto out = std::vector<Real>(B * (n1 + n2));
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < n1; ++j) out[i * (n1 + n2) + j] = a.at(i * n1 + j);
        for (std::size_t j = 0; j < n2; ++j) out[i * (n1 + n2) + n1 + j] = b.at(i * n2 + j);
    }
    auto* tape = detail::common_tape<Real>({&a, &b});
    auto value = TensorT<Real>::from(std::move(out), {B, n1 + n2});
    const int an = a.node(), bn = b.node();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [an, bn, on, B, n1, n2](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g) return;
        if (an >= 0) {
            auto& ga = tp.accum(an, B * n1);
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < n1; ++j)
                    ga[i * n1 + j] += (*g)[i * (n1 + n2) + j];
        }
        if (bn >= 0) {
            auto& gb = tp.accum(bn, B * n2);
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < n2; ++j)
                    gb[i * n2 + j] += (*g)[i * (n1 + n2) + n1 + j];
        }
    });
}

/// Concatenates two NCHW tensors along the channel axis.
template <typename Real>
TensorT<Real> concat_channels(const TensorT<Real>& a, const TensorT<Real>& b) {
    if (a.shape().size() != 4 || b.shape().size() != 4)
        throw ShapeError("concat_channels: need NCHW operands");
    if (a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[2] ||
        a.shape()[3] != b.shape()[3])
        throw ShapeError("concat_channels: N/H/W must agree");
    const std::size_t N = a.shape()[0], C1 = a.shape()[1], C2 = b.shape()[1];
    const std::size_t HW = a.shape()[2] * a.shape()[3];
    auto out = std::vector<Real>(N * (C1 + C2) * HW);
    for (std::size_t n = 0; n < N; ++n) {
        std::copy(a.data() + n * C1 * HW, a.data() + (n + 1) * C1 * HW,
                  out.data() + n * (C1 + C2) * HW);
        std::copy(b.data() + n * C2 * HW, b.data() + (n + 1) * C2 * HW,
                  out.data() + n * (C1 + C2) * HW + C1 * HW);
    }
    auto* tape = detail::common_tape<Real>({&a, &b});
    auto value = TensorT<Real>::from(std::move(out),
                                     {N, C1 + C2, a.shape()[2], a.shape()[3]});
    const int an = a.node(), bn = b.node();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [an, bn, on, N, C1, C2, HW](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g) return;
        if (an >= 0) {
            auto& ga = tp.accum(an, N * C1 * HW);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < C1 * HW; ++i)
                    ga[n * C1 * HW + i] += (*g)[n * (C1 + C2) * HW + i];
        }
        if (bn >= 0) {
            auto& gb = tp.accum(bn, N * C2 * HW);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < C2 * HW; ++i)
                    gb[n * C2 * HW + i] += (*g)[n * (C1 + C2) * HW + C1 * HW + i];
        }
    });
}

// -- reductions --

template <typename Real>
TensorT<Real> sum(const TensorT<Real>& x) {
    Real s = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i);
    auto* tape = detail::common_tape<Real>({&x});
    auto value = TensorT<Real>::scalar(s);
    const int xn = x.node();
    const std::size_t n = x.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [xn, on, n](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || xn < 0) return;
        auto& gx = tp.accum(xn, n);
        for (std::size_t i = 0; i < n; ++i) gx[i] += (*g)[0];
    });
}

template <typename Real>
TensorT<Real> mean(const TensorT<Real>& x) {
    if (x.numel() == 0) throw ContractError("mean: empty tensor");
    return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

/// sum(x_i^2); the KL integrand is 0.5 * sum_sq(u).
template <typename Real>
TensorT<Real> sum_sq(const TensorT<Real>& x) {
    Real s = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i) * x.at(i);
    auto* tape = detail::common_tape<Real>({&x});
    auto value = TensorT<Real>::scalar(s);
    const auto xv = x.detached();
    const int xn = x.node();
    const std::size_t n = x.numel();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [xv, xn, on, n](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || xn < 0) return;
        auto& gx = tp.accum(xn, n);
        for (std::size_t i = 0; i < n; ++i) gx[i] += Real(2) * xv.at(i) * (*g)[0];
    });
}

// -- losses --

/// Mean categorical cross-entropy over the batch from raw logits (B,K).
template <typename Real>
TensorT<Real> softmax_cross_entropy(const TensorT<Real>& logits,
                                    const std::vector<int>& labels) {
    if (logits.shape().size() != 2)
        throw ShapeError("softmax_cross_entropy: logits must be (B,K)");
    const std::size_t B = logits.shape()[0], K = logits.shape()[1];
    if (labels.size() != B)
        throw ShapeError("softmax_cross_entropy: label count != batch size");
    std::vector<Real> probs(B * K);
    Real nll = 0;
    for (std::size_t i = 0; i < B; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= K)
            throw ContractError("softmax_cross_entropy: label out of range");
        Real mx = logits.at(i * K);
        for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, logits.at(i * K + j));
        Real z = 0;
        for (std::size_t j = 0; j < K; ++j) {
            probs[i * K + j] = std::exp(logits.at(i * K + j) - mx);
            z += probs[i * K + j];
        }
        for (std::size_t j = 0; j < K; ++j) probs[i * K + j] /= z;
        nll -= std::log(probs[i * K + y]);
    }
    nll /= static_cast<Real>(B);
    auto* tape = detail::common_tape<Real>({&logits});
    auto value = TensorT<Real>::scalar(nll);
    const int ln = logits.node();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value),
                              [probs = std::move(probs), labels, ln, on, B, K](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || ln < 0) return;
        auto& gl = tp.accum(ln, B * K);
        const Real w = (*g)[0] / static_cast<Real>(B);
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < K; ++j) {
                Real p = probs[i * K + j];
                if (static_cast<std::size_t>(labels[i]) == j) p -= Real(1);
                gl[i * K + j] += w * p;
            }
    });
}

/// Mean Gaussian negative log-likelihood. params is (B,2): column 0 the mean,
/// column 1 the log-variance.
template <typename Real>
TensorT<Real> gaussian_nll(const TensorT<Real>& params, const std::vector<Real>& targets) {
    if (params.shape().size() != 2 || params.shape()[1] != 2)
        throw ShapeError("gaussian_nll: params must be (B,2)");
    const std::size_t B = params.shape()[0];
    if (targets.size() != B) throw ShapeError("gaussian_nll: target count != batch size");
    constexpr double kLog2Pi = 1.8378770664093453;
    Real nll = 0;
    for (std::size_t i = 0; i < B; ++i) {
        const Real mu = params.at(i * 2), lv = params.at(i * 2 + 1);
        const Real d = targets[i] - mu;
        nll += Real(0.5) * (lv + d * d * std::exp(-lv) + Real(kLog2Pi));
    }
    nll /= static_cast<Real>(B);
    auto* tape = detail::common_tape<Real>({&params});
    auto value = TensorT<Real>::scalar(nll);
    const auto pv = params.detached();
    const int pn = params.node();
    const int on = static_cast<int>(tape ? tape->size() : 0);
    return detail::emit<Real>(tape, std::move(value), [pv, targets, pn, on, B](Tape<Real>& tp) {
        const auto* g = tp.grad_of(on);
        if (!g || pn < 0) return;
        auto& gp = tp.accum(pn, B * 2);
        const Real w = (*g)[0] / static_cast<Real>(B);
        for (std::size_t i = 0; i < B; ++i) {
            const Real mu = pv.at(i * 2), lv = pv.at(i * 2 + 1);
            const Real d = targets[i] - mu;
            const Real inv = std::exp(-lv);
            gp[i * 2] += w * (-d * inv);
            gp[i * 2 + 1] += w * Real(0.5) * (Real(1) - d * d * inv);
        }
    });
}

using Tensor = TensorT<double>;
using TapeD = Tape<double>;

}  // namespace sdebnn
