#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "sdebnn/common.hpp"
#include "sdebnn/tensor.hpp"

namespace sdebnn {

// ---------------------------------------------------------------------------
// Reproducible Brownian motion over a fixed horizon, realized as a virtual
// Brownian tree: W at dyadic points is generated by conditional bridge
// bisection with a counter-based RNG keyed on (seed, tree node), so any query
// order yields identical values and increments are exactly additive under
// interval refinement. Query times are quantized to a 2^-depth dyadic grid of
// the horizon; increment scales use the quantized endpoints, which keeps
// additivity exact.
// ---------------------------------------------------------------------------
template <typename Real>
class BrownianPathT {
public:
    BrownianPathT(std::uint64_t seed, std::size_t dim, Real t0, Real t1, int depth = 26)
        : seed_(seed), dim_(dim), t0_(t0), t1_(t1), depth_(depth) {
        if (!(t1 > t0)) throw ContractError("BrownianPath: need t0 < t1");
        if (dim == 0) throw ContractError("BrownianPath: dim must be positive");
        if (depth < 1 || depth > 31) throw ContractError("BrownianPath: bad depth");
        span_ = static_cast<double>(t1 - t0);
    }

    std::uint64_t seed() const { return seed_; }
    std::size_t dim() const { return dim_; }
    Real t0() const { return t0_; }
    Real t1() const { return t1_; }

    /// B_{t1q} - B_{t0q} for quantized endpoints; marginally N(0, (b-a) I).
    TensorT<Real> increment(Real a, Real b) {
        if (!(a < b)) throw ContractError("BrownianPath::increment: need t0 < t1");
        const std::uint64_t ka = quantize(a), kb = quantize(b);
        const std::vector<double>& wa = point(ka);
        const std::vector<double>& wb = point(kb);
        std::vector<Real> out(dim_);
        for (std::size_t i = 0; i < dim_; ++i)
            out[i] = static_cast<Real>(wb[i] - wa[i]);
        return TensorT<Real>::from(std::move(out), {dim_});
    }

    /// Length of the quantized interval in real time units (for variance
    /// checks in tests).
    double quantized_length(Real a, Real b) const {
        const double scale = span_ / static_cast<double>(1ULL << depth_);
        return static_cast<double>(quantize_only(b) - quantize_only(a)) * scale;
    }

    std::size_t cache_size() const { return mids_.size(); }
    void clear_cache() { mids_.clear(); points_.clear(); }

private:
    std::uint64_t quantize_only(Real t) const {
        double u = (static_cast<double>(t) - static_cast<double>(t0_)) / span_;
        if (u < -1e-9 || u > 1.0 + 1e-9)
            throw ContractError("BrownianPath::increment: time outside horizon");
        u = std::min(std::max(u, 0.0), 1.0);
        const double n = static_cast<double>(1ULL << depth_);
        auto k = static_cast<std::uint64_t>(std::llround(u * n));
        return std::min<std::uint64_t>(k, 1ULL << depth_);
    }

    std::uint64_t quantize(Real t) const { return quantize_only(t); }

    // W at grid index k (units of 2^-depth of the horizon), memoized.
    const std::vector<double>& point(std::uint64_t k) {
        auto it = points_.find(k);
        if (it != points_.end()) return it->second;

        std::vector<double> w(dim_);
        if (k == 0) {
            std::fill(w.begin(), w.end(), 0.0);
        } else if (k == (1ULL << depth_)) {
            const std::uint64_t key = hash_mix(seed_, 0xE0ull, 1);
            for (std::size_t i = 0; i < dim_; ++i)
                w[i] = std::sqrt(span_) * normal_from_key(key, i);
        } else {
            // Descend from the root, bridging midpoints until k is hit.
            std::uint64_t lo = 0, hi = 1ULL << depth_;
            std::vector<double> wlo(dim_, 0.0);
            std::vector<double> whi = point(hi);
            int level = 0;
            while (true) {
                const std::uint64_t mid = lo + (hi - lo) / 2;
                const std::vector<double>& wm = midpoint(level, lo, wlo, whi, hi);
                if (mid == k) { w = wm; break; }
                if (k < mid) { hi = mid; whi = wm; }
                else { lo = mid; wlo = wm; }
                ++level;
            }
        }
        auto [pos, ok] = points_.emplace(k, std::move(w));
        (void)ok;
        return pos->second;
    }

    // Bridge sample at the midpoint of [lo, hi], memoized by the interval.
    const std::vector<double>& midpoint(int level, std::uint64_t lo,
                                        const std::vector<double>& wlo,
                                        const std::vector<double>& whi,
                                        std::uint64_t hi) {
        (void)level;
        const std::uint64_t ikey = (lo << 32) | hi;  // depth <= 31 keeps this unique
        auto it = mids_.find(ikey);
        if (it != mids_.end()) return it->second;
        const std::uint64_t key = hash_mix(seed_, lo, hi, 0xB7ull);
        const double frac = static_cast<double>(hi - lo) /
                            static_cast<double>(1ULL << depth_);
        const double sd = 0.5 * std::sqrt(frac * span_);
        std::vector<double> w(dim_);
        for (std::size_t i = 0; i < dim_; ++i)
            w[i] = 0.5 * (wlo[i] + whi[i]) + sd * normal_from_key(key, i);
        auto [pos, ok] = mids_.emplace(ikey, std::move(w));
        (void)ok;
        return pos->second;
    }

    std::uint64_t seed_;
    std::size_t dim_;
    Real t0_, t1_;
    double span_;
    int depth_;
    std::unordered_map<std::uint64_t, std::vector<double>> points_;
    std::unordered_map<std::uint64_t, std::vector<double>> mids_;
};

using BrownianPath = BrownianPathT<double>;

}  // namespace sdebnn
