#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "sdebnn/csv.hpp"
#include "sdebnn/elbo.hpp"
#include "sdebnn/idx.hpp"
#include "sdebnn/model.hpp"

namespace sdebnn {

// ---------------------------------------------------------------------------
// 1D toy regression. The target is a fixed damped sine,
//   f(x) = sin(3x) * exp(-x^2 / 2),
// non-monotonic over the default range [-2, 2]; inputs are uniform, noise is
// Gaussian, and regeneration from the same seed is bit-identical.
// ---------------------------------------------------------------------------
struct ToyRegressionConfig {
    std::size_t n = 200;
    double x_lo = -2.0, x_hi = 2.0;
    double noise_std = 0.1;
    std::uint64_t seed = 0;
};

inline double toy_target(double x) { return std::sin(3.0 * x) * std::exp(-0.5 * x * x); }

template <typename Real>
struct ToyRegressionSetT {
    ToyRegressionConfig cfg;
    std::vector<Real> x, y;
};

template <typename Real>
ToyRegressionSetT<Real> make_toy_regression(const ToyRegressionConfig& cfg) {
    if (cfg.n == 0) throw ContractError("toy regression: n must be positive");
    ToyRegressionSetT<Real> set;
    set.cfg = cfg;
    set.x.resize(cfg.n);
    set.y.resize(cfg.n);
    const std::uint64_t kx = hash_mix(cfg.seed, 0x70F1ull);
    const std::uint64_t ky = hash_mix(cfg.seed, 0x70F2ull);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const double u = uniform01(hash_mix(kx, i));
        const double xv = cfg.x_lo + (cfg.x_hi - cfg.x_lo) * u;
        set.x[i] = static_cast<Real>(xv);
        set.y[i] = static_cast<Real>(toy_target(xv) +
                                     cfg.noise_std * normal_from_key(ky, i));
    }
    return set;
}

template <typename Real>
void write_toy_csv(const std::string& path, const ToyRegressionSetT<Real>& set) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "x,y\n";
    for (std::size_t i = 0; i < set.x.size(); ++i)
        out << format_double(static_cast<double>(set.x[i])) << ','
            << format_double(static_cast<double>(set.y[i])) << "\n";
}

// ---------------------------------------------------------------------------
// Image dataset (MNIST via IDX files).
// ---------------------------------------------------------------------------
enum class Split { train, test };

struct ImageDataset {
    Split split = Split::train;
    std::size_t count = 0, rows = 0, cols = 0;
    std::vector<std::uint8_t> images;  // count * rows * cols
    std::vector<int> labels;
    double norm_mean = 0.1307, norm_std = 0.3081;
    std::size_t num_classes = 10;
};

inline ImageDataset load_idx_dataset(const std::string& images_path,
                                     const std::string& labels_path, Split split,
                                     std::size_t subset = 0) {
    auto img = read_idx_images(images_path);
    auto lab = read_idx_labels(labels_path);
    if (img.count != lab.labels.size())
        throw FormatError("image/label counts disagree: " + std::to_string(img.count) +
                          " vs " + std::to_string(lab.labels.size()));
    ImageDataset ds;
    ds.split = split;
    ds.count = subset > 0 ? std::min(subset, img.count) : img.count;
    ds.rows = img.rows;
    ds.cols = img.cols;
    ds.images.assign(img.pixels.begin(),
                     img.pixels.begin() + static_cast<long>(ds.count * img.rows * img.cols));
    ds.labels.reserve(ds.count);
    for (std::size_t i = 0; i < ds.count; ++i) {
        const int y = lab.labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= ds.num_classes)
            throw FormatError("label out of range at index " + std::to_string(i));
        ds.labels.push_back(y);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Batch builders: raw task data -> the augmented initial activation state.
// ---------------------------------------------------------------------------
template <typename Real>
BatchT<Real> toy_batch(const ToyRegressionSetT<Real>& set,
                       const std::vector<std::size_t>& ids, const ModelGeometry& geom) {
    BatchT<Real> b;
    const std::size_t D = geom.state_dim();
    std::vector<Real> x0(ids.size() * D, Real(0));
    b.targets.reserve(ids.size());
    for (std::size_t r = 0; r < ids.size(); ++r) {
        x0[r * D] = set.x[ids[r]];
        b.targets.push_back(set.y[ids[r]]);
        b.example_ids.push_back(ids[r]);
    }
    b.x0 = TensorT<Real>::from(std::move(x0), {ids.size(), D});
    return b;
}

/// Images are mean-pooled down to the model's spatial size (a fixed
/// desk-scale preprocessing step), normalized, and padded with the zero
/// augment channels.
template <typename Real>
BatchT<Real> image_batch(const ImageDataset& ds, const std::vector<std::size_t>& ids,
                         const ModelGeometry& geom) {
    if (geom.kind != BlockKind::conv)
        throw ContractError("image_batch: model is not convolutional");
    if (ds.rows % geom.height != 0 || ds.cols % geom.width != 0)
        throw ConfigError("image_batch: model spatial size must divide the image size");
    const std::size_t fh = ds.rows / geom.height, fw = ds.cols / geom.width;
    const std::size_t C = geom.state_dim(), H = geom.height, W = geom.width;
    BatchT<Real> b;
    std::vector<Real> x0(ids.size() * C * H * W, Real(0));
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const std::uint8_t* src = ds.images.data() + ids[r] * ds.rows * ds.cols;
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                double acc = 0;
                for (std::size_t di = 0; di < fh; ++di)
                    for (std::size_t dj = 0; dj < fw; ++dj)
                        acc += src[(i * fh + di) * ds.cols + (j * fw + dj)];
                const double v = acc / (255.0 * static_cast<double>(fh * fw));
                x0[(r * C) * H * W + i * W + j] =
                    static_cast<Real>((v - ds.norm_mean) / ds.norm_std);
            }
        b.labels.push_back(ds.labels[ids[r]]);
        b.example_ids.push_back(ids[r]);
    }
    b.x0 = TensorT<Real>::from(std::move(x0), {ids.size(), C, H, W});
    return b;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------
struct EvalSummary {
    double accuracy = 0;     // classification
    double nll = 0;
    double auc = 0;          // filled from a TrainingLog, not by evaluate()
    double nfe_mean = 0;
    double nfe_std = 0;
    double ci_coverage = 0;  // regression
    double rmse = 0;         // regression, posterior predictive mean
};

namespace detail {

inline void finish_nfe(EvalSummary& s, const std::vector<double>& nfes) {
    if (nfes.empty()) return;
    double sum = 0;
    for (double v : nfes) sum += v;
    s.nfe_mean = sum / static_cast<double>(nfes.size());
    double var = 0;
    for (double v : nfes) var += (v - s.nfe_mean) * (v - s.nfe_mean);
    s.nfe_std = std::sqrt(var / static_cast<double>(nfes.size()));
}

template <typename Real>
std::vector<Real> predict_logits(const SdeBnnModelT<Real>& model,
                                 const BatchT<Real>& batch, const SolverConfig& sc,
                                 std::uint64_t path_seed, double* nfe_out) {
    auto bound = model.bind(nullptr);
    auto field = model.make_field(bound, batch.x0);
    auto diffusion = model.make_diffusion();
    BrownianPathT<Real> path(path_seed, model.hyper().dim(),
                             static_cast<Real>(sc.t0), static_cast<Real>(sc.T));
    auto rep = solve<Real>(*field, *diffusion, &path, model.initial_state(batch.x0, bound), sc);
    if (nfe_out) *nfe_out = static_cast<double>(rep.nfe_f);
    auto hT = model.readout(rep.final_state, static_cast<Real>(sc.T));
    return model.head_forward(bound, hT).vec();
}

}  // namespace detail

/// Classification evaluation: predictive probabilities averaged over
/// mc_samples posterior draws; accuracy, NLL and per-solve NFE statistics.
template <typename Real>
EvalSummary evaluate_classification(const SdeBnnModelT<Real>& model,
                                    const ImageDataset& ds, const SolverConfig& sc,
                                    int mc_samples, std::size_t subset,
                                    std::size_t batch_size, std::uint64_t eval_seed) {
    const std::size_t n = subset > 0 ? std::min(subset, ds.count) : ds.count;
    if (n == 0) throw ContractError("evaluate: empty dataset");
    if (mc_samples <= 0) throw ContractError("evaluate: mc_samples must be positive");
    const std::size_t K = ds.num_classes;

    EvalSummary out;
    const std::size_t n_batches = (n + batch_size - 1) / batch_size;
    struct BatchStat {
        std::size_t correct = 0;
        double nll = 0;
        std::vector<double> nfes;
    };
    std::vector<BatchStat> stats(n_batches);

    std::exception_ptr failure = nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1)
#endif
    for (long bi = 0; bi < static_cast<long>(n_batches); ++bi) {
        if (failure) continue;
        try {
            const std::size_t lo = static_cast<std::size_t>(bi) * batch_size;
            const std::size_t hi = std::min(n, lo + batch_size);
            std::vector<std::size_t> ids(hi - lo);
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = lo + i;
            auto batch = image_batch<Real>(ds, ids, model.geometry());

            auto& st = stats[bi];
            std::vector<double> probs(ids.size() * K, 0.0);
            for (int s = 0; s < mc_samples; ++s) {
                double nfe = 0;
                auto logits = detail::predict_logits(
                    model, batch, sc, hash_mix(eval_seed, bi, s), &nfe);
                st.nfes.push_back(nfe);
                for (std::size_t r = 0; r < ids.size(); ++r) {
                    double mx = logits[r * K];
                    for (std::size_t k = 1; k < K; ++k)
                        mx = std::max(mx, static_cast<double>(logits[r * K + k]));
                    double z = 0;
                    for (std::size_t k = 0; k < K; ++k)
                        z += std::exp(static_cast<double>(logits[r * K + k]) - mx);
                    for (std::size_t k = 0; k < K; ++k)
                        probs[r * K + k] +=
                            std::exp(static_cast<double>(logits[r * K + k]) - mx) / z;
                }
            }
            for (std::size_t r = 0; r < ids.size(); ++r) {
                std::size_t arg = 0;
                for (std::size_t k = 1; k < K; ++k)
                    if (probs[r * K + k] > probs[r * K + arg]) arg = k;
                const int truth = batch.labels[r];
                if (static_cast<int>(arg) == truth) ++st.correct;
                st.nll -= std::log(std::max(probs[r * K + truth] / mc_samples, 1e-300));
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

    std::size_t correct = 0;
    double nll_sum = 0;
    std::vector<double> nfes;
    for (const auto& st : stats) {
        correct += st.correct;
        nll_sum += st.nll;
        nfes.insert(nfes.end(), st.nfes.begin(), st.nfes.end());
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    out.nll = nll_sum / static_cast<double>(n);
    detail::finish_nfe(out, nfes);
    return out;
}

/// Regression evaluation: per-point predictive mixture over >= 30 posterior
/// samples; reports RMSE of the predictive mean, mixture NLL, and the 95%
/// central-interval coverage (moment-matched Gaussian interval).
template <typename Real>
EvalSummary evaluate_regression(const SdeBnnModelT<Real>& model,
                                const ToyRegressionSetT<Real>& set,
                                const SolverConfig& sc, int mc_samples,
                                std::uint64_t eval_seed) {
    const std::size_t n = set.x.size();
    if (n == 0) throw ContractError("evaluate: empty dataset");
    mc_samples = std::max(mc_samples, 30);

    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
    auto batch = toy_batch(set, ids, model.geometry());

    std::vector<double> mus(static_cast<std::size_t>(mc_samples) * n);
    std::vector<double> vars(static_cast<std::size_t>(mc_samples) * n);
    std::vector<double> nfes(static_cast<std::size_t>(mc_samples));
    std::exception_ptr failure = nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1)
#endif
    for (int s = 0; s < mc_samples; ++s) {
        if (failure) continue;
        try {
            double nfe = 0;
            auto params = detail::predict_logits(model, batch, sc,
                                                 hash_mix(eval_seed, 0xE7A1ull, s), &nfe);
            nfes[s] = nfe;
            for (std::size_t i = 0; i < n; ++i) {
                mus[s * n + i] = static_cast<double>(params[i * 2]);
                vars[s * n + i] = std::exp(static_cast<double>(params[i * 2 + 1]));
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

    EvalSummary out;
    double sse = 0, nll_sum = 0;
    std::size_t covered = 0;
    constexpr double kLog2Pi = 1.8378770664093453;
    for (std::size_t i = 0; i < n; ++i) {
        double mean_mu = 0, mean_var = 0, mu_sq = 0;
        for (int s = 0; s < mc_samples; ++s) {
            mean_mu += mus[s * n + i];
            mean_var += vars[s * n + i];
            mu_sq += mus[s * n + i] * mus[s * n + i];
        }
        mean_mu /= mc_samples;
        mean_var /= mc_samples;
        mu_sq /= mc_samples;
        const double total_var = mean_var + std::max(mu_sq - mean_mu * mean_mu, 0.0);
        const double y = static_cast<double>(set.y[i]);
        sse += (y - mean_mu) * (y - mean_mu);
        const double half = 1.959963984540054 * std::sqrt(total_var);
        if (y >= mean_mu - half && y <= mean_mu + half) ++covered;

        // mixture NLL via logsumexp over the per-sample Gaussians
        double mx = -1e300;
        std::vector<double> logp(mc_samples);
        for (int s = 0; s < mc_samples; ++s) {
            const double d = y - mus[s * n + i];
            logp[s] = -0.5 * (std::log(vars[s * n + i]) + d * d / vars[s * n + i] + kLog2Pi);
            mx = std::max(mx, logp[s]);
        }
        double acc = 0;
        for (int s = 0; s < mc_samples; ++s) acc += std::exp(logp[s] - mx);
        nll_sum -= mx + std::log(acc / mc_samples);
    }
    out.rmse = std::sqrt(sse / static_cast<double>(n));
    out.nll = nll_sum / static_cast<double>(n);
    out.ci_coverage = static_cast<double>(covered) / static_cast<double>(n);
    detail::finish_nfe(out, nfes);
    return out;
}

/// Predictive band of a regression model over a uniform input grid: per grid
/// point the moment-matched mixture mean and central 95% interval across
/// posterior weight paths. With prior_mode the weight channel follows the OU
/// prior instead of the learned drift, giving the prior-predictive band.
/// CSV columns: x, mean, lo95, hi95.
template <typename Real>
void write_predictive_csv(const SdeBnnModelT<Real>& model, const SolverConfig& sc,
                          double x_lo, double x_hi, std::size_t n_grid, int mc_samples,
                          std::uint64_t seed, const std::string& path,
                          bool prior_mode = false) {
    if (n_grid < 2) throw ContractError("predictive csv: need at least two grid points");
    mc_samples = std::max(mc_samples, 30);
    const std::size_t D = model.geometry().state_dim();
    std::vector<Real> x0(n_grid * D, Real(0));
    std::vector<double> grid(n_grid);
    for (std::size_t i = 0; i < n_grid; ++i) {
        grid[i] = x_lo + (x_hi - x_lo) * static_cast<double>(i) /
                             static_cast<double>(n_grid - 1);
        x0[i * D] = static_cast<Real>(grid[i]);
    }
    auto xt = TensorT<Real>::from(std::move(x0), {n_grid, D});

    std::vector<double> mus(static_cast<std::size_t>(mc_samples) * n_grid);
    std::vector<double> vars(static_cast<std::size_t>(mc_samples) * n_grid);
    for (int s = 0; s < mc_samples; ++s) {
        auto bound = model.bind(nullptr);
        auto field = model.make_field(bound, xt);
        if (auto* f = dynamic_cast<SdeBnnFieldBase<Real>*>(field.get()))
            f->use_prior_weight_drift(prior_mode);
        auto diffusion = model.make_diffusion();
        BrownianPathT<Real> path(hash_mix(seed, 0xF1Cull, s, prior_mode ? 1 : 0),
                                 model.hyper().dim(), static_cast<Real>(sc.t0),
                                 static_cast<Real>(sc.T));
        auto rep = solve<Real>(*field, *diffusion, &path,
                               model.initial_state(xt, bound), sc);
        auto hT = model.readout(rep.final_state, static_cast<Real>(sc.T));
        auto params = model.head_forward(bound, hT).vec();
        for (std::size_t i = 0; i < n_grid; ++i) {
            mus[s * n_grid + i] = static_cast<double>(params[i * 2]);
            vars[s * n_grid + i] = std::exp(static_cast<double>(params[i * 2 + 1]));
        }
    }

    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "x,mean,lo95,hi95\n";
    for (std::size_t i = 0; i < n_grid; ++i) {
        double mean_mu = 0, mean_var = 0, mu_sq = 0;
        for (int s = 0; s < mc_samples; ++s) {
            mean_mu += mus[s * n_grid + i];
            mean_var += vars[s * n_grid + i];
            mu_sq += mus[s * n_grid + i] * mus[s * n_grid + i];
        }
        mean_mu /= mc_samples;
        mean_var /= mc_samples;
        mu_sq /= mc_samples;
        const double half =
            1.959963984540054 *
            std::sqrt(mean_var + std::max(mu_sq - mean_mu * mean_mu, 0.0));
        out << format_double(grid[i]) << ',' << format_double(mean_mu) << ','
            << format_double(mean_mu - half) << ',' << format_double(mean_mu + half)
            << "\n";
    }
}

/// Normalized area under the test-accuracy-versus-epoch curve (trapezoid),
/// in [0,1] for accuracies in [0,1].
inline double auc_over_epochs(const TrainingLog& log) {
    if (log.rows.size() < 2)
        throw ContractError("auc_over_epochs: need at least two logged epochs");
    double area = 0;
    for (std::size_t i = 0; i + 1 < log.rows.size(); ++i) {
        const double de = static_cast<double>(log.rows[i + 1].epoch - log.rows[i].epoch);
        area += 0.5 * (log.rows[i].test_acc + log.rows[i + 1].test_acc) * de;
    }
    const double span =
        static_cast<double>(log.rows.back().epoch - log.rows.front().epoch);
    if (span <= 0) throw ContractError("auc_over_epochs: epochs must increase");
    return area / span;
}

}  // namespace sdebnn
