#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "sdebnn/csv.hpp"
#include "sdebnn/elbo.hpp"
#include "sdebnn/tasks.hpp"

namespace sdebnn {

// ---------------------------------------------------------------------------
// Task adapter: what the training loop needs from a dataset pair. test_acc in
// the log rows is accuracy for classification and the 95% predictive-interval
// coverage for regression.
// ---------------------------------------------------------------------------
template <typename Real>
class TaskAdapterT {
public:
    virtual ~TaskAdapterT() = default;
    virtual std::size_t train_size() const = 0;
    virtual BatchT<Real> train_batch(const std::vector<std::size_t>& ids) const = 0;
    virtual EvalSummary evaluate(const SdeBnnModelT<Real>& model, const SolverConfig& sc,
                                 int mc_samples, std::size_t subset,
                                 std::size_t batch_size, std::uint64_t eval_seed) const = 0;
    virtual bool classification() const = 0;
};

template <typename Real>
class ToyTaskT final : public TaskAdapterT<Real> {
public:
    ToyTaskT(ToyRegressionSetT<Real> train_set, ToyRegressionSetT<Real> test_set,
             ModelGeometry geom)
        : train_(std::move(train_set)), test_(std::move(test_set)), geom_(geom) {}

    std::size_t train_size() const override { return train_.x.size(); }
    BatchT<Real> train_batch(const std::vector<std::size_t>& ids) const override {
        return toy_batch(train_, ids, geom_);
    }
    EvalSummary evaluate(const SdeBnnModelT<Real>& model, const SolverConfig& sc,
                         int mc_samples, std::size_t /*subset*/, std::size_t /*bs*/,
                         std::uint64_t eval_seed) const override {
        return evaluate_regression(model, test_, sc, mc_samples > 0 ? mc_samples : 30,
                                   eval_seed);
    }
    bool classification() const override { return false; }

    const ToyRegressionSetT<Real>& train_set() const { return train_; }
    const ToyRegressionSetT<Real>& test_set() const { return test_; }

private:
    ToyRegressionSetT<Real> train_, test_;
    ModelGeometry geom_;
};

template <typename Real>
class ImageTaskT final : public TaskAdapterT<Real> {
public:
    ImageTaskT(ImageDataset train_set, ImageDataset test_set, ModelGeometry geom)
        : train_(std::move(train_set)), test_(std::move(test_set)), geom_(geom) {}

    std::size_t train_size() const override { return train_.count; }
    BatchT<Real> train_batch(const std::vector<std::size_t>& ids) const override {
        return image_batch<Real>(train_, ids, geom_);
    }
    EvalSummary evaluate(const SdeBnnModelT<Real>& model, const SolverConfig& sc,
                         int mc_samples, std::size_t subset, std::size_t batch_size,
                         std::uint64_t eval_seed) const override {
        return evaluate_classification(model, test_, sc,
                                       mc_samples > 0 ? mc_samples : 1, subset,
                                       batch_size, eval_seed);
    }
    bool classification() const override { return true; }

    const ImageDataset& test_set() const { return test_; }

private:
    ImageDataset train_, test_;
    ModelGeometry geom_;
};

/// Deterministic Fisher-Yates from the counter hash; independent of any
/// standard-library RNG implementation.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t key) {
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = hash_mix(key, i) % i;
        std::swap(ids[i - 1], ids[j]);
    }
    return ids;
}

// ---------------------------------------------------------------------------
// Training loop: epoch shuffle, Adam over the ELBO gradients, one evaluation
// row per epoch. With epochs == 0 only the untrained evaluation row is
// emitted. When out_dir is non-empty the checkpoint is rewritten after every
// epoch, so a divergence abort leaves the last good epoch on disk.
// ---------------------------------------------------------------------------
template <typename Real>
TrainingLog train(SdeBnnModelT<Real>& model, const TaskAdapterT<Real>& task,
                  const TrainConfig& tc, const SolverConfig& sc,
                  const std::string& out_dir = "",
                  const std::string& manifest_json = "") {
    tc.validate();
    sc.validate();
    TrainingLog log;
    AdamOptimizer<Real> opt(tc.adam_beta1, tc.adam_beta2, tc.adam_eps);

    auto eval_row = [&](int epoch, double train_loss, double train_kl, long wall_ms) {
        auto summary = task.evaluate(model, sc, tc.eval_mc_samples, tc.eval_subset,
                                     static_cast<std::size_t>(tc.batch_size),
                                     hash_mix(tc.seed, 0xE7A1ull, epoch));
        TrainingLogRow row;
        row.epoch = epoch;
        row.train_loss = train_loss;
        row.train_kl = train_kl;
        row.test_acc = task.classification() ? summary.accuracy : summary.ci_coverage;
        row.test_nll = summary.nll;
        row.mean_nfe_f = summary.nfe_mean;
        row.wall_ms = wall_ms;
        log.rows.push_back(row);
    };

    auto persist = [&]() {
        if (out_dir.empty()) return;
        std::filesystem::create_directories(out_dir);
        write_training_log(out_dir + "/training_log.csv", log);
        save_checkpoint(out_dir + "/checkpoint.bin",
                        checkpoint_from_model(model, manifest_json));
    };

    if (tc.epochs == 0) {
        eval_row(0, std::nan(""), std::nan(""), 0);
        persist();
        return log;
    }

    const std::size_t n = task.train_size();
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto t_start = std::chrono::steady_clock::now();
        auto order = shuffled_indices(n, hash_mix(tc.seed, 0x5FFFull, epoch));

        double loss_acc = 0, kl_acc = 0;
        std::size_t seen = 0;
        for (std::size_t lo = 0; lo < n; lo += static_cast<std::size_t>(tc.batch_size)) {
            const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(tc.batch_size));
            std::vector<std::size_t> ids(order.begin() + lo, order.begin() + hi);
            auto batch = task.train_batch(ids);
            auto res = elbo_batch(model, batch, tc, sc, epoch, /*with_grads=*/true);
            if (!std::isfinite(res.metrics.loss))
                throw DivergenceError(
                    0.0, "train: non-finite loss at epoch " + std::to_string(epoch) +
                             " (last finished epoch's checkpoint is retained)");
            opt.step(model.params(), res.grads, tc.learning_rate(epoch));
            loss_acc += res.metrics.loss * static_cast<double>(hi - lo);
            kl_acc += res.metrics.kl * static_cast<double>(hi - lo);
            seen += hi - lo;
        }
        const auto t_end = std::chrono::steady_clock::now();
        const long wall_ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(t_end - t_start).count();
        eval_row(epoch, loss_acc / static_cast<double>(seen),
                 kl_acc / static_cast<double>(seen), wall_ms);
        persist();
    }
    return log;
}

}  // namespace sdebnn
