#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "sdebnn/config.hpp"
#include "sdebnn/csv.hpp"
#include "sdebnn/fetch.hpp"
#include "sdebnn/train.hpp"

namespace sdebnn {

inline std::uint64_t toy_data_seed(const RunConfig& cfg, bool test) {
    // The dataset is pinned independently of the training seed so seed sweeps
    // compare optimization noise on identical data.
    (void)cfg;
    return test ? 0xD47A'0002ull : 0xD47A'0001ull;
}

template <typename Real>
std::unique_ptr<TaskAdapterT<Real>> build_task(const RunConfig& cfg) {
    if (cfg.task == TaskKind::toy1d) {
        ToyRegressionConfig tcfg;
        tcfg.n = cfg.data.toy_n_train;
        tcfg.x_lo = cfg.data.toy_x_lo;
        tcfg.x_hi = cfg.data.toy_x_hi;
        tcfg.noise_std = cfg.data.toy_noise_std;
        tcfg.seed = toy_data_seed(cfg, false);
        auto train_set = make_toy_regression<Real>(tcfg);
        tcfg.n = cfg.data.toy_n_test;
        tcfg.seed = toy_data_seed(cfg, true);
        auto test_set = make_toy_regression<Real>(tcfg);
        return std::make_unique<ToyTaskT<Real>>(std::move(train_set), std::move(test_set),
                                                cfg.geometry());
    }
    const auto dir = cfg.data.data_dir;
    auto train_set = load_idx_dataset(dir + "/train-images-idx3-ubyte",
                                      dir + "/train-labels-idx1-ubyte", Split::train,
                                      cfg.data.train_subset);
    auto test_set = load_idx_dataset(dir + "/t10k-images-idx3-ubyte",
                                     dir + "/t10k-labels-idx1-ubyte", Split::test,
                                     cfg.data.test_subset);
    return std::make_unique<ImageTaskT<Real>>(std::move(train_set), std::move(test_set),
                                              cfg.geometry());
}

template <typename Real>
TrainingLog run_train(const RunConfig& cfg) {
    cfg.validate();
    auto model = build_model<Real>(cfg, cfg.train.seed);
    auto task = build_task<Real>(cfg);
    const std::string manifest = to_manifest_json(cfg);
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream(cfg.out_dir + "/manifest.json") << manifest;
        if (cfg.task == TaskKind::toy1d) {
            // figure-data exports for the toy task
            auto* toy = dynamic_cast<const ToyTaskT<Real>*>(task.get());
            write_toy_csv(cfg.out_dir + "/toy_train.csv", toy->train_set());
            write_toy_csv(cfg.out_dir + "/toy_test.csv", toy->test_set());
        }
    }
    auto log = train(model, *task, cfg.train, cfg.solver, cfg.out_dir, manifest);
    if (!cfg.out_dir.empty() && cfg.task == TaskKind::toy1d) {
        // predictive bands of the trained model (posterior and prior curves)
        const int mc = std::max(cfg.train.eval_mc_samples, 30);
        const std::uint64_t seed = hash_mix(cfg.train.seed, 0xBA0Dull);
        write_predictive_csv(model, cfg.solver, cfg.data.toy_x_lo, cfg.data.toy_x_hi,
                             101, mc, seed, cfg.out_dir + "/predictive_posterior.csv",
                             false);
        write_predictive_csv(model, cfg.solver, cfg.data.toy_x_lo, cfg.data.toy_x_hi,
                             101, mc, seed, cfg.out_dir + "/predictive_prior.csv", true);
    }
    return log;
}

/// Evaluates a checkpoint, by default reproducing the final training-log
/// row's evaluation settings (same subset, sample count and epoch-keyed
/// seed). eval_epoch < 0 means "the final training epoch".
template <typename Real>
EvalSummary run_eval(const RunConfig& cfg, const CheckpointData& ckpt, int eval_epoch) {
    cfg.validate();
    auto model = build_model<Real>(cfg, cfg.train.seed);
    load_params_into(model, ckpt);
    auto task = build_task<Real>(cfg);
    const int epoch = eval_epoch >= 0 ? eval_epoch : std::max(cfg.train.epochs - 1, 0);
    return task->evaluate(model, cfg.solver, cfg.train.eval_mc_samples,
                          cfg.train.eval_subset,
                          static_cast<std::size_t>(cfg.train.batch_size),
                          hash_mix(cfg.train.seed, 0xE7A1ull, epoch));
}

struct CompareRun {
    Variant variant;
    std::uint64_t seed;
    std::string dir;
    TrainingLog log;
    bool failed = false;
    std::string error;
};

struct CompareReport {
    std::vector<CompareRun> runs;
    std::string joined_csv_path;
    std::string summary_csv_path;
};

/// Trains every (variant, seed) pair with identical data and seed derivation,
/// then writes the joined per-epoch CSV and the mean +/- std summary. A
/// failing variant is reported but does not abort the others.
template <typename Real>
CompareReport run_compare(const RunConfig& base, const std::vector<Variant>& variants,
                          int n_seeds) {
    if (variants.size() < 2) throw ConfigError("compare: need at least two variants");
    if (n_seeds < 1) throw ConfigError("compare: need at least one seed");
    CompareReport report;
    std::filesystem::create_directories(base.out_dir);

    for (auto v : variants) {
        for (int s = 0; s < n_seeds; ++s) {
            CompareRun run;
            run.variant = v;
            run.seed = base.train.seed + static_cast<std::uint64_t>(s);
            run.dir = base.out_dir + "/" + to_string(v) + "_seed" + std::to_string(s);
            RunConfig cfg = base;
            cfg.variant = v;
            cfg.train.seed = run.seed;
            cfg.out_dir = run.dir;
            try {
                run.log = run_train<Real>(cfg);
            } catch (const std::exception& e) {
                run.failed = true;
                run.error = e.what();
            }
            report.runs.push_back(std::move(run));
        }
    }

    // Joined per-epoch CSV: per variant, metrics averaged over its seeds.
    const auto joined = base.out_dir + "/compare.csv";
    {
        std::ofstream out(joined);
        out << "epoch";
        for (auto v : variants)
            out << ',' << to_string(v) << "_test_acc," << to_string(v) << "_test_nll,"
                << to_string(v) << "_mean_nfe_f";
        out << "\n";
        std::size_t epochs = 0;
        for (const auto& r : report.runs)
            if (!r.failed) epochs = std::max(epochs, r.log.rows.size());
        for (std::size_t e = 0; e < epochs; ++e) {
            out << e;
            for (auto v : variants) {
                double acc = 0, nll = 0, nfe = 0;
                int cnt = 0;
                for (const auto& r : report.runs) {
                    if (r.failed || r.variant != v || e >= r.log.rows.size()) continue;
                    acc += r.log.rows[e].test_acc;
                    nll += r.log.rows[e].test_nll;
                    nfe += r.log.rows[e].mean_nfe_f;
                    ++cnt;
                }
                if (cnt > 0)
                    out << ',' << format_double(acc / cnt) << ',' << format_double(nll / cnt)
                        << ',' << format_double(nfe / cnt);
                else
                    out << ",,,";
            }
            out << "\n";
        }
    }

    // Summary: final accuracy, AUC, final NLL and last-5-epoch NFE per
    // variant, mean +/- std over seeds.
    const auto summary = base.out_dir + "/summary.csv";
    {
        std::ofstream out(summary);
        out << "variant,acc_mean,acc_std,auc_mean,auc_std,nll_mean,nll_std,"
               "nfe_last5_mean,nfe_last5_std\n";
        for (auto v : variants) {
            std::vector<double> accs, aucs, nlls, nfes;
            for (const auto& r : report.runs) {
                if (r.failed || r.variant != v || r.log.rows.empty()) continue;
                accs.push_back(r.log.rows.back().test_acc);
                nlls.push_back(r.log.rows.back().test_nll);
                if (r.log.rows.size() >= 2) aucs.push_back(auc_over_epochs(r.log));
                double nfe = 0;
                const std::size_t k = std::min<std::size_t>(5, r.log.rows.size());
                for (std::size_t i = r.log.rows.size() - k; i < r.log.rows.size(); ++i)
                    nfe += r.log.rows[i].mean_nfe_f;
                nfes.push_back(nfe / static_cast<double>(k));
            }
            auto stats = [](const std::vector<double>& xs) {
                if (xs.empty()) return std::pair<double, double>{0, 0};
                double m = 0;
                for (double x : xs) m += x;
                m /= static_cast<double>(xs.size());
                double var = 0;
                for (double x : xs) var += (x - m) * (x - m);
                return std::pair<double, double>{
                    m, std::sqrt(var / static_cast<double>(xs.size()))};
            };
            auto [am, as] = stats(accs);
            auto [um, us] = stats(aucs);
            auto [nm, ns] = stats(nlls);
            auto [fm, fs] = stats(nfes);
            out << to_string(v) << ',' << format_double(am) << ',' << format_double(as)
                << ',' << format_double(um) << ',' << format_double(us) << ','
                << format_double(nm) << ',' << format_double(ns) << ','
                << format_double(fm) << ',' << format_double(fs) << "\n";
        }
    }
    report.joined_csv_path = joined;
    report.summary_csv_path = summary;
    return report;
}

}  // namespace sdebnn
