// sdebnn: train/evaluate/compare SDE-BNN variants and fetch the MNIST data.
//
// Exit codes: 0 ok, 2 usage/config error, 3 solver divergence, 4 NFE budget.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sdebnn/runner.hpp"

namespace fs = std::filesystem;
using namespace sdebnn;

namespace {

struct Overrides {
    CLI::App* cmd = nullptr;
    std::string preset_name, config_path;
    std::string task, variant, out_dir, precision, activation, seed_mode, posterior_form;
    std::string solver_mode, solver_method, error_norm, parity, scaling, data_dir;
    double sigma = 0, xi = 0, kl_coef = 0, atol = 0, rtol = 0, lr = 0, noise = 0;
    std::uint64_t seed = 0;
    int epochs = 0, batch_size = 0, steps = 0, mc_samples = 0, shards = 0;
    int eval_mc = 0;
    long max_nfe = 0;
    std::size_t train_subset = 0, eval_subset = 0, image_size = 0;
    std::vector<std::size_t> fw_hidden;
    std::size_t fx_hidden = 0, augment = 0;

    void attach(CLI::App* app) {
        cmd = app;
        app->add_option("--preset", preset_name,
                        "configuration preset (paper-toy, paper-mnist-fixed, "
                        "paper-mnist-adaptive)");
        app->add_option("--config", config_path, "JSON config file (see manifest.json)");
        app->add_option("--task", task, "toy1d | mnist");
        app->add_option("--variant", variant,
                        "baseline | nesterov_direct | nesterov_skip");
        app->add_option("--out-dir", out_dir, "output directory");
        app->add_option("--precision", precision, "f32 | f64");
        app->add_option("--seed", seed, "global seed");
        app->add_option("--epochs", epochs, "training epochs");
        app->add_option("--batch-size", batch_size, "batch size");
        app->add_option("--mc-samples", mc_samples, "posterior samples per forward");
        app->add_option("--eval-mc-samples", eval_mc, "posterior samples at evaluation");
        app->add_option("--shards", shards, "batch shards per solve group");
        app->add_option("--kl-coef", kl_coef, "ELBO KL coefficient");
        app->add_option("--lr", lr, "constant learning rate");
        app->add_option("--sigma", sigma, "prior diffusion scale");
        app->add_option("--xi", xi, "residual strength");
        app->add_option("--activation", activation, "swish | mish | tanh | identity");
        app->add_option("--seed-mode", seed_mode, "per_sample | per_example");
        app->add_option("--posterior-form", posterior_form,
                        "integrate_fq | integrate_nn");
        app->add_option("--parity", parity, "per_evaluation | per_step");
        app->add_option("--scaling", scaling, "nesterov_time_scale | none");
        app->add_option("--solver-mode", solver_mode, "fixed | adaptive");
        app->add_option("--solver-method", solver_method, "euler_maruyama | midpoint");
        app->add_option("--steps", steps, "fixed-mode solver steps");
        app->add_option("--atol", atol, "adaptive absolute tolerance");
        app->add_option("--rtol", rtol, "adaptive relative tolerance");
        app->add_option("--error-norm", error_norm, "per_unit_time | per_step");
        app->add_option("--max-nfe", max_nfe, "drift evaluation budget per solve");
        app->add_option("--data-dir", data_dir, "IDX data directory");
        app->add_option("--train-subset", train_subset, "training subset size (0=full)");
        app->add_option("--eval-subset", eval_subset, "per-epoch eval subset (0=full)");
        app->add_option("--toy-noise-std", noise, "toy data noise std");
        app->add_option("--fx-hidden", fx_hidden, "drift f_x hidden width");
        app->add_option("--fw-hidden", fw_hidden, "posterior net hidden widths");
        app->add_option("--augment-dim", augment, "augmented state dims/channels");
        app->add_option("--image-size", image_size, "pooled image size (mnist)");
    }

    bool set(const char* flag) const { return cmd->count(flag) > 0; }

    RunConfig resolve() const {
        RunConfig cfg;
        if (set("--preset")) cfg = preset(preset_name);
        if (set("--config")) cfg = load_config_file(config_path, cfg);
        if (set("--task")) cfg.task = task_from_string(task);
        if (set("--variant")) cfg.variant = variant_from_string(variant);
        if (set("--out-dir")) cfg.out_dir = out_dir;
        if (set("--precision")) cfg.precision = precision;
        if (set("--seed")) cfg.train.seed = seed;
        if (set("--epochs")) cfg.train.epochs = epochs;
        if (set("--batch-size")) cfg.train.batch_size = batch_size;
        if (set("--mc-samples")) cfg.train.mc_samples = mc_samples;
        if (set("--eval-mc-samples")) cfg.train.eval_mc_samples = eval_mc;
        if (set("--shards")) cfg.train.shards = shards;
        if (set("--kl-coef")) cfg.train.kl_coef = kl_coef;
        if (set("--lr")) cfg.train.lr_schedule = {{0, lr}};
        if (set("--sigma")) cfg.sigma = sigma;
        if (set("--xi")) cfg.dynamics.xi = xi;
        if (set("--activation"))
            cfg.dynamics.activation = activation_from_string(activation);
        if (set("--seed-mode"))
            cfg.train.seed_mode =
                seed_mode == "per_example" ? SeedMode::per_example : SeedMode::per_sample;
        if (set("--posterior-form"))
            cfg.posterior_form = posterior_form == "integrate_nn"
                                     ? PosteriorForm::integrate_nn
                                     : PosteriorForm::integrate_fq;
        if (set("--parity"))
            cfg.dynamics.parity =
                parity == "per_step" ? ParityMode::per_step : ParityMode::per_evaluation;
        if (set("--scaling"))
            cfg.dynamics.scaling =
                scaling == "none" ? TimeScaling::none : TimeScaling::nesterov_time_scale;
        if (set("--solver-mode"))
            cfg.solver.mode =
                solver_mode == "adaptive" ? SolverMode::adaptive : SolverMode::fixed;
        if (set("--solver-method"))
            cfg.solver.method = solver_method == "euler_maruyama"
                                    ? SolverMethod::euler_maruyama
                                    : SolverMethod::midpoint;
        if (set("--steps")) cfg.solver.steps = steps;
        if (set("--atol")) cfg.solver.atol = atol;
        if (set("--rtol")) cfg.solver.rtol = rtol;
        if (set("--error-norm"))
            cfg.solver.error_norm = error_norm == "per_step" ? ErrorNorm::per_step
                                                             : ErrorNorm::per_unit_time;
        if (set("--max-nfe")) cfg.solver.max_nfe = max_nfe;
        if (set("--data-dir")) cfg.data.data_dir = data_dir;
        if (set("--train-subset")) cfg.data.train_subset = train_subset;
        if (set("--eval-subset")) cfg.train.eval_subset = eval_subset;
        if (set("--toy-noise-std")) cfg.data.toy_noise_std = noise;
        if (set("--fx-hidden")) cfg.model.fx_hidden = fx_hidden;
        if (set("--fw-hidden")) cfg.model.fw_hidden = fw_hidden;
        if (set("--augment-dim")) cfg.model.augment_dim = augment;
        if (set("--image-size")) cfg.model.image_size = image_size;

        // SDEBNN_OUT_DIR prefixes relative output paths.
        if (const char* root = std::getenv("SDEBNN_OUT_DIR");
            root && !cfg.out_dir.empty() && fs::path(cfg.out_dir).is_relative())
            cfg.out_dir = (fs::path(root) / cfg.out_dir).string();
        if (cfg.out_dir.empty()) cfg.out_dir = "runs/latest";
        return cfg;
    }
};

template <typename F>
int with_precision(const std::string& precision, F&& f) {
    if (precision == "f32") return f.template operator()<float>();
    return f.template operator()<double>();
}

void print_summary(const EvalSummary& s, bool classification) {
    if (classification) {
        std::cout << "accuracy      " << s.accuracy << "\n";
    } else {
        std::cout << "rmse          " << s.rmse << "\n"
                  << "ci_coverage   " << s.ci_coverage << "\n";
    }
    std::cout << "nll           " << s.nll << "\n"
              << "nfe_mean      " << s.nfe_mean << "\n"
              << "nfe_std       " << s.nfe_std << "\n";
}

int cmd_train(const Overrides& ov) {
    const RunConfig cfg = ov.resolve();
    return with_precision(cfg.precision, [&]<typename Real>() {
        auto log = run_train<Real>(cfg);
        if (!log.rows.empty()) {
            const auto& r = log.rows.back();
            std::cout << "epoch " << r.epoch << "  train_loss " << r.train_loss
                      << "  test_acc " << r.test_acc << "  test_nll " << r.test_nll
                      << "  mean_nfe_f " << r.mean_nfe_f << "\n";
        }
        std::cout << "artifacts: " << cfg.out_dir << "\n";
        return 0;
    });
}

int cmd_eval(const Overrides& ov, const std::string& ckpt_path, int eval_epoch) {
    auto ckpt = load_checkpoint(ckpt_path);
    RunConfig cfg = parse_config_json(ckpt.config_json, RunConfig{}, ckpt_path);
    // flags override the checkpoint's embedded config
    if (ov.set("--solver-mode"))
        cfg.solver.mode =
            ov.solver_mode == "adaptive" ? SolverMode::adaptive : SolverMode::fixed;
    if (ov.set("--solver-method"))
        cfg.solver.method = ov.solver_method == "euler_maruyama"
                                ? SolverMethod::euler_maruyama
                                : SolverMethod::midpoint;
    if (ov.set("--steps")) cfg.solver.steps = ov.steps;
    if (ov.set("--atol")) cfg.solver.atol = ov.atol;
    if (ov.set("--rtol")) cfg.solver.rtol = ov.rtol;
    if (ov.set("--error-norm"))
        cfg.solver.error_norm = ov.error_norm == "per_step" ? ErrorNorm::per_step
                                                            : ErrorNorm::per_unit_time;
    if (ov.set("--max-nfe")) cfg.solver.max_nfe = ov.max_nfe;
    if (ov.set("--eval-subset")) cfg.train.eval_subset = ov.eval_subset;
    if (ov.set("--eval-mc-samples")) cfg.train.eval_mc_samples = ov.eval_mc;
    if (ov.set("--data-dir")) cfg.data.data_dir = ov.data_dir;

    return with_precision(cfg.precision, [&]<typename Real>() {
        auto summary = run_eval<Real>(cfg, ckpt, eval_epoch);
        print_summary(summary, cfg.task == TaskKind::mnist);
        return 0;
    });
}

int cmd_compare(const Overrides& ov, const std::vector<std::string>& variant_names,
                int seeds) {
    const RunConfig cfg = ov.resolve();
    std::vector<Variant> variants;
    for (const auto& v : variant_names) variants.push_back(variant_from_string(v));
    return with_precision(cfg.precision, [&]<typename Real>() {
        auto report = run_compare<Real>(cfg, variants, seeds);
        int failures = 0;
        for (const auto& r : report.runs) {
            if (r.failed) {
                ++failures;
                std::cerr << to_string(r.variant) << " seed " << r.seed
                          << " failed: " << r.error << "\n";
            }
        }
        std::cout << "joined:  " << report.joined_csv_path << "\n"
                  << "summary: " << report.summary_csv_path << "\n";
        std::ifstream sum(report.summary_csv_path);
        std::cout << sum.rdbuf();
        return failures == static_cast<int>(report.runs.size()) ? 1 : 0;
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Nesterov-accelerated SDE Bayesian neural networks"};
    app.require_subcommand(1);

    auto* train_cmd = app.add_subcommand("train", "train a model and log per-epoch metrics");
    Overrides train_ov;
    train_ov.attach(train_cmd);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    Overrides eval_ov;
    eval_ov.attach(eval_cmd);
    std::string ckpt_path;
    int eval_epoch = -1;
    eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--eval-epoch", eval_epoch,
                         "epoch key for the evaluation seed (-1: final epoch)");

    auto* compare_cmd =
        app.add_subcommand("compare", "train several variants on identical data/seeds");
    Overrides compare_ov;
    compare_ov.attach(compare_cmd);
    std::vector<std::string> variant_names = {"baseline", "nesterov_skip"};
    int seeds = 3;
    compare_cmd->add_option("--variants", variant_names, "variants to compare")
        ->delimiter(',');
    compare_cmd->add_option("--seeds", seeds, "number of seeds per variant");

    auto* fetch_cmd = app.add_subcommand("fetch-data", "download and verify MNIST");
    std::string fetch_dataset = "mnist", fetch_dest = "data";
    fetch_cmd->add_option("--dataset", fetch_dataset, "dataset name (mnist)");
    fetch_cmd->add_option("--dest", fetch_dest, "destination directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*train_cmd) return cmd_train(train_ov);
        if (*eval_cmd) return cmd_eval(eval_ov, ckpt_path, eval_epoch);
        if (*compare_cmd) return cmd_compare(compare_ov, variant_names, seeds);
        if (*fetch_cmd) {
            if (fetch_dataset != "mnist")
                throw ConfigError("unknown dataset: " + fetch_dataset);
            fetch_mnist(fetch_dest);
            std::cout << "MNIST ready in " << fetch_dest << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const NfeBudgetError& e) {
        std::cerr << "NFE budget: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
