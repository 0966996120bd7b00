#pragma once

#include <string>
#include <vector>

#include "sdebnn/dynamics.hpp"
#include "sdebnn/elbo.hpp"
#include "sdebnn/model.hpp"
#include "sdebnn/solver.hpp"

namespace sdebnn {

enum class TaskKind { toy1d, mnist };

inline const char* to_string(TaskKind t) { return t == TaskKind::toy1d ? "toy1d" : "mnist"; }

inline TaskKind task_from_string(const std::string& s) {
    if (s == "toy1d") return TaskKind::toy1d;
    if (s == "mnist") return TaskKind::mnist;
    throw ConfigError("unknown task: " + s + " (expected toy1d or mnist)");
}

struct DataConfig {
    // toy1d
    std::size_t toy_n_train = 200;
    std::size_t toy_n_test = 200;
    double toy_x_lo = -2.0, toy_x_hi = 2.0;
    double toy_noise_std = 0.1;
    // mnist
    std::string data_dir = "data";
    std::size_t train_subset = 5000;  // 0 = full training set
    std::size_t test_subset = 0;      // 0 = full test set
};

struct ModelConfig {
    std::size_t augment_dim = 2;
    std::size_t fx_hidden = 32;
    std::vector<std::size_t> fw_hidden = {32};
    int blocks = 1;
    std::size_t image_size = 14;  // conv tasks: pooled spatial size
};

// The resolved configuration of one run; serialized verbatim into the
// manifest, which is itself a valid --config file.
struct RunConfig {
    TaskKind task = TaskKind::toy1d;
    Variant variant = Variant::nesterov_skip;
    std::string out_dir;
    std::string precision = "f64";  // f32 | f64
    double sigma = 0.2;             // prior diffusion scale
    PosteriorForm posterior_form = PosteriorForm::integrate_fq;
    SolverConfig solver;
    TrainConfig train;
    DynamicsConfig dynamics;
    ModelConfig model;
    DataConfig data;

    void validate() const;
    ModelGeometry geometry() const;
};

/// Presets named after the hyperparameter-table columns.
std::vector<std::string> preset_names();
RunConfig preset(const std::string& name);

/// Parses a config JSON file over `base`; unknown keys are rejected with the
/// offending key path.
RunConfig load_config_file(const std::string& path, RunConfig base);
RunConfig parse_config_json(const std::string& text, RunConfig base,
                            const std::string& origin);

/// Stable serialized form (ordered keys); re-parsing reproduces the config.
std::string to_manifest_json(const RunConfig& cfg);

template <typename Real>
SdeBnnModelT<Real> build_model(const RunConfig& cfg, std::uint64_t seed) {
    PriorConfigT<Real> prior;
    prior.sigma = static_cast<Real>(cfg.sigma);
    // the run-level variant is authoritative over the dynamics block
    DynamicsConfig dyn = cfg.dynamics;
    dyn.variant = cfg.variant;
    return SdeBnnModelT<Real>(cfg.geometry(), prior, cfg.posterior_form, dyn, seed);
}

}  // namespace sdebnn
