#include "sdebnn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace sdebnn {

using ordered_json = nlohmann::ordered_json;

void RunConfig::validate() const {
    solver.validate();
    train.validate();
    if (!(sigma > 0)) throw ConfigError("sigma must be positive");
    if (precision != "f32" && precision != "f64")
        throw ConfigError("precision must be f32 or f64");
    if (task == TaskKind::mnist) {
        if (model.image_size == 0 || 28 % model.image_size != 0)
            throw ConfigError("model.image_size must divide 28");
    }
    if (dynamics.xi < 0) throw ConfigError("dynamics.xi must be >= 0");
    geometry();  // throws on inconsistent block geometry
}

ModelGeometry RunConfig::geometry() const {
    ModelGeometry g;
    g.augment_dim = model.augment_dim;
    g.fx_hidden = model.fx_hidden;
    g.fw_hidden = model.fw_hidden;
    g.blocks = model.blocks;
    if (task == TaskKind::toy1d) {
        g.kind = BlockKind::dense;
        g.input_dim = 1;
        g.head = HeadKind::gaussian;
    } else {
        g.kind = BlockKind::conv;
        g.input_dim = 1;
        g.height = model.image_size;
        g.width = model.image_size;
        g.head = HeadKind::categorical;
        g.num_classes = 10;
    }
    g.drift_spec().validate();
    return g;
}

// ---------------------------------------------------------------------------
// Presets (hyperparameter-table columns at desk scale)
// ---------------------------------------------------------------------------

std::vector<std::string> preset_names() {
    return {"paper-toy", "paper-mnist-fixed", "paper-mnist-adaptive"};
}

RunConfig preset(const std::string& name) {
    RunConfig c;
    if (name == "paper-toy") {
        c.task = TaskKind::toy1d;
        c.sigma = 0.2;
        c.train.kl_coef = 0.0;
        c.train.lr_schedule = {{0, 1e-3}};
        c.train.batch_size = 50;
        c.train.epochs = 1000;
        c.train.mc_samples = 10;
        c.train.eval_mc_samples = 30;
        c.solver.method = SolverMethod::midpoint;
        c.solver.mode = SolverMode::fixed;
        c.solver.steps = 20;
        c.solver.t0 = 1.0;
        c.solver.T = 2.0;
        c.dynamics.activation = ActivationKind::swish;
        c.dynamics.xi = 1.0;
        c.model.augment_dim = 2;
        c.model.fx_hidden = 32;
        c.model.fw_hidden = {32};
        c.model.blocks = 1;
        return c;
    }
    if (name == "paper-mnist-fixed" || name == "paper-mnist-adaptive") {
        c.task = TaskKind::mnist;
        c.precision = "f32";  // the image pipeline is GEMM-bound
        c.sigma = 0.1;
        c.train.kl_coef = 1e-5;
        c.train.lr_schedule = {{0, 1e-3}};
        c.train.batch_size = 128;
        c.train.epochs = 100;
        c.train.mc_samples = 1;
        c.train.eval_mc_samples = 1;
        c.train.eval_subset = 2000;
        c.train.shards = 2;
        c.solver.method = SolverMethod::midpoint;
        c.solver.t0 = 1.0;
        c.solver.T = 2.0;
        c.dynamics.activation = ActivationKind::swish;
        c.dynamics.xi = 1.0;
        c.model.augment_dim = 2;
        c.model.fx_hidden = 32;
        c.model.fw_hidden = {1, 64, 1};
        c.model.blocks = 1;
        c.model.image_size = 14;
        c.data.train_subset = 5000;
        if (name == "paper-mnist-adaptive") {
            c.solver.mode = SolverMode::adaptive;
            c.solver.atol = 1e-3;
            c.solver.rtol = 1e-3;
            c.solver.error_norm = ErrorNorm::per_step;
            c.solver.max_nfe = 20000;
        } else {
            c.solver.mode = SolverMode::fixed;
            c.solver.steps = 20;
        }
        return c;
    }
    throw ConfigError("unknown preset: " + name);
}

// ---------------------------------------------------------------------------
// JSON (de)serialization with unknown-key rejection
// ---------------------------------------------------------------------------

namespace {

void require_keys(const ordered_json& j, const std::set<std::string>& allowed,
                  const std::string& scope, const std::string& origin) {
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key))
            throw ConfigError(origin + ": unknown config key: " +
                              (scope.empty() ? key : scope + "." + key));
    }
}

template <typename T>
void maybe(const ordered_json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_solver(const ordered_json& j, SolverConfig& sc, const std::string& origin) {
    require_keys(j,
                 {"method", "mode", "steps", "atol", "rtol", "t0", "T", "max_nfe",
                  "initial_step", "error_norm"},
                 "solver", origin);
    if (j.contains("method")) {
        const auto s = j.at("method").get<std::string>();
        if (s == "euler_maruyama") sc.method = SolverMethod::euler_maruyama;
        else if (s == "midpoint") sc.method = SolverMethod::midpoint;
        else throw ConfigError(origin + ": unknown solver.method: " + s);
    }
    if (j.contains("mode")) {
        const auto s = j.at("mode").get<std::string>();
        if (s == "fixed") sc.mode = SolverMode::fixed;
        else if (s == "adaptive") sc.mode = SolverMode::adaptive;
        else throw ConfigError(origin + ": unknown solver.mode: " + s);
    }
    maybe(j, "steps", sc.steps);
    maybe(j, "atol", sc.atol);
    maybe(j, "rtol", sc.rtol);
    maybe(j, "t0", sc.t0);
    maybe(j, "T", sc.T);
    maybe(j, "max_nfe", sc.max_nfe);
    maybe(j, "initial_step", sc.initial_step);
    if (j.contains("error_norm")) {
        const auto s = j.at("error_norm").get<std::string>();
        if (s == "per_unit_time") sc.error_norm = ErrorNorm::per_unit_time;
        else if (s == "per_step") sc.error_norm = ErrorNorm::per_step;
        else throw ConfigError(origin + ": unknown solver.error_norm: " + s);
    }
}

void parse_train(const ordered_json& j, TrainConfig& tc, const std::string& origin) {
    require_keys(j,
                 {"kl_coef", "lr_schedule", "batch_size", "epochs", "mc_samples", "seed",
                  "seed_mode", "shards", "eval_mc_samples", "eval_subset", "adam_beta1",
                  "adam_beta2", "adam_eps"},
                 "train", origin);
    maybe(j, "kl_coef", tc.kl_coef);
    if (j.contains("lr_schedule")) {
        tc.lr_schedule.clear();
        for (const auto& [k, v] : j.at("lr_schedule").items())
            tc.lr_schedule[std::stoi(k)] = v.get<double>();
    }
    maybe(j, "batch_size", tc.batch_size);
    maybe(j, "epochs", tc.epochs);
    maybe(j, "mc_samples", tc.mc_samples);
    maybe(j, "seed", tc.seed);
    if (j.contains("seed_mode")) {
        const auto s = j.at("seed_mode").get<std::string>();
        if (s == "per_sample") tc.seed_mode = SeedMode::per_sample;
        else if (s == "per_example") tc.seed_mode = SeedMode::per_example;
        else throw ConfigError(origin + ": unknown train.seed_mode: " + s);
    }
    maybe(j, "shards", tc.shards);
    maybe(j, "eval_mc_samples", tc.eval_mc_samples);
    maybe(j, "eval_subset", tc.eval_subset);
    maybe(j, "adam_beta1", tc.adam_beta1);
    maybe(j, "adam_beta2", tc.adam_beta2);
    maybe(j, "adam_eps", tc.adam_eps);
}

void parse_dynamics(const ordered_json& j, DynamicsConfig& dc, const std::string& origin) {
    require_keys(j, {"xi", "scaling", "activation", "parity"}, "dynamics", origin);
    maybe(j, "xi", dc.xi);
    if (j.contains("scaling")) {
        const auto s = j.at("scaling").get<std::string>();
        if (s == "nesterov_time_scale") dc.scaling = TimeScaling::nesterov_time_scale;
        else if (s == "none") dc.scaling = TimeScaling::none;
        else throw ConfigError(origin + ": unknown dynamics.scaling: " + s);
    }
    if (j.contains("activation"))
        dc.activation = activation_from_string(j.at("activation").get<std::string>());
    if (j.contains("parity")) {
        const auto s = j.at("parity").get<std::string>();
        if (s == "per_evaluation") dc.parity = ParityMode::per_evaluation;
        else if (s == "per_step") dc.parity = ParityMode::per_step;
        else throw ConfigError(origin + ": unknown dynamics.parity: " + s);
    }
}

void parse_model(const ordered_json& j, ModelConfig& mc, const std::string& origin) {
    require_keys(j, {"augment_dim", "fx_hidden", "fw_hidden", "blocks", "image_size"},
                 "model", origin);
    maybe(j, "augment_dim", mc.augment_dim);
    maybe(j, "fx_hidden", mc.fx_hidden);
    if (j.contains("fw_hidden"))
        mc.fw_hidden = j.at("fw_hidden").get<std::vector<std::size_t>>();
    maybe(j, "blocks", mc.blocks);
    maybe(j, "image_size", mc.image_size);
}

void parse_data(const ordered_json& j, DataConfig& dc, const std::string& origin) {
    require_keys(j,
                 {"toy_n_train", "toy_n_test", "toy_x_lo", "toy_x_hi", "toy_noise_std",
                  "data_dir", "train_subset", "test_subset"},
                 "data", origin);
    maybe(j, "toy_n_train", dc.toy_n_train);
    maybe(j, "toy_n_test", dc.toy_n_test);
    maybe(j, "toy_x_lo", dc.toy_x_lo);
    maybe(j, "toy_x_hi", dc.toy_x_hi);
    maybe(j, "toy_noise_std", dc.toy_noise_std);
    maybe(j, "data_dir", dc.data_dir);
    maybe(j, "train_subset", dc.train_subset);
    maybe(j, "test_subset", dc.test_subset);
}

}  // namespace

RunConfig parse_config_json(const std::string& text, RunConfig base,
                            const std::string& origin) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(origin + ": invalid JSON: " + e.what());
    }
    require_keys(j,
                 {"task", "variant", "out_dir", "precision", "sigma", "posterior_form",
                  "solver", "train", "dynamics", "model", "data"},
                 "", origin);
    if (j.contains("task")) base.task = task_from_string(j.at("task").get<std::string>());
    if (j.contains("variant"))
        base.variant = variant_from_string(j.at("variant").get<std::string>());
    maybe(j, "out_dir", base.out_dir);
    maybe(j, "precision", base.precision);
    maybe(j, "sigma", base.sigma);
    if (j.contains("posterior_form")) {
        const auto s = j.at("posterior_form").get<std::string>();
        if (s == "integrate_fq") base.posterior_form = PosteriorForm::integrate_fq;
        else if (s == "integrate_nn") base.posterior_form = PosteriorForm::integrate_nn;
        else throw ConfigError(origin + ": unknown posterior_form: " + s);
    }
    if (j.contains("solver")) parse_solver(j.at("solver"), base.solver, origin);
    if (j.contains("train")) parse_train(j.at("train"), base.train, origin);
    if (j.contains("dynamics")) parse_dynamics(j.at("dynamics"), base.dynamics, origin);
    if (j.contains("model")) parse_model(j.at("model"), base.model, origin);
    if (j.contains("data")) parse_data(j.at("data"), base.data, origin);
    return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_json(ss.str(), std::move(base), path);
}

std::string to_manifest_json(const RunConfig& cfg) {
    ordered_json j;
    j["task"] = to_string(cfg.task);
    j["variant"] = to_string(cfg.variant);
    j["out_dir"] = cfg.out_dir;
    j["precision"] = cfg.precision;
    j["sigma"] = cfg.sigma;
    j["posterior_form"] = to_string(cfg.posterior_form);

    ordered_json s;
    s["method"] = to_string(cfg.solver.method);
    s["mode"] = to_string(cfg.solver.mode);
    s["steps"] = cfg.solver.steps;
    s["atol"] = cfg.solver.atol;
    s["rtol"] = cfg.solver.rtol;
    s["t0"] = cfg.solver.t0;
    s["T"] = cfg.solver.T;
    s["max_nfe"] = cfg.solver.max_nfe;
    s["initial_step"] = cfg.solver.initial_step;
    s["error_norm"] = cfg.solver.error_norm == ErrorNorm::per_unit_time ? "per_unit_time"
                                                                        : "per_step";
    j["solver"] = s;

    ordered_json t;
    t["kl_coef"] = cfg.train.kl_coef;
    ordered_json lrs;
    for (const auto& [e, r] : cfg.train.lr_schedule) lrs[std::to_string(e)] = r;
    t["lr_schedule"] = lrs;
    t["batch_size"] = cfg.train.batch_size;
    t["epochs"] = cfg.train.epochs;
    t["mc_samples"] = cfg.train.mc_samples;
    t["seed"] = cfg.train.seed;
    t["seed_mode"] = to_string(cfg.train.seed_mode);
    t["shards"] = cfg.train.shards;
    t["eval_mc_samples"] = cfg.train.eval_mc_samples;
    t["eval_subset"] = cfg.train.eval_subset;
    t["adam_beta1"] = cfg.train.adam_beta1;
    t["adam_beta2"] = cfg.train.adam_beta2;
    t["adam_eps"] = cfg.train.adam_eps;
    j["train"] = t;

    ordered_json d;
    d["xi"] = cfg.dynamics.xi;
    d["scaling"] = cfg.dynamics.scaling == TimeScaling::nesterov_time_scale
                       ? "nesterov_time_scale"
                       : "none";
    d["activation"] = to_string(cfg.dynamics.activation);
    d["parity"] = cfg.dynamics.parity == ParityMode::per_evaluation ? "per_evaluation"
                                                                    : "per_step";
    j["dynamics"] = d;

    ordered_json m;
    m["augment_dim"] = cfg.model.augment_dim;
    m["fx_hidden"] = cfg.model.fx_hidden;
    m["fw_hidden"] = cfg.model.fw_hidden;
    m["blocks"] = cfg.model.blocks;
    m["image_size"] = cfg.model.image_size;
    j["model"] = m;

    ordered_json da;
    da["toy_n_train"] = cfg.data.toy_n_train;
    da["toy_n_test"] = cfg.data.toy_n_test;
    da["toy_x_lo"] = cfg.data.toy_x_lo;
    da["toy_x_hi"] = cfg.data.toy_x_hi;
    da["toy_noise_std"] = cfg.data.toy_noise_std;
    da["data_dir"] = cfg.data.data_dir;
    da["train_subset"] = cfg.data.train_subset;
    da["test_subset"] = cfg.data.test_subset;
    j["data"] = da;

    return j.dump(2) + "\n";
}

}  // namespace sdebnn
