// flowreg: deformable registration on synthetic cardiac phantoms via
// flow matching in displacement-field space.
//
// Subcommands: synth, train, register, evaluate. Every flag maps onto a
// key=value entry of the run configuration; --config loads a file first and
// explicit flags override it.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "flowreg/commands.hpp"

namespace {

using flowreg::RunConfig;

struct CommonFlags {
    std::string config_path;
    std::optional<std::int64_t> seed;
    std::optional<std::string> out;
    std::optional<std::int64_t> threads;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "key=value configuration file");
        app->add_option("--seed", seed, "root RNG seed");
        app->add_option("--out", out, "output directory");
        app->add_option("--threads", threads, "worker thread count (0 = default)");
    }

    void apply(RunConfig& cfg) const {
        if (!config_path.empty()) cfg.load_file(config_path);
        if (seed) cfg.set("seed", std::to_string(*seed));
        if (out) cfg.set("out", *out);
        if (threads) cfg.set("threads", std::to_string(*threads));
    }
};

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(int(v[i]));
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flow-matching deformable registration toolkit"};
    app.require_subcommand(1);

    CommonFlags synth_common, train_common, register_common, evaluate_common;

    // --- synth ---
    auto* synth = app.add_subcommand("synth", "generate a phantom dataset");
    synth_common.attach(synth);
    std::optional<std::int64_t> synth_cases;
    synth->add_option("--cases", synth_cases, "number of cases");

    // --- train ---
    auto* train = app.add_subcommand("train", "train on a phantom dataset");
    train_common.attach(train);
    std::optional<std::string> train_data, train_resume, train_direction;
    std::optional<std::int64_t> train_epochs;
    train->add_option("--data", train_data, "dataset directory");
    train->add_option("--epochs", train_epochs, "epoch count");
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    train->add_option("--direction", train_direction, "es_to_ed or ed_to_es");

    // --- register ---
    auto* reg = app.add_subcommand("register", "register one image pair");
    register_common.attach(reg);
    std::optional<std::string> reg_ckpt, reg_fixed, reg_moving;
    std::optional<std::int64_t> reg_steps, reg_io_steps;
    std::optional<double> reg_eta, reg_lambda_g, reg_io_lr;
    bool no_sde = false, no_heun = false, no_ig = false, no_guidance = false;
    reg->add_option("--checkpoint", reg_ckpt, "FRWT checkpoint");
    reg->add_option("--fixed", reg_fixed, "fixed image FVOL");
    reg->add_option("--moving", reg_moving, "moving image FVOL");
    reg->add_option("--steps", reg_steps, "sampler steps N");
    reg->add_option("--eta", reg_eta, "churn parameter (default saturates)");
    reg->add_option("--lambda-g", reg_lambda_g, "guidance weight");
    reg->add_flag("--no-sde", no_sde, "disable SDE churn");
    reg->add_flag("--no-heun", no_heun, "disable Heun correction");
    reg->add_flag("--no-ig", no_ig, "disable Initial Guess");
    reg->add_flag("--no-guidance", no_guidance, "disable guidance");
    reg->add_option("--instance-opt-steps", reg_io_steps, "instance optimisation steps");
    reg->add_option("--instance-opt-lr", reg_io_lr, "instance optimisation learning rate");

    // --- evaluate ---
    auto* eval = app.add_subcommand("evaluate", "evaluate predictions on a dataset");
    evaluate_common.attach(eval);
    std::optional<std::string> eval_data, eval_pred, eval_ckpt, eval_split, eval_direction;
    std::vector<int> eval_sweep;
    eval->add_option("--data", eval_data, "dataset directory");
    eval->add_option("--pred", eval_pred, "directory of predicted fields (case_XXXX.fvol)");
    eval->add_option("--checkpoint", eval_ckpt, "run inference from this checkpoint instead");
    eval->add_option("--sweep-steps", eval_sweep, "step counts to sweep")->delimiter(',');
    eval->add_option("--split", eval_split, "train/val/test/all");
    eval->add_option("--direction", eval_direction, "es_to_ed or ed_to_es");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg;
        if (synth->parsed()) {
            synth_common.apply(cfg);
            if (synth_cases) cfg.set("phantom.cases", std::to_string(*synth_cases));
            return flowreg::cmd_synth(cfg);
        }
        if (train->parsed()) {
            train_common.apply(cfg);
            if (train_data) cfg.set("data.dir", *train_data);
            if (train_epochs) cfg.set("train.epochs", std::to_string(*train_epochs));
            if (train_resume) cfg.set("train.resume", *train_resume);
            if (train_direction) cfg.set("direction", *train_direction);
            return flowreg::cmd_train(cfg);
        }
        if (reg->parsed()) {
            register_common.apply(cfg);
            if (reg_ckpt) cfg.set("register.checkpoint", *reg_ckpt);
            if (reg_fixed) cfg.set("register.fixed", *reg_fixed);
            if (reg_moving) cfg.set("register.moving", *reg_moving);
            if (reg_steps) cfg.set("sampler.steps", std::to_string(*reg_steps));
            if (reg_eta) {
                cfg.set("sampler.eta", std::to_string(*reg_eta));
                cfg.set("sampler.eta_auto", "false");
            }
            if (reg_lambda_g) cfg.set("sampler.lambda_g", std::to_string(*reg_lambda_g));
            if (no_sde) cfg.set("sampler.sde", "false");
            if (no_heun) cfg.set("sampler.heun", "false");
            if (no_ig) cfg.set("sampler.ig", "false");
            if (no_guidance) cfg.set("sampler.guidance", "false");
            if (reg_io_steps) {
                cfg.set("register.instance_opt_steps", std::to_string(*reg_io_steps));
            }
            if (reg_io_lr) cfg.set("register.instance_opt_lr", std::to_string(*reg_io_lr));
            return flowreg::cmd_register(cfg);
        }
        if (eval->parsed()) {
            evaluate_common.apply(cfg);
            if (eval_data) cfg.set("data.dir", *eval_data);
            if (eval_pred) cfg.set("evaluate.pred_dir", *eval_pred);
            if (eval_ckpt) cfg.set("evaluate.checkpoint", *eval_ckpt);
            if (!eval_sweep.empty()) cfg.set("evaluate.sweep_steps", join_ints(eval_sweep));
            if (eval_split) cfg.set("evaluate.split", *eval_split);
            if (eval_direction) cfg.set("direction", *eval_direction);
            return flowreg::cmd_evaluate(cfg);
        }
    } catch (const std::exception& e) {
        std::cerr << "flowreg: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
