/**
 * bliplab: dataset generation, training, evaluation, and prediction for
 * uncertainty-aware message passing on the charged-particle task.
 *
 * Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
 * failure, 1 internal error. Logging level via BLIPLAB_LOG=error|info|debug.
 */
#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "blip/experiment.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<int> samples;
    std::optional<std::string> out_dir;
    int jobs = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seed", f.seed, "override the config seed");
    cmd->add_option("--samples", f.samples, "MC forward passes for stochastic inference");
    cmd->add_option("--jobs", f.jobs, "worker threads for record generation / MC samples")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--out", f.out_dir, "override the output directory");
}

blip::ExperimentConfig load_config(const CommonFlags& f, const std::optional<double>& dropout_p = {},
                                   const std::optional<int>& members = {}) {
    blip::ExperimentConfig cfg = blip::ExperimentConfig::from_file(f.config_path);
    if (f.out_dir) cfg.out_dir = *f.out_dir;
    if (f.seed) {
        cfg.sim.seed = *f.seed;
        cfg.train.seed = *f.seed;
    }
    if (f.mode) {
        cfg.run_mode = blip::parse_run_mode(*f.mode);
        cfg.model.mode = cfg.run_mode == blip::RunMode::blip
                             ? blip::Mode::blip
                             : (cfg.run_mode == blip::RunMode::mc_dropout ? blip::Mode::mc_dropout
                                                                          : blip::Mode::deterministic);
        if (cfg.model.mode != blip::Mode::mc_dropout) cfg.model.dropout_p = 0.0;
    }
    if (dropout_p) {
        cfg.model.dropout_p = *dropout_p;
        if (cfg.model.mode != blip::Mode::mc_dropout)
            throw blip::ConfigError("--p is only meaningful with --mode mc_dropout");
    }
    if (members) cfg.ensemble_members = *members;
    if (f.samples) cfg.inference.samples = *f.samples;
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bliplab: charged-particle datasets, message-passing models, and uncertainty evaluation"};
    app.require_subcommand(1);

    CommonFlags gen_flags, train_flags, eval_flags, pred_flags;
    std::optional<double> train_p;
    std::optional<int> train_members;
    std::vector<std::string> eval_checkpoints;
    std::string eval_dataset, eval_dump;
    std::string pred_checkpoint, pred_input, pred_output;

    auto* gen = app.add_subcommand("generate", "simulate train/val/test splits and write a manifest");
    add_common(gen, gen_flags);

    auto* train = app.add_subcommand("train", "train a model (or ensemble) on generated data");
    add_common(train, train_flags);
    train->add_option("--mode", train_flags.mode, "deterministic|blip|mc_dropout|ensemble");
    train->add_option("--p", train_p, "dropout probability for --mode mc_dropout");
    train->add_option("--members", train_members, "ensemble size for --mode ensemble");

    auto* eval = app.add_subcommand("eval", "compute metric reports for checkpoints");
    add_common(eval, eval_flags);
    eval->add_option("--mode", eval_flags.mode, "interpret checkpoints under this mode");
    eval->add_option("--checkpoint", eval_checkpoints, "checkpoint file(s); several = ensemble");
    eval->add_option("--dataset", eval_dataset, "dataset to evaluate (default: test split)");
    eval->add_option("--from-predictions", eval_dump, "score a prediction dump instead of a checkpoint");

    auto* pred = app.add_subcommand("predict", "dump per-node predictions as JSON lines");
    add_common(pred, pred_flags);
    pred->add_option("--checkpoint", pred_checkpoint, "checkpoint file (default: <out>/checkpoints/model.ckpt)");
    pred->add_option("--input", pred_input, "input dataset (default: test split)");
    pred->add_option("--output", pred_output, "output path (default: <out>/reports/predictions.jsonl)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // bad invocation is a configuration error
    }

    try {
        if (gen->parsed()) {
            auto cfg = load_config(gen_flags);
            auto r = blip::run_generate(cfg, gen_flags.jobs);
            std::printf("manifest: %s\n", r.manifest_path.c_str());
        } else if (train->parsed()) {
            auto cfg = load_config(train_flags, train_p, train_members);
            auto r = blip::run_train(cfg);
            for (const auto& p : r.checkpoint_paths) std::printf("checkpoint: %s\n", p.c_str());
            std::printf("best_val_mse: %.17g\n", r.best_val_mse);
        } else if (eval->parsed()) {
            auto cfg = load_config(eval_flags);
            blip::EvalResult r;
            if (!eval_dump.empty()) {
                r = blip::run_eval_from_predictions(cfg, eval_dump);
            } else {
                std::vector<std::string> ckpts = eval_checkpoints;
                if (ckpts.empty()) {
                    namespace fs = std::filesystem;
                    if (cfg.run_mode == blip::RunMode::ensemble) {
                        for (int k = 0; k < cfg.ensemble_members; ++k)
                            ckpts.push_back((fs::path(cfg.out_dir) / "checkpoints" /
                                             ("member_" + std::to_string(k) + ".ckpt"))
                                                .string());
                    } else {
                        ckpts.push_back((fs::path(cfg.out_dir) / "checkpoints" / "model.ckpt").string());
                    }
                }
                const std::string dataset = eval_dataset.empty() ? cfg.data_path("test") : eval_dataset;
                r = blip::run_eval(cfg, ckpts, dataset, eval_flags.jobs);
            }
            for (const auto& p : r.report_paths) std::printf("report: %s\n", p.c_str());
        } else if (pred->parsed()) {
            auto cfg = load_config(pred_flags);
            namespace fs = std::filesystem;
            const std::string ckpt = pred_checkpoint.empty()
                                         ? (fs::path(cfg.out_dir) / "checkpoints" / "model.ckpt").string()
                                         : pred_checkpoint;
            const std::string input = pred_input.empty() ? cfg.data_path("test") : pred_input;
            const std::string output = pred_output.empty()
                                           ? (fs::path(cfg.out_dir) / "reports" / "predictions.jsonl").string()
                                           : pred_output;
            auto r = blip::run_predict(cfg, ckpt, input, output, pred_flags.jobs);
            std::printf("predictions: %s (%lld rows)\n", r.output_path.c_str(), static_cast<long long>(r.rows));
        }
    } catch (const blip::ConfigError& e) {
        blip::log_error("%s", e.what());
        return 2;
    } catch (const blip::DataError& e) {
        blip::log_error("%s", e.what());
        return 3;
    } catch (const blip::NumericError& e) {
        blip::log_error("%s", e.what());
        return 4;
    } catch (const std::exception& e) {
        blip::log_error("internal error: %s", e.what());
        return 1;
    }
    return 0;
}
