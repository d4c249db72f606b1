/**
 * Operator-facing experiment layer: strict JSON config, the experiment
 * directory layout <out>/{manifest.json, data/, checkpoints/, logs/,
 * reports/}, and the generate / train / eval / predict commands shared by
 * the CLI and the tests.
 */
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blip/coulomb.hpp"
#include "blip/inference.hpp"
#include "blip/metrics.hpp"
#include "blip/train.hpp"

namespace blip {

// ---------------------------------------------------------------------------
// Logging (BLIPLAB_LOG = error | info | debug)
// ---------------------------------------------------------------------------

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("BLIPLAB_LOG");
        if (!env) return LogLevel::info;
        const std::string v = env;
        if (v == "error") return LogLevel::error;
        if (v == "debug") return LogLevel::debug;
        return LogLevel::info;
    }();
    return level;
}

template <class... Args>
inline void log_at(LogLevel lvl, const char* fmt, Args... args) {
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    const char* tag = lvl == LogLevel::error ? "error" : (lvl == LogLevel::info ? "info" : "debug");
    std::fprintf(stderr, "[bliplab:%s] ", tag);
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

inline void log_info(const char* fmt, auto... args) { log_at(LogLevel::info, fmt, args...); }
inline void log_debug(const char* fmt, auto... args) { log_at(LogLevel::debug, fmt, args...); }
inline void log_error(const char* fmt, auto... args) { log_at(LogLevel::error, fmt, args...); }

// ---------------------------------------------------------------------------
// Strict config parsing
// ---------------------------------------------------------------------------

namespace cfgdetail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& section,
                                std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) ok = true;
        if (!ok)
            throw ConfigError("unknown config key '" + (section.empty() ? it.key() : section + "." + it.key()) + "'");
    }
}

template <class T>
inline T get_typed(const nlohmann::json& j, const std::string& section, const char* key, const char* type_name,
                   T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + section + "." + key + "': expected " + type_name);
    }
}

}  // namespace cfgdetail

enum class RunMode { deterministic, blip, mc_dropout, ensemble };

inline RunMode parse_run_mode(const std::string& s) {
    if (s == "deterministic") return RunMode::deterministic;
    if (s == "blip") return RunMode::blip;
    if (s == "mc_dropout") return RunMode::mc_dropout;
    if (s == "ensemble") return RunMode::ensemble;
    throw ConfigError("unknown mode '" + s + "' (expected deterministic|blip|mc_dropout|ensemble)");
}

struct InferenceSettings {
    int samples = 100;          // stochastic forward passes for MC inference
    std::string method = "mc";  // mc | map
    double aleatoric_floor = 0.0;
};

struct ExperimentConfig {
    std::string out_dir;
    SimConfig sim;
    int n_train = 3000, n_val = 3000, n_test = 3000;
    std::optional<std::string> train_path, val_path, test_path;  // default: <out>/data/<split>.jsonl
    ModelConfig model;
    RunMode run_mode = RunMode::deterministic;
    TrainConfig train;
    InferenceSettings inference;
    int ensemble_members = 4;

    std::string data_path(const char* split) const {
        if (std::string(split) == "train" && train_path) return *train_path;
        if (std::string(split) == "val" && val_path) return *val_path;
        if (std::string(split) == "test" && test_path) return *test_path;
        return (std::filesystem::path(out_dir) / "data" / (std::string(split) + ".jsonl")).string();
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        cfgdetail::reject_unknown_keys(j, "", {"out_dir", "sim", "data", "model", "train", "inference", "ensemble"});
        ExperimentConfig c;
        if (!j.contains("out_dir")) throw ConfigError("missing config key 'out_dir' (expected string)");
        try {
            c.out_dir = j.at("out_dir").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key 'out_dir': expected string");
        }

        if (j.contains("sim")) {
            const auto& s = j.at("sim");
            cfgdetail::reject_unknown_keys(s, "sim",
                                           {"n_particles", "box_half_size", "interaction_strength", "dt", "n_steps",
                                            "softening", "init_pos_std", "init_vel_norm", "wall_stiffness", "seed"});
            c.sim.n_particles = cfgdetail::get_typed<int>(s, "sim", "n_particles", "integer", c.sim.n_particles);
            c.sim.box_half_size =
                cfgdetail::get_typed<double>(s, "sim", "box_half_size", "number", c.sim.box_half_size);
            c.sim.interaction_strength =
                cfgdetail::get_typed<double>(s, "sim", "interaction_strength", "number", c.sim.interaction_strength);
            c.sim.dt = cfgdetail::get_typed<double>(s, "sim", "dt", "number", c.sim.dt);
            c.sim.n_steps = cfgdetail::get_typed<int>(s, "sim", "n_steps", "integer", c.sim.n_steps);
            c.sim.softening = cfgdetail::get_typed<double>(s, "sim", "softening", "number", c.sim.softening);
            c.sim.init_pos_std = cfgdetail::get_typed<double>(s, "sim", "init_pos_std", "number", c.sim.init_pos_std);
            c.sim.init_vel_norm =
                cfgdetail::get_typed<double>(s, "sim", "init_vel_norm", "number", c.sim.init_vel_norm);
            c.sim.wall_stiffness =
                cfgdetail::get_typed<double>(s, "sim", "wall_stiffness", "number", c.sim.wall_stiffness);
            c.sim.seed = cfgdetail::get_typed<std::uint64_t>(s, "sim", "seed", "integer", c.sim.seed);
            c.sim.validate();
        }

        if (j.contains("data")) {
            const auto& d = j.at("data");
            cfgdetail::reject_unknown_keys(d, "data",
                                           {"n_train", "n_val", "n_test", "train_path", "val_path", "test_path"});
            c.n_train = cfgdetail::get_typed<int>(d, "data", "n_train", "integer", c.n_train);
            c.n_val = cfgdetail::get_typed<int>(d, "data", "n_val", "integer", c.n_val);
            c.n_test = cfgdetail::get_typed<int>(d, "data", "n_test", "integer", c.n_test);
            if (d.contains("train_path"))
                c.train_path = cfgdetail::get_typed<std::string>(d, "data", "train_path", "string", "");
            if (d.contains("val_path"))
                c.val_path = cfgdetail::get_typed<std::string>(d, "data", "val_path", "string", "");
            if (d.contains("test_path"))
                c.test_path = cfgdetail::get_typed<std::string>(d, "data", "test_path", "string", "");
        }

        if (j.contains("model")) {
            const auto& m = j.at("model");
            cfgdetail::reject_unknown_keys(m, "model",
                                           {"architecture", "mode", "n_layers", "hidden_dim", "dropout_p", "p_min",
                                            "p_max", "inference_hidden"});
            const std::string arch = cfgdetail::get_typed<std::string>(m, "model", "architecture", "string", "gnn");
            if (arch == "gnn")
                c.model.architecture = Architecture::gnn;
            else if (arch == "egnn")
                c.model.architecture = Architecture::egnn;
            else
                throw ConfigError("config key 'model.architecture': expected gnn|egnn, got '" + arch + "'");
            c.run_mode = parse_run_mode(cfgdetail::get_typed<std::string>(m, "model", "mode", "string", "deterministic"));
            c.model.mode = c.run_mode == RunMode::blip
                               ? Mode::blip
                               : (c.run_mode == RunMode::mc_dropout ? Mode::mc_dropout : Mode::deterministic);
            c.model.n_layers = cfgdetail::get_typed<int>(m, "model", "n_layers", "integer", c.model.n_layers);
            c.model.hidden_dim = cfgdetail::get_typed<int>(m, "model", "hidden_dim", "integer", c.model.hidden_dim);
            c.model.dropout_p = cfgdetail::get_typed<double>(m, "model", "dropout_p", "number", c.model.dropout_p);
            c.model.p_min = cfgdetail::get_typed<double>(m, "model", "p_min", "number", c.model.p_min);
            c.model.p_max = cfgdetail::get_typed<double>(m, "model", "p_max", "number", c.model.p_max);
            c.model.inference_hidden =
                cfgdetail::get_typed<int>(m, "model", "inference_hidden", "integer", c.model.inference_hidden);
            c.model.validate();
        }

        if (j.contains("train")) {
            const auto& t = j.at("train");
            cfgdetail::reject_unknown_keys(t, "train",
                                           {"epochs", "batch_size", "lr", "optimizer", "kl_weight", "prior_p",
                                            "grad_clip", "weight_decay", "seed", "eval_every"});
            c.train = TrainConfig::from_json(t);
        }

        if (j.contains("inference")) {
            const auto& i = j.at("inference");
            cfgdetail::reject_unknown_keys(i, "inference", {"samples", "method", "aleatoric_floor"});
            c.inference.samples = cfgdetail::get_typed<int>(i, "inference", "samples", "integer", c.inference.samples);
            c.inference.method = cfgdetail::get_typed<std::string>(i, "inference", "method", "string", c.inference.method);
            if (c.inference.method != "mc" && c.inference.method != "map")
                throw ConfigError("config key 'inference.method': expected mc|map");
            c.inference.aleatoric_floor =
                cfgdetail::get_typed<double>(i, "inference", "aleatoric_floor", "number", c.inference.aleatoric_floor);
        }

        if (j.contains("ensemble")) {
            const auto& e = j.at("ensemble");
            cfgdetail::reject_unknown_keys(e, "ensemble", {"members"});
            c.ensemble_members = cfgdetail::get_typed<int>(e, "ensemble", "members", "integer", c.ensemble_members);
        }
        return c;
    }

    static ExperimentConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config: " + path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config parse error in " + path + ": " + e.what());
        }
        return from_json(j);
    }

    /// Canonical effective config (defaults filled in); feeds the manifest hash.
    nlohmann::json to_json() const {
        nlohmann::json sim_j{{"n_particles", sim.n_particles},
                             {"box_half_size", sim.box_half_size},
                             {"interaction_strength", sim.interaction_strength},
                             {"dt", sim.dt},
                             {"n_steps", sim.n_steps},
                             {"softening", sim.softening},
                             {"init_pos_std", sim.init_pos_std},
                             {"init_vel_norm", sim.init_vel_norm},
                             {"wall_stiffness", sim.wall_stiffness},
                             {"seed", sim.seed}};
        nlohmann::json data_j{{"n_train", n_train}, {"n_val", n_val}, {"n_test", n_test}};
        nlohmann::json model_j = model.to_json();
        if (run_mode == RunMode::ensemble) model_j["mode"] = "ensemble";
        return nlohmann::json{{"out_dir", out_dir},
                              {"sim", sim_j},
                              {"data", data_j},
                              {"model", model_j},
                              {"train", train.to_json()},
                              {"inference",
                               {{"samples", inference.samples},
                                {"method", inference.method},
                                {"aleatoric_floor", inference.aleatoric_floor}}},
                              {"ensemble", {{"members", ensemble_members}}}};
    }
};

/// Hash of the scientific configuration only: output locations do not
/// change what an experiment computes, so reruns into different
/// directories share the hash.
inline std::string config_hash(const ExperimentConfig& cfg) {
    nlohmann::json j = cfg.to_json();
    j.erase("out_dir");
    const std::uint64_t h = detail::fnv1a(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateResult {
    std::string train_path, val_path, test_path, manifest_path;
};

inline GenerateResult run_generate(const ExperimentConfig& cfg, int jobs = 1) {
    namespace fs = std::filesystem;
    const fs::path out(cfg.out_dir);
    fs::create_directories(out / "data");

    RngStream root(cfg.sim.seed);
    auto make_split = [&](const char* split, int count) {
        std::vector<ParticleGraph> graphs(static_cast<std::size_t>(count));
        detail::parallel_indexed(count, jobs, [&](std::int64_t i) {
            RngStream rec = root.derive(split, static_cast<std::uint64_t>(i));
            graphs[static_cast<std::size_t>(i)] = simulate(cfg.sim, rec);
        });
        const std::string path = cfg.data_path(split);
        write_dataset(path, graphs);
        log_info("wrote %d records to %s", count, path.c_str());
        return path;
    };

    GenerateResult r;
    r.train_path = make_split("train", cfg.n_train);
    r.val_path = make_split("val", cfg.n_val);
    r.test_path = make_split("test", cfg.n_test);

    nlohmann::json manifest{{"config", cfg.to_json()},
                            {"config_hash", config_hash(cfg)},
                            {"seed", cfg.sim.seed},
                            {"files",
                             {{"train", r.train_path}, {"val", r.val_path}, {"test", r.test_path}}},
                            {"counts", {{"train", cfg.n_train}, {"val", cfg.n_val}, {"test", cfg.n_test}}}};
    r.manifest_path = (out / "manifest.json").string();
    std::ofstream m(r.manifest_path);
    if (!m) throw DataError("cannot write manifest: " + r.manifest_path);
    m << manifest.dump(2) << '\n';
    return r;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainResult {
    std::vector<std::string> checkpoint_paths;
    std::string log_path, summary_path;
    double best_val_mse = std::numeric_limits<double>::quiet_NaN();
};

inline TrainResult run_train(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    const fs::path out(cfg.out_dir);
    fs::create_directories(out / "checkpoints");
    fs::create_directories(out / "logs");

    auto train_data = read_dataset(cfg.data_path("train"), cfg.sim.n_particles);
    auto val_data = read_dataset(cfg.data_path("val"), cfg.sim.n_particles);
    log_info("loaded %zu train / %zu val records", train_data.size(), val_data.size());

    TrainResult result;
    result.log_path = (out / "logs" / "train_log.csv").string();
    std::ofstream log_csv(result.log_path);
    log_csv << "run,epoch,train_loss,mse,kl,val_mse\n";
    log_csv.precision(17);

    nlohmann::json summary;
    summary["config_hash"] = config_hash(cfg);
    summary["runs"] = nlohmann::json::array();

    auto run_one = [&](const std::string& name, const ModelConfig& mc, const TrainConfig& tc) {
        BlipModel model = BlipModel::init(mc, RngStream(tc.seed).derive("init"));
        Checkpoint best = train_model(model, train_data, val_data, tc, [&](const EpochStats& s) {
            log_csv << name << "," << s.epoch << "," << s.train_loss << "," << s.mse_component << ","
                    << s.kl_component << ",";
            if (std::isfinite(s.val_mse)) log_csv << s.val_mse;
            log_csv << "\n";
            if (s.epoch % 100 == 0 || s.epoch == tc.epochs)
                log_debug("%s epoch %d loss %.6g val %.6g", name.c_str(), s.epoch, s.train_loss, s.val_mse);
        });
        const std::string ckpt_path = (out / "checkpoints" / (name + ".ckpt")).string();
        best.save(ckpt_path);
        result.checkpoint_paths.push_back(ckpt_path);
        summary["runs"].push_back({{"name", name},
                                   {"checkpoint", ckpt_path},
                                   {"best_epoch", best.epoch},
                                   {"best_val_mse", best.val_mse},
                                   {"seed", tc.seed}});
        log_info("%s: best val MSE %.6g at epoch %d -> %s", name.c_str(), best.val_mse, best.epoch,
                 ckpt_path.c_str());
        return best.val_mse;
    };

    if (cfg.run_mode == RunMode::ensemble) {
        if (cfg.ensemble_members < 2) throw ConfigError("ensemble: need at least 2 members");
        double best = std::numeric_limits<double>::infinity();
        for (int k = 0; k < cfg.ensemble_members; ++k) {
            TrainConfig tc = cfg.train;
            tc.seed = cfg.train.seed + static_cast<std::uint64_t>(k);
            ModelConfig mc = cfg.model;  // deterministic members
            best = std::min(best, run_one("member_" + std::to_string(k), mc, tc));
        }
        result.best_val_mse = best;
    } else {
        result.best_val_mse = run_one("model", cfg.model, cfg.train);
    }

    result.summary_path = (out / "logs" / "train_summary.json").string();
    std::ofstream s(result.summary_path);
    s << summary.dump(2) << '\n';
    return result;
}

// ---------------------------------------------------------------------------
// eval / predict
// ---------------------------------------------------------------------------

namespace detail {

struct FlatPredictions {
    std::vector<double> mean, target, var;  // flattened [n_nodes * 3]; var empty when absent
    std::vector<std::int64_t> graph_of_node;
    bool has_variance = false;
};

/// Metrics over flattened predictions; variance-dependent metrics only when
/// variances are present. The 1e-8 floor keeps NLL/CRPS finite for
/// collapsed predictive distributions.
inline MetricReport metrics_from_flat(const FlatPredictions& p) {
    MetricReport r;
    r.n = static_cast<std::int64_t>(p.mean.size()) / 3;
    r.mse = mse(p.mean, p.target);
    r.mae = mae(p.mean, p.target);
    if (!p.has_variance) return r;

    std::vector<double> var_floored(p.var.size());
    for (std::size_t i = 0; i < p.var.size(); ++i) var_floored[i] = p.var[i] + 1e-8;
    r.nll = gaussian_nll(p.mean, p.target, var_floored, 3);
    r.crps = gaussian_crps(p.mean, p.target, var_floored, 3);

    // per-structure aggregates feed ECE and Spearman
    const std::int64_t n_graphs = p.graph_of_node.empty() ? 0 : p.graph_of_node.back() + 1;
    std::vector<double> pred_mean, true_mean, sigma, sq_err;
    for (std::int64_t g = 0; g < n_graphs; ++g) {
        std::vector<double> vals, vars, tvals;
        double err_acc = 0.0;
        std::int64_t atoms = 0;
        for (std::size_t node = 0; node < p.graph_of_node.size(); ++node) {
            if (p.graph_of_node[node] != g) continue;
            ++atoms;
            double err2 = 0.0;
            for (int k = 0; k < 3; ++k) {
                vals.push_back(p.mean[node * 3 + static_cast<std::size_t>(k)]);
                tvals.push_back(p.target[node * 3 + static_cast<std::size_t>(k)]);
                vars.push_back(var_floored[node * 3 + static_cast<std::size_t>(k)]);
                const double d = p.mean[node * 3 + static_cast<std::size_t>(k)] -
                                 p.target[node * 3 + static_cast<std::size_t>(k)];
                err2 += d * d;
            }
            err_acc += err2;
        }
        auto agg = uq_aggregate_structure(vals, vars);
        pred_mean.push_back(agg.value_mean);
        sigma.push_back(agg.sigma);
        double tacc = 0.0;
        for (double t : tvals) tacc += t;
        true_mean.push_back(tacc / static_cast<double>(tvals.size()));
        sq_err.push_back(err_acc / static_cast<double>(atoms));
    }
    auto [ece_val, curve] = ece(pred_mean, sigma, true_mean);
    r.ece_value = ece_val;
    r.calibration_curve = curve;
    std::vector<double> sigma_sq(sigma.size());
    for (std::size_t i = 0; i < sigma.size(); ++i) sigma_sq[i] = sigma[i] * sigma[i];
    try {
        r.spearman_value = spearman(sigma_sq, sq_err);
    } catch (const std::invalid_argument&) {
        // degenerate rank variance (single structure or constant sigmas):
        // reported as a dash rather than failing the whole evaluation
        r.spearman_value.reset();
    }
    return r;
}

inline FlatPredictions flatten_summary(const GraphBatch& batch, const PredictiveSummary& s,
                                       std::int64_t graph_base) {
    FlatPredictions out;
    out.has_variance = s.has_variance;
    for (std::int64_t i = 0; i < batch.n_nodes(); ++i) {
        std::int64_t g = 0;
        while (batch.graph_offsets[g + 1] <= i) ++g;
        out.graph_of_node.push_back(graph_base + g);
        for (int k = 0; k < 3; ++k) {
            out.mean.push_back(s.mean(i, k));
            out.target.push_back(batch.targets(i, k));
            if (s.has_variance) out.var.push_back(s.total_var(i, k));
        }
    }
    return out;
}

inline void append_flat(FlatPredictions& acc, const FlatPredictions& part) {
    acc.has_variance = part.has_variance;
    acc.mean.insert(acc.mean.end(), part.mean.begin(), part.mean.end());
    acc.target.insert(acc.target.end(), part.target.begin(), part.target.end());
    acc.var.insert(acc.var.end(), part.var.begin(), part.var.end());
    acc.graph_of_node.insert(acc.graph_of_node.end(), part.graph_of_node.begin(), part.graph_of_node.end());
}

}  // namespace detail

enum class EvalVariant { map, mc, ensemble, plain };

inline const char* to_string(EvalVariant v) {
    switch (v) {
        case EvalVariant::map: return "map";
        case EvalVariant::mc: return "mc";
        case EvalVariant::ensemble: return "ensemble";
        default: return "deterministic";
    }
}

/// Predictions of one model (or an ensemble) over a dataset, batched.
inline detail::FlatPredictions predict_dataset(const std::vector<BlipModel>& models,
                                               const std::vector<ParticleGraph>& data, EvalVariant variant,
                                               const InferenceSettings& settings, int batch_size,
                                               std::uint64_t seed, int jobs) {
    detail::FlatPredictions flat;
    const Featurization feat = models.front().config.featurization();
    std::int64_t graph_base = 0;
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<ParticleGraph> chunk(data.begin() + static_cast<std::ptrdiff_t>(start),
                                         data.begin() + static_cast<std::ptrdiff_t>(end));
        GraphBatch batch = build_batch(chunk, feat);
        PredictiveSummary summary;
        switch (variant) {
            case EvalVariant::plain:
            case EvalVariant::map:
                summary = predict_map(models.front(), batch);
                break;
            case EvalVariant::mc:
                summary = predict_mc(models.front(), batch, settings.samples,
                                     RngStream(seed).derive("eval-batch", start), settings.aleatoric_floor, jobs);
                break;
            case EvalVariant::ensemble:
                summary = predict_ensemble(models, batch, settings.aleatoric_floor);
                break;
        }
        detail::append_flat(flat, detail::flatten_summary(batch, summary, graph_base));
        graph_base += batch.n_graphs();
    }
    return flat;
}

struct EvalResult {
    std::vector<std::pair<std::string, MetricReport>> reports;  // (variant tag, report)
    std::vector<std::string> report_paths;
};

inline void write_report(const std::filesystem::path& reports_dir, const std::string& tag, const MetricReport& r,
                         EvalResult& result) {
    namespace fs = std::filesystem;
    fs::create_directories(reports_dir);
    const std::string base = (reports_dir / ("eval_" + tag)).string();
    {
        std::ofstream j(base + ".json");
        j << r.to_json().dump(2) << '\n';
    }
    {
        std::ofstream c(base + ".csv");
        c << r.to_csv();
    }
    if (!r.calibration_curve.empty()) {
        std::ofstream c((reports_dir / ("calibration_" + tag + ".csv")).string());
        c << calibration_curve_csv(r.calibration_curve);
    }
    result.reports.emplace_back(tag, r);
    result.report_paths.push_back(base + ".json");
    const std::string nll_part = r.nll ? " nll " + std::to_string(*r.nll) : std::string();
    log_info("report %s: mse %.6g mae %.6g%s", tag.c_str(), r.mse, r.mae, nll_part.c_str());
}

/// Evaluate checkpoints against a dataset. Blip models report both the MAP
/// and the MC(S) variants; deterministic models omit the variance metrics;
/// multiple checkpoints are aggregated as a deep ensemble.
inline EvalResult run_eval(const ExperimentConfig& cfg, const std::vector<std::string>& checkpoint_paths,
                           const std::string& dataset_path, int jobs = 1) {
    if (checkpoint_paths.empty()) throw ConfigError("eval: no checkpoints given");
    auto data = read_dataset(dataset_path, cfg.sim.n_particles);
    log_info("evaluating %zu checkpoints on %zu records", checkpoint_paths.size(), data.size());

    std::vector<BlipModel> models;
    for (const auto& p : checkpoint_paths) models.push_back(Checkpoint::load(p).restore_model());

    EvalResult result;
    const std::filesystem::path reports_dir = std::filesystem::path(cfg.out_dir) / "reports";
    const int bs = cfg.train.batch_size;

    if (models.size() > 1) {
        const auto reference = models.front().config.to_json();
        for (const auto& m : models)
            if (m.config.to_json() != reference) throw ConfigError("eval: ensemble checkpoints have mismatched configs");
        auto flat = predict_dataset(models, data, EvalVariant::ensemble, cfg.inference, bs, cfg.train.seed, jobs);
        write_report(reports_dir, "ensemble", detail::metrics_from_flat(flat), result);
        return result;
    }

    const BlipModel& model = models.front();
    if (model.config.mode == Mode::deterministic) {
        auto flat = predict_dataset(models, data, EvalVariant::plain, cfg.inference, bs, cfg.train.seed, jobs);
        write_report(reports_dir, "deterministic", detail::metrics_from_flat(flat), result);
    } else if (model.config.mode == Mode::blip) {
        auto map_flat = predict_dataset(models, data, EvalVariant::map, cfg.inference, bs, cfg.train.seed, jobs);
        write_report(reports_dir, "map", detail::metrics_from_flat(map_flat), result);
        auto mc_flat = predict_dataset(models, data, EvalVariant::mc, cfg.inference, bs, cfg.train.seed, jobs);
        write_report(reports_dir, "mc" + std::to_string(cfg.inference.samples), detail::metrics_from_flat(mc_flat),
                     result);
    } else {
        auto mc_flat = predict_dataset(models, data, EvalVariant::mc, cfg.inference, bs, cfg.train.seed, jobs);
        write_report(reports_dir, "mc" + std::to_string(cfg.inference.samples), detail::metrics_from_flat(mc_flat),
                     result);
    }
    return result;
}

/// Metrics computed from a prediction dump instead of a live model.
inline EvalResult run_eval_from_predictions(const ExperimentConfig& cfg, const std::string& dump_path) {
    auto records = read_predictions(dump_path);
    if (records.empty()) throw DataError("eval: empty prediction dump " + dump_path);
    detail::FlatPredictions flat;
    flat.has_variance = records.front().epistemic_var.has_value();
    std::int64_t graph_base = -1, last_graph = -1;
    for (const auto& r : records) {
        if (r.graph != last_graph) {
            ++graph_base;
            last_graph = r.graph;
        }
        flat.graph_of_node.push_back(graph_base);
        for (int k = 0; k < 3; ++k) {
            flat.mean.push_back(r.mean[k]);
            flat.target.push_back(r.target[k]);
            if (flat.has_variance) {
                if (!r.epistemic_var || !r.aleatoric_var)
                    throw DataError("eval: prediction dump mixes rows with and without variances");
                flat.var.push_back((*r.epistemic_var)[k] + (*r.aleatoric_var)[k]);
            }
        }
    }
    EvalResult result;
    write_report(std::filesystem::path(cfg.out_dir) / "reports", "from_predictions",
                 detail::metrics_from_flat(flat), result);
    return result;
}

struct PredictResult {
    std::string output_path;
    std::int64_t rows = 0;
};

/// Dump per-node predictions for a dataset as JSON lines.
inline PredictResult run_predict(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                                 const std::string& dataset_path, const std::string& output_path, int jobs = 1) {
    auto data = read_dataset(dataset_path, cfg.sim.n_particles);
    BlipModel model = Checkpoint::load(checkpoint_path).restore_model();
    const Featurization feat = model.config.featurization();

    namespace fs = std::filesystem;
    if (fs::path(output_path).has_parent_path()) fs::create_directories(fs::path(output_path).parent_path());
    std::ofstream out(output_path);
    if (!out) throw DataError("cannot open for writing: " + output_path);
    out.close();  // truncate; append per batch below

    std::int64_t rows = 0;
    const int bs = cfg.train.batch_size;
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(bs)) {
        const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(bs));
        std::vector<ParticleGraph> chunk(data.begin() + static_cast<std::ptrdiff_t>(start),
                                         data.begin() + static_cast<std::ptrdiff_t>(end));
        GraphBatch batch = build_batch(chunk, feat);
        PredictiveSummary summary;
        if (cfg.inference.method == "map" || model.config.mode == Mode::deterministic)
            summary = predict_map(model, batch);
        else
            summary = predict_mc(model, batch, cfg.inference.samples, RngStream(cfg.train.seed).derive("eval-batch", start),
                                 cfg.inference.aleatoric_floor, jobs);
        // append, renumbering graphs across batches
        std::ofstream app(output_path, std::ios::app);
        for (std::int64_t g = 0; g < batch.n_graphs(); ++g)
            for (std::int64_t i = batch.graph_offsets[g]; i < batch.graph_offsets[g + 1]; ++i) {
                nlohmann::json j;
                j["graph"] = static_cast<std::int64_t>(start) + g;
                j["node"] = i - batch.graph_offsets[g];
                j["mean"] = {summary.mean(i, 0), summary.mean(i, 1), summary.mean(i, 2)};
                j["target"] = {batch.targets(i, 0), batch.targets(i, 1), batch.targets(i, 2)};
                if (summary.has_variance) {
                    j["epistemic_var"] = {summary.epistemic_var(i, 0), summary.epistemic_var(i, 1),
                                          summary.epistemic_var(i, 2)};
                    j["aleatoric_var"] = {summary.aleatoric_var(i, 0), summary.aleatoric_var(i, 1),
                                          summary.aleatoric_var(i, 2)};
                } else {
                    j["epistemic_var"] = nullptr;
                    j["aleatoric_var"] = nullptr;
                }
                app << j.dump() << '\n';
                ++rows;
            }
    }
    log_info("wrote %lld prediction rows to %s", static_cast<long long>(rows), output_path.c_str());
    return {output_path, rows};
}

}  // namespace blip
