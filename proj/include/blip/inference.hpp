/**
 * Predictive inference and uncertainty decomposition.
 *
 * MC prediction encodes the VAD coefficients once and reuses them across
 * all stochastic forward passes (per-sample RNG streams keyed by sample
 * index, reduced in fixed order, so results are independent of execution
 * order and parallelism). The law-of-total-variance split reports the
 * spread of sampled means as epistemic variance; the aleatoric part is a
 * configurable homoscedastic value, 0 by default.
 */
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <thread>
#include <vector>

#include "blip/models.hpp"

namespace blip {

struct PredictiveSummary {
    Tensor mean;           // [N x 3]
    Tensor epistemic_var;  // [N x 3], unbiased across samples/members
    Tensor aleatoric_var;  // [N x 3]
    Tensor total_var;      // epistemic + aleatoric, elementwise
    int n_samples = 0;
    bool has_variance = false;  // false: MAP point estimate, variances absent
};

namespace detail {

/// Welford's recurrence in fixed sample order: identical samples yield a
/// bit-identical mean and an exactly-zero variance.
inline PredictiveSummary summarize_samples(const std::vector<Tensor>& samples, double aleatoric) {
    const int s_count = static_cast<int>(samples.size());
    const Shape shape = samples.front().shape();
    PredictiveSummary out;
    out.n_samples = s_count;
    out.has_variance = true;
    out.mean = samples.front().clone();
    out.epistemic_var = Tensor::zeros(shape);  // holds M2 until the final divide
    for (int s = 1; s < s_count; ++s) {
        const Tensor& x = samples[static_cast<std::size_t>(s)];
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const double d = x[i] - out.mean[i];
            out.mean[i] += d / static_cast<double>(s + 1);
            out.epistemic_var[i] += d * (x[i] - out.mean[i]);
        }
    }
    out.epistemic_var.array() /= static_cast<double>(s_count - 1);
    out.aleatoric_var = Tensor::full(shape, aleatoric);
    out.total_var = add(out.epistemic_var, out.aleatoric_var);
    return out;
}

/// Run fn(i) for i in [0, n) on up to `jobs` threads; outputs land in slots.
template <class F>
inline void parallel_indexed(std::int64_t n, int jobs, F&& fn) {
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
    if (jobs == 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(jobs));
    for (int t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            for (std::int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

}  // namespace detail

/// MC inference with explicit coefficients (the degenerate alpha = beta = 0
/// case reproduces the MAP output in every sample).
inline PredictiveSummary predict_mc_with_coeffs(const BlipModel& model, const GraphBatch& batch,
                                                const VadCoefficients& coeffs, int s_count, RngStream rng,
                                                double aleatoric = 0.0, int jobs = 1) {
    if (s_count < 2) throw std::invalid_argument("predict_mc: need at least 2 samples");
    std::vector<Tensor> samples(static_cast<std::size_t>(s_count));
    detail::parallel_indexed(s_count, jobs, [&](std::int64_t s) {
        RngStream stream = rng.derive("mc-sample", static_cast<std::uint64_t>(s));
        samples[static_cast<std::size_t>(s)] = forward_blip_sample(model, batch, coeffs, stream);
    });
    return detail::summarize_samples(samples, aleatoric);
}

/// Alg.-3-style inference: coefficients are encoded once, then S stochastic
/// forwards are averaged. Works for blip and mc_dropout models.
inline PredictiveSummary predict_mc(const BlipModel& model, const GraphBatch& batch, int s_count = 100,
                                    RngStream rng = RngStream(0), double aleatoric = 0.0, int jobs = 1) {
    if (s_count < 2) throw std::invalid_argument("predict_mc: need at least 2 samples");
    if (model.config.mode == Mode::blip) {
        VadCoefficients coeffs = infer_coefficients(model.inference, batch);
        return predict_mc_with_coeffs(model, batch, coeffs, s_count, rng, aleatoric, jobs);
    }
    if (model.config.mode == Mode::mc_dropout) {
        std::vector<Tensor> samples(static_cast<std::size_t>(s_count));
        detail::parallel_indexed(s_count, jobs, [&](std::int64_t s) {
            RngStream stream = rng.derive("mc-sample", static_cast<std::uint64_t>(s));
            samples[static_cast<std::size_t>(s)] = forward_mc_dropout(model, batch, stream);
        });
        return detail::summarize_samples(samples, aleatoric);
    }
    throw std::invalid_argument("predict_mc: model has no stochastic mode (deterministic)");
}

/// Single unperturbed forward; variances flagged absent.
inline PredictiveSummary predict_map(const BlipModel& model, const GraphBatch& batch) {
    PredictiveSummary out;
    out.mean = forward_map(model, batch);
    out.epistemic_var = Tensor::zeros(out.mean.shape());
    out.aleatoric_var = Tensor::zeros(out.mean.shape());
    out.total_var = Tensor::zeros(out.mean.shape());
    out.n_samples = 1;
    out.has_variance = false;
    return out;
}

/// Deep-ensemble aggregation over MAP forwards of the members.
inline PredictiveSummary predict_ensemble(const std::vector<BlipModel>& members, const GraphBatch& batch,
                                          double aleatoric = 0.0) {
    if (members.size() < 2) throw std::invalid_argument("predict_ensemble: need at least 2 members");
    const auto reference = members.front().config.to_json();
    for (const auto& m : members)
        if (m.config.to_json() != reference)
            throw ConfigError("predict_ensemble: members have mismatched model configs");
    std::vector<Tensor> outputs;
    outputs.reserve(members.size());
    for (const auto& m : members) outputs.push_back(forward_map(m, batch));
    return detail::summarize_samples(outputs, aleatoric);
}

// ---------------------------------------------------------------------------
// Prediction dumps (JSON-lines)
// ---------------------------------------------------------------------------

struct PredictionRecord {
    std::int64_t graph = 0;
    std::int64_t node = 0;
    Vec3 mean{};
    Vec3 target{};
    std::optional<Vec3> epistemic_var;
    std::optional<Vec3> aleatoric_var;
};

inline void write_predictions(const std::string& path, const GraphBatch& batch, const PredictiveSummary& summary) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (std::int64_t g = 0; g < batch.n_graphs(); ++g) {
        for (std::int64_t i = batch.graph_offsets[g]; i < batch.graph_offsets[g + 1]; ++i) {
            nlohmann::json j;
            j["graph"] = g;
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
            out << j.dump() << '\n';
        }
    }
    if (!out) throw DataError("write failed: " + path);
}

inline std::vector<PredictionRecord> read_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    std::vector<PredictionRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("line " + std::to_string(line_no) + ": " + e.what());
        }
        PredictionRecord r;
        try {
            r.graph = j.at("graph").get<std::int64_t>();
            r.node = j.at("node").get<std::int64_t>();
            for (int k = 0; k < 3; ++k) {
                r.mean[k] = j.at("mean").at(k).get<double>();
                r.target[k] = j.at("target").at(k).get<double>();
            }
            if (!j.at("epistemic_var").is_null()) {
                Vec3 e{}, a{};
                for (int k = 0; k < 3; ++k) {
                    e[k] = j.at("epistemic_var").at(k).get<double>();
                    a[k] = j.at("aleatoric_var").at(k).get<double>();
                }
                r.epistemic_var = e;
                r.aleatoric_var = a;
            }
        } catch (const nlohmann::json::exception& e) {
            throw DataError("line " + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace blip
