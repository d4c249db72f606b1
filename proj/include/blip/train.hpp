/**
 * Training engine: single-sample ELBO optimization for blip models, plain
 * MSE training for the deterministic and MC-dropout baselines, deep
 * ensembles, binary checkpoints, and the energy-gradient force path used
 * by conservative toy potentials.
 *
 * One training run is strictly sequential (optimizer state is serial), so
 * a fixed seed reproduces checkpoints bit for bit. Parallelism lives at
 * the level of independent runs (ensemble members, seeds).
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "blip/errors.hpp"
#include "blip/models.hpp"

namespace blip {

enum class OptimizerKind { adam, adamw };

struct TrainConfig {
    int epochs = 10000;
    int batch_size = 100;
    double lr = 5e-4;
    OptimizerKind optimizer = OptimizerKind::adam;
    double kl_weight = 0.01;  // lambda, constant (no annealing)
    double prior_p = 0.5;
    std::optional<double> grad_clip;  // global-norm clip; off for the N-body task
    double weight_decay = 0.0;        // adamw only
    std::uint64_t seed = 0;
    int eval_every = 20;

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (lr <= 0) throw ConfigError("train: lr must be > 0");
        if (kl_weight < 0) throw ConfigError("train: kl_weight must be >= 0");
        if (!(prior_p > 0.0 && prior_p < 1.0)) throw ConfigError("train: prior_p must lie in (0, 1)");
        if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
        if (grad_clip && *grad_clip <= 0) throw ConfigError("train: grad_clip must be > 0 when set");
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"epochs", epochs},
                         {"batch_size", batch_size},
                         {"lr", lr},
                         {"optimizer", optimizer == OptimizerKind::adam ? "adam" : "adamw"},
                         {"kl_weight", kl_weight},
                         {"prior_p", prior_p},
                         {"weight_decay", weight_decay},
                         {"seed", seed},
                         {"eval_every", eval_every}};
        if (grad_clip) j["grad_clip"] = *grad_clip;
        return j;
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        const std::string opt = j.value("optimizer", std::string("adam"));
        if (opt == "adam")
            c.optimizer = OptimizerKind::adam;
        else if (opt == "adamw")
            c.optimizer = OptimizerKind::adamw;
        else
            throw ConfigError("train: unknown optimizer '" + opt + "' (expected adam|adamw)");
        c.kl_weight = j.value("kl_weight", c.kl_weight);
        c.prior_p = j.value("prior_p", c.prior_p);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        if (j.contains("grad_clip") && !j.at("grad_clip").is_null()) c.grad_clip = j.at("grad_clip").get<double>();
        c.seed = j.value("seed", c.seed);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Adam / AdamW
// ---------------------------------------------------------------------------

class Adam {
public:
    Adam(double lr, OptimizerKind kind = OptimizerKind::adam, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8, double weight_decay = 0.0)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay), kind_(kind) {}

    /// One update over (param, grad) pairs; call with a stable order.
    void step(const std::vector<std::pair<Tensor*, Tensor>>& params_and_grads) {
        if (state_.empty())
            for (const auto& [p, g] : params_and_grads) state_.push_back({detail::DVec(p->size(), 0.0), detail::DVec(p->size(), 0.0)});
        if (state_.size() != params_and_grads.size())
            throw std::invalid_argument("Adam::step: parameter count changed between steps");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_and_grads.size(); ++k) {
            Tensor& p = *params_and_grads[k].first;
            const Tensor& g = params_and_grads[k].second;
            if (g.size() != p.size()) throw std::invalid_argument("Adam::step: grad/param size mismatch");
            auto& [m, v] = state_[k];
            double* pd = p.data();
            const double* gd = g.data();
            for (std::int64_t i = 0; i < p.size(); ++i) {
                m[static_cast<std::size_t>(i)] = beta1_ * m[static_cast<std::size_t>(i)] + (1.0 - beta1_) * gd[i];
                v[static_cast<std::size_t>(i)] = beta2_ * v[static_cast<std::size_t>(i)] + (1.0 - beta2_) * gd[i] * gd[i];
                const double mhat = m[static_cast<std::size_t>(i)] / bc1;
                const double vhat = v[static_cast<std::size_t>(i)] / bc2;
                double upd = lr_ * mhat / (std::sqrt(vhat) + eps_);
                if (kind_ == OptimizerKind::adamw) upd += lr_ * weight_decay_ * pd[i];
                pd[i] -= upd;
            }
        }
    }

    std::int64_t steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    OptimizerKind kind_;
    std::int64_t t_ = 0;
    std::vector<std::pair<detail::DVec, detail::DVec>> state_;
};

/// Scale grads in place so the global L2 norm is at most max_norm.
inline void clip_global_norm(std::vector<std::pair<Tensor*, Tensor>>& params_and_grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [p, g] : params_and_grads) sq += (g.array() * g.array()).sum();
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& [p, g] : params_and_grads) g.array() *= s;
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    Tensor diff = sub(pred, target);
    return mean(mul(diff, diff));
}

/// Single-sample negative-ELBO estimate up to constants:
/// MSE(pred, target) + lambda * kl_total / n_data.
inline Tensor elbo_loss(const Tensor& pred_sample, const Tensor& target, const Tensor& kl_total, double lambda,
                        std::int64_t n_data) {
    if (pred_sample.shape() != target.shape())
        throw std::invalid_argument("elbo_loss: prediction/target shape mismatch");
    if (n_data < 1) throw std::invalid_argument("elbo_loss: n_data must be >= 1");
    return add(mse_loss(pred_sample, target), scale(kl_total, lambda / static_cast<double>(n_data)));
}

// ---------------------------------------------------------------------------
// Checkpoints (binary container, bit-exact round trip)
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    int epoch = 0;
    double val_mse = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_steps = 0;  // optimizer steps taken when captured
    nlohmann::json history = nlohmann::json::array();
    std::vector<std::pair<std::string, Tensor>> tensors;  // stable order

    static Checkpoint capture(BlipModel& model, const TrainConfig& tc, int epoch, double val_mse,
                              std::uint64_t rng_steps, nlohmann::json history) {
        Checkpoint c;
        c.model_config = model.config;
        c.train_config = tc;
        c.epoch = epoch;
        c.val_mse = val_mse;
        c.rng_seed = tc.seed;
        c.rng_steps = rng_steps;
        c.history = std::move(history);
        model.visit_params([&](const std::string& name, Tensor& t) { c.tensors.emplace_back(name, t.clone()); });
        return c;
    }

    /// Rebuild the model and load the stored weights into it.
    BlipModel restore_model() const {
        BlipModel model = BlipModel::init(model_config, RngStream(rng_seed).derive("init"));
        std::size_t matched = 0;
        model.visit_params([&](const std::string& name, Tensor& t) {
            for (const auto& [n, stored] : tensors)
                if (n == name) {
                    if (stored.size() != t.size())
                        throw DataError("checkpoint: tensor '" + name + "' has wrong size");
                    std::copy(stored.data(), stored.data() + stored.size(), t.data());
                    ++matched;
                    return;
                }
            throw DataError("checkpoint: missing tensor '" + name + "'");
        });
        if (matched != tensors.size()) throw DataError("checkpoint: extra tensors in file");
        return model;
    }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

namespace detail {

inline void write_u32(std::ofstream& f, std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ofstream& f, std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t read_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline std::uint64_t read_u64(std::ifstream& f) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'B', 'L', 'I', 'P', 'C', 'K', 'P', 'T'};

inline void Checkpoint::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint for writing: " + path);
    f.write(kCheckpointMagic, 8);
    detail::write_u32(f, 1);  // format version

    nlohmann::json meta{{"model", model_config.to_json()}, {"train", train_config.to_json()},
                        {"epoch", epoch},                  {"val_mse", val_mse},
                        {"rng_seed", rng_seed},            {"rng_steps", rng_steps},
                        {"history", history}};
    const std::string meta_str = meta.dump();
    detail::write_u64(f, meta_str.size());
    f.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

    detail::write_u32(f, static_cast<std::uint32_t>(tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        detail::write_u32(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u32(f, static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) detail::write_u64(f, static_cast<std::uint64_t>(t.dim(d)));
        f.put(0);  // dtype tag: f64
        detail::write_u64(f, offset);
        offset += static_cast<std::uint64_t>(t.size()) * 8;
    }
    for (const auto& [name, t] : tensors)
        f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
    if (!f) throw DataError("checkpoint write failed: " + path);
}

inline Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError("not a checkpoint file: " + path);
    const std::uint32_t version = detail::read_u32(f);
    if (version != 1) throw DataError("unsupported checkpoint version " + std::to_string(version));

    const std::uint64_t meta_len = detail::read_u64(f);
    std::string meta_str(meta_len, '\0');
    f.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(std::string("checkpoint metadata corrupt: ") + e.what());
    }

    Checkpoint c;
    c.model_config = ModelConfig::from_json(meta.at("model"));
    c.train_config = TrainConfig::from_json(meta.at("train"));
    c.epoch = meta.at("epoch").get<int>();
    c.val_mse = meta.at("val_mse").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                             : meta.at("val_mse").get<double>();
    c.rng_seed = meta.at("rng_seed").get<std::uint64_t>();
    c.rng_steps = meta.at("rng_steps").get<std::uint64_t>();
    c.history = meta.at("history");

    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    const std::uint32_t n_tensors = detail::read_u32(f);
    std::vector<Entry> entries;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        Entry e;
        const std::uint32_t name_len = detail::read_u32(f);
        e.name.resize(name_len);
        f.read(e.name.data(), name_len);
        const std::uint32_t rank = detail::read_u32(f);
        for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<std::int64_t>(detail::read_u64(f)));
        const int dtype = f.get();
        if (dtype != 0) throw DataError("checkpoint: unsupported dtype tag for '" + e.name + "'");
        e.offset = detail::read_u64(f);
        entries.push_back(std::move(e));
    }
    const std::streampos payload_start = f.tellg();
    for (auto& e : entries) {
        Tensor t = Tensor::empty(e.shape);
        f.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
        if (!f) throw DataError("checkpoint payload truncated at '" + e.name + "'");
        c.tensors.emplace_back(e.name, std::move(t));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double mse_component = 0.0;
    double kl_component = 0.0;
    double val_mse = std::numeric_limits<double>::quiet_NaN();
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Mean squared error of the MAP forward over a dataset, evaluated in batches.
inline double evaluate_mse(const BlipModel& model, const std::vector<ParticleGraph>& data, int batch_size) {
    double sq = 0.0;
    std::int64_t count = 0;
    const Featurization feat = model.config.featurization();
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<ParticleGraph> chunk(data.begin() + static_cast<std::ptrdiff_t>(start),
                                         data.begin() + static_cast<std::ptrdiff_t>(end));
        GraphBatch batch = build_batch(chunk, feat);
        Tensor pred = forward_map(model, batch);
        Tensor diff = sub(pred, batch.targets);
        sq += (diff.array() * diff.array()).sum();
        count += diff.size();
    }
    return sq / static_cast<double>(count);
}

/// Core loop shared by all modes; dispatches the loss on model.config.mode.
/// Returns the best-validation checkpoint (parameters deep-copied).
inline Checkpoint train_model(BlipModel& model, const std::vector<ParticleGraph>& train_data,
                              const std::vector<ParticleGraph>& val_data, const TrainConfig& cfg,
                              const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (train_data.empty()) throw DataError("train: empty training set");
    if (val_data.empty()) throw DataError("train: empty validation set");
    const Mode mode = model.config.mode;
    const Featurization feat = model.config.featurization();
    const std::int64_t n_data = static_cast<std::int64_t>(train_data.size());

    RngStream root(cfg.seed);
    RngStream data_rng = root.derive("data");
    Adam opt(cfg.lr, cfg.optimizer, 0.9, 0.999, 1e-8, cfg.weight_decay);

    // parameter identities are stable across the run; walk them once
    std::vector<Tensor*> params;
    model.visit_params([&](const std::string&, Tensor& t) { params.push_back(&t); });

    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    nlohmann::json history = nlohmann::json::array();
    double best_val = std::numeric_limits<double>::infinity();
    Checkpoint best;
    std::uint64_t global_step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Fisher-Yates with the data stream
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(data_rng.next_u64() % i);
            std::swap(order[i - 1], order[j]);
        }

        double loss_acc = 0.0, mse_acc = 0.0, kl_acc = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<ParticleGraph> chunk;
            chunk.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) chunk.push_back(train_data[order[i]]);
            GraphBatch batch = build_batch(chunk, feat);

            RngStream noise = root.derive("noise", global_step++);
            Tape tape;
            for (Tensor* p : params) tape.watch(*p);

            Tensor loss;
            double mse_part = 0.0, kl_part = 0.0;
            if (mode == Mode::blip) {
                VadCoefficients coeffs = infer_coefficients(model.inference, batch);
                Tensor pred = forward_blip_sample(model, batch, coeffs, noise);
                Tensor kl = add(kl_divergence(coeffs.alpha, cfg.prior_p, model.message_weight_elements()),
                                kl_divergence(coeffs.beta, cfg.prior_p, model.update_weight_elements()));
                Tensor mse_term = mse_loss(pred, batch.targets);
                mse_part = mse_term.item();
                kl_part = kl.item();
                loss = add(mse_term, scale(kl, cfg.kl_weight / static_cast<double>(n_data)));
            } else if (mode == Mode::mc_dropout) {
                Tensor pred = forward_mc_dropout(model, batch, noise);
                loss = mse_loss(pred, batch.targets);
                mse_part = loss.item();
            } else {
                Tensor pred = forward_map(model, batch);
                loss = mse_loss(pred, batch.targets);
                mse_part = loss.item();
            }

            const double loss_val = loss.item();
            if (!std::isfinite(loss_val))
                throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batches) + " (mse=" + std::to_string(mse_part) +
                                   ", kl=" + std::to_string(kl_part) + ")");

            backward(loss);
            std::vector<std::pair<Tensor*, Tensor>> pg;
            pg.reserve(params.size());
            for (Tensor* p : params) pg.emplace_back(p, tape.grad(*p));
            if (cfg.grad_clip) clip_global_norm(pg, *cfg.grad_clip);
            opt.step(pg);

            loss_acc += loss_val;
            mse_acc += mse_part;
            kl_acc += kl_part;
            ++batches;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_acc / batches;
        stats.mse_component = mse_acc / batches;
        stats.kl_component = kl_acc / batches;

        if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            stats.val_mse = evaluate_mse(model, val_data, cfg.batch_size);
            history.push_back({{"epoch", epoch},
                               {"train_loss", stats.train_loss},
                               {"mse", stats.mse_component},
                               {"kl", stats.kl_component},
                               {"val_mse", stats.val_mse}});
            if (stats.val_mse < best_val) {
                best_val = stats.val_mse;
                best = Checkpoint::capture(model, cfg, epoch, stats.val_mse, global_step, history);
            }
        } else {
            history.push_back({{"epoch", epoch},
                               {"train_loss", stats.train_loss},
                               {"mse", stats.mse_component},
                               {"kl", stats.kl_component}});
        }
        if (on_epoch) on_epoch(stats);
    }
    if (best.tensors.empty())  // no finite validation MSE ever seen
        best = Checkpoint::capture(model, cfg, cfg.epochs, std::numeric_limits<double>::quiet_NaN(), global_step,
                                   history);
    best.history = history;  // full log, not just up to the best epoch
    return best;
}

/// K independent trainings seeded seed, seed+1, ..., seed+K-1.
inline std::vector<Checkpoint> train_ensemble(const ModelConfig& mc, const std::vector<ParticleGraph>& train_data,
                                              const std::vector<ParticleGraph>& val_data, const TrainConfig& cfg,
                                              int members, const EpochCallback& on_epoch = {}) {
    if (members < 2) throw ConfigError("ensemble: need at least 2 members");
    std::vector<Checkpoint> out;
    for (int k = 0; k < members; ++k) {
        TrainConfig member_cfg = cfg;
        member_cfg.seed = cfg.seed + static_cast<std::uint64_t>(k);
        BlipModel model = BlipModel::init(mc, RngStream(member_cfg.seed).derive("init"));
        out.push_back(train_model(model, train_data, val_data, member_cfg, on_epoch));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Conservative-force path (toy energy heads)
// ---------------------------------------------------------------------------

/// Scalar-energy models over particle positions, used to exercise the
/// F = -grad E branch at desk scale.
struct ToyEnergyModel {
    enum class Head { quadratic, node_mlp, pair_mlp };
    Head head = Head::quadratic;
    Mlp mlp;  // node_mlp: 3 -> hidden -> 1 per node; pair_mlp: 1 -> hidden -> 1 per pair

    static ToyEnergyModel make(Head head, RngStream rng, int hidden = 16) {
        ToyEnergyModel m;
        m.head = head;
        if (head == Head::node_mlp)
            m.mlp = Mlp::init({3, hidden, 1}, LayerRole::update, rng);
        else if (head == Head::pair_mlp)
            m.mlp = Mlp::init({1, hidden, 1}, LayerRole::update, rng);
        return m;
    }

    /// Total energy of the configuration; scalar.
    Tensor energy(const Tensor& positions) const {
        if (positions.rank() != 2 || positions.dim(1) != 3)
            throw std::invalid_argument("ToyEnergyModel: positions must be [N x 3]");
        switch (head) {
            case Head::quadratic:
                return sum(mul(positions, positions));
            case Head::node_mlp:
                return sum(mlp.forward(positions));
            case Head::pair_mlp: {
                const std::int64_t n = positions.dim(0);
                std::vector<std::int64_t> ii, jj;
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = i + 1; j < n; ++j) {
                        ii.push_back(i);
                        jj.push_back(j);
                    }
                Tensor diff = sub(gather_rows(positions, ii), gather_rows(positions, jj));
                Tensor d2 = sum(mul(diff, diff), 1);
                return sum(mlp.forward(d2));
            }
        }
        throw std::logic_error("unreachable");
    }
};

/// F = -dE/dx via a dedicated tape over the positions.
inline Tensor gradient_force(const ToyEnergyModel& model, const Tensor& positions) {
    Tape tape;
    Tensor x = positions.clone();
    tape.watch(x);
    Tensor e = model.energy(x);
    if (e.size() != 1) throw std::invalid_argument("gradient_force: energy must be scalar");
    backward(e);
    return scale(tape.grad(x), -1.0);
}

}  // namespace blip
