/**
 * Message-passing models for the particle-position task.
 *
 * Two architectures share one weight container:
 *   gnn   - plain message passing on embedded (position || velocity) node
 *           features with an embedded charge-product edge attribute and a
 *           residual readout head added to the initial positions.
 *   egnn  - E(n)-equivariant network with velocity: invariant features flow
 *           through phi_e/phi_h, while coordinates and velocities are
 *           updated with relative-position vectors scaled by the scalar
 *           outputs of phi_x/phi_v.
 *
 * Modes: deterministic, blip (local-reparameterization noise with per-edge
 * alpha / per-node beta), mc_dropout (inverted dropout after every linear
 * of the message-passing MLPs, active at training and MC inference).
 */
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blip/errors.hpp"
#include "blip/graph.hpp"
#include "blip/vad.hpp"

namespace blip {

enum class Architecture { gnn, egnn };
enum class Mode { deterministic, blip, mc_dropout };

inline const char* to_string(Architecture a) { return a == Architecture::gnn ? "gnn" : "egnn"; }
inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::deterministic: return "deterministic";
        case Mode::blip: return "blip";
        default: return "mc_dropout";
    }
}

struct ModelConfig {
    Architecture architecture = Architecture::gnn;
    int n_layers = 4;
    int hidden_dim = 64;
    Mode mode = Mode::deterministic;
    double dropout_p = 0.0;   // mc_dropout only
    double p_min = 1e-5;      // blip clamp bounds
    double p_max = 0.8;
    int inference_hidden = 64;

    Featurization featurization() const {
        return architecture == Architecture::gnn ? Featurization::gnn : Featurization::egnn;
    }
    std::int64_t node_feature_dim() const { return architecture == Architecture::gnn ? 6 : 1; }

    void validate() const {
        if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
        if (hidden_dim < 1) throw ConfigError("model: hidden_dim must be >= 1");
        if (mode == Mode::mc_dropout) {
            if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("model: dropout_p must lie in [0, 1)");
        } else if (dropout_p != 0.0) {
            throw ConfigError("model: dropout_p is only valid in mc_dropout mode");
        }
        if (mode == Mode::blip) {
            if (!(p_min > 0.0 && p_min < p_max && p_max < 1.0))
                throw ConfigError("model: blip clamps need 0 < p_min < p_max < 1");
        }
    }

    nlohmann::json to_json() const {
        return {{"architecture", to_string(architecture)}, {"n_layers", n_layers},
                {"hidden_dim", hidden_dim},               {"mode", to_string(mode)},
                {"dropout_p", dropout_p},                 {"p_min", p_min},
                {"p_max", p_max},                         {"inference_hidden", inference_hidden}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        const std::string arch = j.at("architecture").get<std::string>();
        if (arch == "gnn")
            c.architecture = Architecture::gnn;
        else if (arch == "egnn")
            c.architecture = Architecture::egnn;
        else
            throw ConfigError("model: unknown architecture '" + arch + "' (expected gnn|egnn)");
        const std::string mode = j.at("mode").get<std::string>();
        if (mode == "deterministic")
            c.mode = Mode::deterministic;
        else if (mode == "blip")
            c.mode = Mode::blip;
        else if (mode == "mc_dropout")
            c.mode = Mode::mc_dropout;
        else
            throw ConfigError("model: unknown mode '" + mode + "' (expected deterministic|blip|mc_dropout)");
        c.n_layers = j.at("n_layers").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.dropout_p = j.value("dropout_p", 0.0);
        c.p_min = j.value("p_min", 1e-5);
        c.p_max = j.value("p_max", 0.8);
        c.inference_hidden = j.value("inference_hidden", 64);
        c.validate();
        return c;
    }
};

struct MessagePassingLayer {
    Mlp message;  // phi_e for the egnn
    Mlp update;   // phi_h for the egnn
    Mlp coord;    // phi_x, egnn only, scalar output
    Mlp vel;      // phi_v, egnn only, scalar output
};

struct BlipModel {
    ModelConfig config;
    BayesianLinear node_embed;               // feature dim -> hidden
    BayesianLinear edge_embed;               // gnn only: 1 -> hidden
    std::vector<MessagePassingLayer> layers;
    Mlp readout;                             // gnn only: hidden -> hidden -> 3
    InferenceNet inference;                  // blip only

    static BlipModel init(const ModelConfig& cfg, RngStream init_rng) {
        cfg.validate();
        BlipModel m;
        m.config = cfg;
        const std::int64_t h = cfg.hidden_dim;
        const bool gnn = cfg.architecture == Architecture::gnn;

        m.node_embed = BayesianLinear::init(cfg.node_feature_dim(), h, LayerRole::update, init_rng);
        if (gnn) m.edge_embed = BayesianLinear::init(1, h, LayerRole::message, init_rng);

        const std::int64_t edge_dim = gnn ? h : 1;
        const std::int64_t msg_in = gnn ? 2 * h + edge_dim : 2 * h + 1 + edge_dim;  // egnn adds |x_i-x_j|^2
        for (int l = 0; l < cfg.n_layers; ++l) {
            MessagePassingLayer layer;
            layer.message = Mlp::init({msg_in, h, h, h, h}, LayerRole::message, init_rng);
            layer.update = Mlp::init({2 * h, h, h, h, h}, LayerRole::update, init_rng);
            if (!gnn) {
                layer.coord = Mlp::init({h, h, 1}, LayerRole::message, init_rng);
                layer.vel = Mlp::init({h, h, 1}, LayerRole::update, init_rng);
            }
            m.layers.push_back(std::move(layer));
        }
        if (gnn) m.readout = Mlp::init({h, h, h, 3}, LayerRole::update, init_rng);
        if (cfg.mode == Mode::blip)
            m.inference = InferenceNet::init(cfg.node_feature_dim(), 1, cfg.inference_hidden, init_rng, cfg.p_min,
                                             cfg.p_max);
        return m;
    }

    /// Stable iteration order over all named parameters.
    template <class F>
    void visit_params(F&& f) {
        f("node_embed.theta", node_embed.theta);
        f("node_embed.bias", node_embed.bias);
        if (config.architecture == Architecture::gnn) {
            f("edge_embed.theta", edge_embed.theta);
            f("edge_embed.bias", edge_embed.bias);
        }
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l);
            layers[l].message.visit_params(p + ".message", f);
            layers[l].update.visit_params(p + ".update", f);
            if (config.architecture == Architecture::egnn) {
                layers[l].coord.visit_params(p + ".coord", f);
                layers[l].vel.visit_params(p + ".vel", f);
            }
        }
        if (config.architecture == Architecture::gnn) readout.visit_params("readout", f);
        if (config.mode == Mode::blip) inference.visit_params("inference", f);
    }

    void watch_all(Tape& tape) {
        visit_params([&](const std::string&, Tensor& t) { tape.watch(t); });
    }

    /// Weight-element counts entering the KL term, per role.
    std::int64_t message_weight_elements() const {
        std::int64_t n = 0;
        for (const auto& l : layers) n += l.message.weight_elements() + l.coord.weight_elements();
        return n;
    }
    std::int64_t update_weight_elements() const {
        std::int64_t n = 0;
        for (const auto& l : layers) n += l.update.weight_elements() + l.vel.weight_elements();
        return n;
    }
};

struct ForwardOptions {
    bool sample = false;                      // stochastic pass (blip noise / dropout masks)
    const VadCoefficients* coeffs = nullptr;  // required for blip sampling
    RngStream* rng = nullptr;                 // required when sampling
};

namespace detail {

/// Per-node factor C = 1/(n_g - 1) for the egnn coordinate aggregation.
inline Tensor inverse_degree(const GraphBatch& batch) {
    Tensor c = Tensor::empty({batch.n_nodes(), 1});
    for (std::int64_t g = 0; g < batch.n_graphs(); ++g) {
        const std::int64_t n = batch.nodes_in_graph(g);
        const double v = n > 1 ? 1.0 / static_cast<double>(n - 1) : 1.0;
        for (std::int64_t i = batch.graph_offsets[g]; i < batch.graph_offsets[g + 1]; ++i) c[i] = v;
    }
    return c;
}

}  // namespace detail

/// Predicted particle positions, [N x 3].
inline Tensor forward_positions(const BlipModel& model, const GraphBatch& batch, const ForwardOptions& opts = {}) {
    const ModelConfig& cfg = model.config;
    if (opts.sample) {
        if (cfg.mode == Mode::deterministic)
            throw std::invalid_argument("forward_positions: deterministic models have no sampling mode");
        if (cfg.mode == Mode::blip && opts.coeffs == nullptr)
            throw std::invalid_argument("forward_positions: blip sampling requires VAD coefficients");
        if (opts.rng == nullptr) throw std::invalid_argument("forward_positions: sampling requires an RNG stream");
    }

    LayerNoise msg_noise, upd_noise;
    if (opts.sample && cfg.mode == Mode::blip) {
        msg_noise = {&opts.coeffs->alpha, 0.0, opts.rng};
        upd_noise = {&opts.coeffs->beta, 0.0, opts.rng};
    } else if (opts.sample && cfg.mode == Mode::mc_dropout) {
        msg_noise = {nullptr, cfg.dropout_p, opts.rng};
        upd_noise = {nullptr, cfg.dropout_p, opts.rng};
    }

    Tensor h = linear_map(model.node_embed, batch.node_features);

    if (cfg.architecture == Architecture::gnn) {
        Tensor ae = linear_map(model.edge_embed, batch.edge_attrs);
        for (const auto& layer : model.layers) {
            Tensor hj = gather_rows(h, batch.senders);
            Tensor hi = gather_rows(h, batch.receivers);
            Tensor me = layer.message.forward(concat_cols({hj, hi, ae}), msg_noise);
            Tensor m = scatter_sum_rows(me, batch.receivers, batch.n_nodes());
            h = layer.update.forward(concat_cols({h, m}), upd_noise);
        }
        return add(model.readout.forward(h), batch.positions);
    }

    // egnn with velocity
    Tensor x = batch.positions;
    Tensor v = batch.velocities;
    Tensor inv_deg = detail::inverse_degree(batch);
    for (const auto& layer : model.layers) {
        Tensor xi = gather_rows(x, batch.receivers);
        Tensor xj = gather_rows(x, batch.senders);
        Tensor diff = sub(xi, xj);
        Tensor d2 = sum(mul(diff, diff), 1);
        Tensor hi = gather_rows(h, batch.receivers);
        Tensor hj = gather_rows(h, batch.senders);
        Tensor me = layer.message.forward(concat_cols({hi, hj, d2, batch.edge_attrs}), msg_noise);
        Tensor wx = layer.coord.forward(me, msg_noise);
        Tensor agg = scatter_sum_rows(mul(diff, wx), batch.receivers, batch.n_nodes());
        Tensor wv = layer.vel.forward(h, upd_noise);
        v = add(mul(wv, v), mul(inv_deg, agg));
        x = add(x, v);
        Tensor m = scatter_sum_rows(me, batch.receivers, batch.n_nodes());
        h = layer.update.forward(concat_cols({h, m}), upd_noise);
    }
    return x;
}

/// Convenience wrappers mirroring the three inference styles.
inline Tensor forward_map(const BlipModel& model, const GraphBatch& batch) {
    return forward_positions(model, batch, {});
}

inline Tensor forward_blip_sample(const BlipModel& model, const GraphBatch& batch, const VadCoefficients& coeffs,
                                  RngStream& rng) {
    ForwardOptions o;
    o.sample = true;
    o.coeffs = &coeffs;
    o.rng = &rng;
    return forward_positions(model, batch, o);
}

inline Tensor forward_mc_dropout(const BlipModel& model, const GraphBatch& batch, RngStream& rng) {
    ForwardOptions o;
    o.sample = true;
    o.rng = &rng;
    return forward_positions(model, batch, o);
}

}  // namespace blip
