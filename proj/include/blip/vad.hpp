/**
 * Variational adaptive dropout machinery.
 *
 * Message/update weights are Gaussian with mean theta and variance
 * alpha * theta^2, where the per-edge (alpha) and per-node (beta)
 * coefficients come from a shared invariant inference network and are
 * broadcast across all message-passing layers. Sampling uses the local
 * reparameterization trick: pre-activations are drawn from
 * N(h*theta + b, alpha .* ((h.*h)*(theta.*theta))) instead of sampling
 * weights, which needs one draw per activation rather than per weight.
 *
 * Biases are deterministic; only theta is perturbed.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "blip/graph.hpp"
#include "blip/rng.hpp"
#include "blip/tensor.hpp"

namespace blip {

enum class LayerRole { message, update };

struct BayesianLinear {
    Tensor theta;  // [in x out], the mean weights
    Tensor bias;   // [out], never sampled
    LayerRole role = LayerRole::message;

    /// Uniform fan-in init, bound 1/sqrt(in); out_scale shrinks the bound
    /// (used by coordinate heads that must start near zero).
    static BayesianLinear init(std::int64_t in, std::int64_t out, LayerRole role, RngStream& rng,
                               double out_scale = 1.0) {
        BayesianLinear l;
        l.role = role;
        const double bound = out_scale / std::sqrt(static_cast<double>(in));
        l.theta = Tensor::empty({in, out});
        for (std::int64_t i = 0; i < l.theta.size(); ++i) l.theta[i] = bound * (2.0 * rng.next_double() - 1.0);
        l.bias = Tensor::empty({out});
        for (std::int64_t i = 0; i < out; ++i) l.bias[i] = bound * (2.0 * rng.next_double() - 1.0);
        return l;
    }

    std::int64_t in_dim() const { return theta.dim(0); }
    std::int64_t out_dim() const { return theta.dim(1); }
};

/// Deterministic (mean-weight) forward: h * theta + bias.
inline Tensor linear_map(const BayesianLinear& layer, const Tensor& h) {
    return affine(h, layer.theta, layer.bias);
}

/// Stochastic forward via local reparameterization:
///   gamma = h*theta + bias,  delta = alpha .* ((h.*h) * (theta.*theta)),
///   out   = gamma + sqrt(delta) .* eps,  eps ~ N(0, I).
/// Fused into a single taped op: the whole pass costs four matrix products
/// (two forward, two more in backward) plus elementwise work, and gradients
/// flow to h, theta, bias, and alpha. Zero-variance entries copy gamma
/// bit-for-bit and contribute no sqrt subgradient.
inline Tensor forward_local_reparam(const BayesianLinear& layer, const Tensor& h, const Tensor& alpha,
                                    RngStream& rng) {
    if (alpha.size() != h.dim(0))
        throw std::invalid_argument("forward_local_reparam: need one alpha per row (" +
                                    std::to_string(alpha.size()) + " vs " + std::to_string(h.dim(0)) + ")");
    for (std::int64_t i = 0; i < alpha.size(); ++i)
        if (alpha[i] < 0.0) throw std::invalid_argument("forward_local_reparam: negative alpha");

    const Tensor& theta = layer.theta;
    const Tensor& bias = layer.bias;
    const std::int64_t rows = h.dim(0), in = h.dim(1), out_dim = theta.dim(1);
    if (theta.dim(0) != in) throw std::invalid_argument("forward_local_reparam: theta rows != input width");

    using detail::CEArr;
    using detail::CEArr2;
    using detail::EArr;
    using detail::EArr2;

    // saved forward products (shared with the backward closure)
    Tensor h_sq = Tensor::empty({rows, in});
    h_sq.array() = h.array() * h.array();
    Tensor theta_sq = Tensor::empty({in, out_dim});
    theta_sq.array() = theta.array() * theta.array();
    Tensor moment = Tensor::empty({rows, out_dim});  // (h.*h) * (theta.*theta)
    moment.matrix().noalias() = h_sq.matrix() * theta_sq.matrix();
    Tensor std_dev = Tensor::empty({rows, out_dim});
    {
        CEArr2 M(moment.data(), rows, out_dim);
        CEArr A(alpha.data(), rows);
        EArr2 S(std_dev.data(), rows, out_dim);
        S = (M.colwise() * A).sqrt();
    }
    Tensor eps = Tensor::empty({rows, out_dim});
    detail::fill_gaussian_bulk(rng, eps.data(), eps.size());

    Tensor out = Tensor::empty({rows, out_dim});
    out.matrix().noalias() = h.matrix() * theta.matrix();
    out.matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), out_dim);
    {
        // exact-zero std copies gamma bitwise (no noise term added at all)
        double* po = out.data();
        const double* ps = std_dev.data();
        const double* pe = eps.data();
        for (std::int64_t i = 0; i < out.size(); ++i)
            if (ps[i] != 0.0) po[i] += ps[i] * pe[i];
    }

    auto tc = OpRecorder::active_tape({&h, &theta, &bias, &alpha});
    if (tc) {
        const int sh = OpRecorder::slot_on(tc, h), st = OpRecorder::slot_on(tc, theta);
        const int sb = OpRecorder::slot_on(tc, bias), sa = OpRecorder::slot_on(tc, alpha);
        Tensor hv = h, tv = theta, av = alpha;
        const int out_slot = OpRecorder::attach(tc, out);
        tc->nodes.back().fn = [hv, tv, av, h_sq, theta_sq, moment, std_dev, eps, sh, st, sb, sa, rows, in, out_dim,
                               out_slot](detail::TapeCore& core) {
            Tensor::ConstMatrixMap g(core.grad_buf(out_slot).data(), rows, out_dim);
            // mean path
            if (sh >= 0) {
                Tensor::MatrixMap gh(core.grad_buf(sh).data(), rows, in);
                gh.noalias() += g * tv.matrix().transpose();
            }
            if (st >= 0) {
                Tensor::MatrixMap gt(core.grad_buf(st).data(), in, out_dim);
                gt.noalias() += hv.matrix().transpose() * g;
            }
            if (sb >= 0) {
                Eigen::Map<Eigen::RowVectorXd> gb(core.grad_buf(sb).data(), out_dim);
                gb.noalias() += g.colwise().sum();
            }
            // noise path: d std = g .* eps, d delta = d std / (2 std), 0 where std == 0
            Tensor d_delta = Tensor::empty({rows, out_dim});
            {
                double* pd = d_delta.data();
                const double* pg = core.grad_buf(out_slot).data();
                const double* pe = eps.data();
                const double* ps = std_dev.data();
                for (std::int64_t i = 0; i < d_delta.size(); ++i)
                    pd[i] = ps[i] > 0.0 ? pg[i] * pe[i] / (2.0 * ps[i]) : 0.0;
            }
            if (sa >= 0) {
                EArr ga(core.grad_buf(sa).data(), rows);
                detail::CEArr2 DD(d_delta.data(), rows, out_dim);
                detail::CEArr2 M(moment.data(), rows, out_dim);
                ga += (DD * M).rowwise().sum();
            }
            if (sh >= 0 || st >= 0) {
                // d moment = d delta .* alpha (per row)
                Tensor d_moment = Tensor::empty({rows, out_dim});
                {
                    detail::EArr2 DM(d_moment.data(), rows, out_dim);
                    detail::CEArr2 DD(d_delta.data(), rows, out_dim);
                    CEArr A(av.data(), rows);
                    DM = DD.colwise() * A;
                }
                if (sh >= 0) {
                    // d h += 2h .* (d moment * theta_sq^T)
                    Tensor tmp = Tensor::empty({rows, in});
                    tmp.matrix().noalias() = d_moment.matrix() * theta_sq.matrix().transpose();
                    EArr gh(core.grad_buf(sh).data(), rows * in);
                    gh += 2.0 * hv.array() * CEArr(tmp.data(), rows * in);
                }
                if (st >= 0) {
                    // d theta += 2 theta .* (h_sq^T * d moment)
                    Tensor tmp = Tensor::empty({in, out_dim});
                    tmp.matrix().noalias() = h_sq.matrix().transpose() * d_moment.matrix();
                    EArr gt(core.grad_buf(st).data(), in * out_dim);
                    gt += 2.0 * tv.array() * CEArr(tmp.data(), in * out_dim);
                }
            }
        };
    }
    return out;
}

/// Inverted dropout mask as a constant tensor: entries 0 or 1/(1-p).
inline Tensor dropout_mask(const Shape& shape, double p, RngStream& rng) {
    Tensor m = Tensor::empty(Shape(shape));
    const double keep = 1.0 - p;
    for (std::int64_t i = 0; i < m.size(); ++i) m[i] = rng.next_double() < p ? 0.0 : 1.0 / keep;
    return m;
}

/// How a stochastic forward pass perturbs an MLP.
struct LayerNoise {
    const Tensor* alpha = nullptr;  // local reparameterization scale per row; null = mean weights
    double dropout_p = 0.0;         // inverted dropout after every linear when > 0
    RngStream* rng = nullptr;

    bool sampling() const { return alpha != nullptr || dropout_p > 0.0; }
};

/// A stack of linear layers with swish between them (none after the last).
struct Mlp {
    std::vector<BayesianLinear> layers;

    static Mlp init(const std::vector<std::int64_t>& widths, LayerRole role, RngStream& rng,
                    double final_scale = 1.0) {
        Mlp m;
        for (std::size_t i = 0; i + 1 < widths.size(); ++i)
            m.layers.push_back(BayesianLinear::init(widths[i], widths[i + 1], role, rng,
                                                    i + 2 == widths.size() ? final_scale : 1.0));
        return m;
    }

    Tensor forward(Tensor h, const LayerNoise& noise = {}) const {
        for (std::size_t s = 0; s < layers.size(); ++s) {
            if (noise.alpha)
                h = forward_local_reparam(layers[s], h, *noise.alpha, *noise.rng);
            else
                h = linear_map(layers[s], h);
            if (noise.dropout_p > 0.0) h = mul(h, dropout_mask(h.shape(), noise.dropout_p, *noise.rng));
            if (s + 1 < layers.size()) h = swish(h);
        }
        return h;
    }

    std::int64_t weight_elements() const {
        std::int64_t n = 0;
        for (const auto& l : layers) n += l.theta.size();
        return n;
    }

    template <class F>
    void visit_params(const std::string& prefix, F&& f) {
        for (std::size_t s = 0; s < layers.size(); ++s) {
            f(prefix + "." + std::to_string(s) + ".theta", layers[s].theta);
            f(prefix + "." + std::to_string(s) + ".bias", layers[s].bias);
        }
    }
};

// ---------------------------------------------------------------------------
// Inference network E_psi
// ---------------------------------------------------------------------------

/// Per-edge / per-node dropout variances shared by every message-passing layer.
struct VadCoefficients {
    Tensor alpha;  // [E x 1]
    Tensor beta;   // [N x 1]
};

/// Two-head invariant encoder producing the VAD coefficients once per input.
struct InferenceNet {
    Mlp message_head;  // input: a_ij || h0_i || h0_j  per edge
    Mlp update_head;   // input: h0                    per node
    double p_min = 1e-5;
    double p_max = 0.8;

    static InferenceNet init(std::int64_t node_feat_dim, std::int64_t edge_attr_dim, std::int64_t hidden,
                             RngStream& rng, double p_min = 1e-5, double p_max = 0.8) {
        InferenceNet net;
        net.message_head = Mlp::init({edge_attr_dim + 2 * node_feat_dim, hidden, hidden, 1}, LayerRole::message, rng);
        net.update_head = Mlp::init({node_feat_dim, hidden, hidden, 1}, LayerRole::update, rng);
        net.p_min = p_min;
        net.p_max = p_max;
        return net;
    }

    template <class F>
    void visit_params(const std::string& prefix, F&& f) {
        message_head.visit_params(prefix + ".message_head", f);
        update_head.visit_params(prefix + ".update_head", f);
    }
};

/// Raw head output -> dropout probability in [p_min, p_max] -> alpha = p/(1-p).
inline Tensor dropout_coefficient(const Tensor& raw, double p_min, double p_max) {
    Tensor p = add_const(scale(sigmoid(raw), p_max - p_min), p_min);
    Tensor one_minus_p = add_const(scale(p, -1.0), 1.0);
    return div(p, one_minus_p);
}

inline VadCoefficients infer_coefficients(const InferenceNet& net, const GraphBatch& batch) {
    Tensor h0_i = gather_rows(batch.node_features, batch.receivers);
    Tensor h0_j = gather_rows(batch.node_features, batch.senders);
    Tensor msg_in = concat_cols({batch.edge_attrs, h0_i, h0_j});
    VadCoefficients c;
    c.alpha = dropout_coefficient(net.message_head.forward(msg_in), net.p_min, net.p_max);
    c.beta = dropout_coefficient(net.update_head.forward(batch.node_features), net.p_min, net.p_max);
    return c;
}

// ---------------------------------------------------------------------------
// KL divergence
// ---------------------------------------------------------------------------

/// KL( N(theta, a*theta^2) || N(0, lambda*theta^2) ) with lambda = p/(1-p),
/// which is theta-independent:  0.5*log(lambda/a) + (a+1)/(2*lambda) - 0.5.
/// The module total multiplies the batch mean of the per-edge/per-node
/// coefficients by the number of weight elements they govern.
inline Tensor kl_divergence(const Tensor& coefficients, double p_prior, std::int64_t n_weight_elements) {
    if (!(p_prior > 0.0 && p_prior < 1.0))
        throw std::invalid_argument("kl_divergence: p_prior must lie in (0, 1)");
    for (std::int64_t i = 0; i < coefficients.size(); ++i)
        if (!(coefficients[i] > 0.0)) throw std::invalid_argument("kl_divergence: coefficients must be positive");

    const double lambda = p_prior / (1.0 - p_prior);
    Tensor log_term = scale(blip::log(coefficients), -0.5);
    Tensor ratio_term = scale(add_const(coefficients, 1.0), 1.0 / (2.0 * lambda));
    Tensor per_element = add_const(add(log_term, ratio_term), 0.5 * std::log(lambda) - 0.5);
    return scale(mean(per_element), static_cast<double>(n_weight_elements));
}

}  // namespace blip
