#include <doctest.h>

#include <cmath>
#include <cstring>

#include "blip/models.hpp"
#include "support/oracles.hpp"

using namespace blip;

namespace {

ParticleGraph random_graph(RngStream& rng, int n = 5, double vel_scale = 1.0) {
    ParticleGraph g;
    for (int i = 0; i < n; ++i) {
        g.positions.push_back({rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()});
        g.velocities.push_back({vel_scale * rng.next_gaussian(), vel_scale * rng.next_gaussian(),
                                vel_scale * rng.next_gaussian()});
        g.targets.push_back({rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()});
        g.charges.push_back((rng.next_u64() & 1) ? 1.0 : -1.0);
    }
    return g;
}

ParticleGraph transform_graph(const ParticleGraph& g, const std::array<std::array<double, 3>, 3>& rot,
                              const Vec3& shift, bool rotate_velocities = true) {
    ParticleGraph out = g;
    for (int i = 0; i < g.n(); ++i)
        for (int a = 0; a < 3; ++a) {
            out.positions[static_cast<std::size_t>(i)][a] =
                rot[a][0] * g.positions[static_cast<std::size_t>(i)][0] +
                rot[a][1] * g.positions[static_cast<std::size_t>(i)][1] +
                rot[a][2] * g.positions[static_cast<std::size_t>(i)][2] + shift[a];
            if (rotate_velocities)
                out.velocities[static_cast<std::size_t>(i)][a] =
                    rot[a][0] * g.velocities[static_cast<std::size_t>(i)][0] +
                    rot[a][1] * g.velocities[static_cast<std::size_t>(i)][1] +
                    rot[a][2] * g.velocities[static_cast<std::size_t>(i)][2];
        }
    return out;
}

ParticleGraph permute_graph(const ParticleGraph& g, const std::vector<int>& perm) {
    ParticleGraph out;
    for (int i : perm) {
        out.positions.push_back(g.positions[static_cast<std::size_t>(i)]);
        out.velocities.push_back(g.velocities[static_cast<std::size_t>(i)]);
        out.targets.push_back(g.targets[static_cast<std::size_t>(i)]);
        out.charges.push_back(g.charges[static_cast<std::size_t>(i)]);
    }
    return out;
}

ModelConfig small_config(Architecture arch, Mode mode) {
    ModelConfig c;
    c.architecture = arch;
    c.mode = mode;
    c.n_layers = 2;
    c.hidden_dim = 16;
    c.inference_hidden = 16;
    if (mode == Mode::mc_dropout) c.dropout_p = 0.3;
    return c;
}

}  // namespace

TEST_CASE("output shapes and config validation") {
    RngStream rng(1);
    auto g = random_graph(rng);
    for (auto arch : {Architecture::gnn, Architecture::egnn}) {
        auto model = BlipModel::init(small_config(arch, Mode::deterministic), RngStream(11));
        auto batch = build_batch({g}, model.config.featurization());
        Tensor out = forward_map(model, batch);
        CHECK(out.shape() == Shape{5, 3});
    }

    ModelConfig bad = small_config(Architecture::gnn, Mode::deterministic);
    bad.dropout_p = 0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    ModelConfig bad2 = small_config(Architecture::gnn, Mode::blip);
    bad2.p_min = 0.9;
    CHECK_THROWS_AS(bad2.validate(), ConfigError);
}

TEST_CASE("same init seed gives bit-identical parameters") {
    auto a = BlipModel::init(small_config(Architecture::egnn, Mode::blip), RngStream(5));
    auto b = BlipModel::init(small_config(Architecture::egnn, Mode::blip), RngStream(5));
    a.visit_params([&](const std::string& name, Tensor& t) {
        bool matched = false;
        b.visit_params([&](const std::string& other, Tensor& u) {
            if (other == name) {
                matched = true;
                REQUIRE(t.size() == u.size());
                CHECK(std::memcmp(t.data(), u.data(), sizeof(double) * static_cast<std::size_t>(t.size())) == 0);
            }
        });
        CHECK(matched);
    });
}

TEST_CASE("blip MAP equals a deterministic model with the same weights, bitwise") {
    RngStream rng(2);
    auto g = random_graph(rng);
    for (auto arch : {Architecture::gnn, Architecture::egnn}) {
        auto blip_model = BlipModel::init(small_config(arch, Mode::blip), RngStream(31));
        auto det_model = BlipModel::init(small_config(arch, Mode::deterministic), RngStream(31));
        // init consumed identical draws for the shared weights, in order
        auto batch = build_batch({g}, blip_model.config.featurization());
        Tensor map_out = forward_map(blip_model, batch);
        Tensor det_out = forward_map(det_model, batch);
        CHECK(std::memcmp(map_out.data(), det_out.data(), sizeof(double) * 15) == 0);
    }
}

TEST_CASE("blip sampling requires coefficients and rng") {
    RngStream rng(3);
    auto g = random_graph(rng);
    auto model = BlipModel::init(small_config(Architecture::gnn, Mode::blip), RngStream(7));
    auto batch = build_batch({g}, model.config.featurization());
    ForwardOptions opts;
    opts.sample = true;
    CHECK_THROWS_AS(forward_positions(model, batch, opts), std::invalid_argument);

    auto det = BlipModel::init(small_config(Architecture::gnn, Mode::deterministic), RngStream(7));
    RngStream noise(1);
    ForwardOptions opts2;
    opts2.sample = true;
    opts2.rng = &noise;
    CHECK_THROWS_AS(forward_positions(det, batch, opts2), std::invalid_argument);
}

TEST_CASE("permutation equivariance in MAP mode") {
    RngStream rng(4);
    auto g = random_graph(rng);
    std::vector<int> perm = {2, 4, 1, 0, 3};
    auto pg = permute_graph(g, perm);
    for (auto arch : {Architecture::gnn, Architecture::egnn}) {
        for (auto mode : {Mode::deterministic, Mode::blip}) {
            auto model = BlipModel::init(small_config(arch, mode), RngStream(13));
            auto ba = build_batch({g}, model.config.featurization());
            auto bp = build_batch({pg}, model.config.featurization());
            Tensor ya = forward_map(model, ba);
            Tensor yp = forward_map(model, bp);
            for (int ni = 0; ni < 5; ++ni)
                for (int k = 0; k < 3; ++k) {
                    CAPTURE(to_string(arch));
                    CHECK(std::abs(yp(ni, k) - ya(perm[static_cast<std::size_t>(ni)], k)) < 1e-12);
                }
        }
    }
}

TEST_CASE("egnn MAP forward is E(3)-equivariant") {
    RngStream rng(9);
    auto model = BlipModel::init(small_config(Architecture::egnn, Mode::deterministic), RngStream(17));
    auto g = random_graph(rng);
    auto batch = build_batch({g}, Featurization::egnn);
    Tensor y = forward_map(model, batch);

    RngStream rot_rng(23);
    for (int trial = 0; trial < 25; ++trial) {
        auto rot = blip::testing::random_rotation(rot_rng);
        Vec3 shift = {rot_rng.next_gaussian(), rot_rng.next_gaussian(), rot_rng.next_gaussian()};
        auto tg = transform_graph(g, rot, shift);
        Tensor yt = forward_map(model, build_batch({tg}, Featurization::egnn));
        // expected: R*y + t
        for (int i = 0; i < 5; ++i)
            for (int a = 0; a < 3; ++a) {
                const double expect = rot[a][0] * y(i, 0) + rot[a][1] * y(i, 1) + rot[a][2] * y(i, 2) + shift[a];
                CHECK(std::abs(yt(i, a) - expect) < 1e-9);
            }
    }

    // pure translation separately, tighter
    Vec3 t = {3.5, -1.25, 0.75};
    auto tg = transform_graph(g, {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}, t);
    Tensor yt = forward_map(model, build_batch({tg}, Featurization::egnn));
    for (int i = 0; i < 5; ++i)
        for (int a = 0; a < 3; ++a) CHECK(std::abs(yt(i, a) - (y(i, a) + t[a])) < 1e-12);
}

TEST_CASE("gnn is not translation-equivariant (sanity contrast)") {
    RngStream rng(10);
    auto model = BlipModel::init(small_config(Architecture::gnn, Mode::deterministic), RngStream(19));
    auto g = random_graph(rng);
    Tensor y = forward_map(model, build_batch({g}, Featurization::gnn));
    Vec3 t = {2.0, 2.0, 2.0};
    auto tg = transform_graph(g, {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}, t);
    Tensor yt = forward_map(model, build_batch({tg}, Featurization::gnn));
    double dev = 0;
    for (int i = 0; i < 5; ++i)
        for (int a = 0; a < 3; ++a) dev = std::max(dev, std::abs(yt(i, a) - (y(i, a) + t[a])));
    CHECK(dev > 1e-6);  // the plain gnn has no built-in symmetry
}

TEST_CASE("egnn-blip MC mean is equivariant in distribution") {
    auto model = BlipModel::init(small_config(Architecture::egnn, Mode::blip), RngStream(29));
    RngStream rng(12);
    auto g = random_graph(rng);
    auto batch = build_batch({g}, Featurization::egnn);
    RngStream rot_rng(37);
    auto rot = blip::testing::random_rotation(rot_rng);
    auto batch_rot = build_batch({transform_graph(g, rot, {0, 0, 0})}, Featurization::egnn);

    auto coeffs = infer_coefficients(model.inference, batch);
    auto coeffs_rot = infer_coefficients(model.inference, batch_rot);

    const int s_count = 2000;
    Tensor mean_a = Tensor::zeros({5, 3});
    Tensor mean_b = Tensor::zeros({5, 3});
    Tensor sq_a = Tensor::zeros({5, 3});
    Tensor sq_b = Tensor::zeros({5, 3});
    RngStream root(101);
    for (int s = 0; s < s_count; ++s) {
        RngStream sa = root.derive("a", static_cast<std::uint64_t>(s));
        RngStream sb = root.derive("b", static_cast<std::uint64_t>(s));
        Tensor ya = forward_blip_sample(model, batch, coeffs, sa);
        Tensor yb = forward_blip_sample(model, batch_rot, coeffs_rot, sb);
        for (std::int64_t i = 0; i < 15; ++i) {
            mean_a[i] += ya[i] / s_count;
            sq_a[i] += ya[i] * ya[i] / s_count;
            mean_b[i] += yb[i] / s_count;
            sq_b[i] += yb[i] * yb[i] / s_count;
        }
    }
    // || R*mean_a - mean_b || against combined MC standard errors
    double diff2 = 0.0, se2 = 0.0;
    for (int i = 0; i < 5; ++i)
        for (int a = 0; a < 3; ++a) {
            const double rotated = rot[a][0] * mean_a(i, 0) + rot[a][1] * mean_a(i, 1) + rot[a][2] * mean_a(i, 2);
            diff2 += (rotated - mean_b(i, a)) * (rotated - mean_b(i, a));
            const double va = sq_a(i, a) - mean_a(i, a) * mean_a(i, a);
            const double vb = sq_b(i, a) - mean_b(i, a) * mean_b(i, a);
            se2 += (va + vb) / s_count;
        }
    CHECK(std::sqrt(diff2) < 5.0 * std::sqrt(se2));
}

TEST_CASE("zero-velocity zero-charge input barely moves at initialization") {
    auto model = BlipModel::init(small_config(Architecture::egnn, Mode::deterministic), RngStream(41));
    ParticleGraph g;
    RngStream rng(14);
    for (int i = 0; i < 5; ++i) {
        g.positions.push_back({rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()});
        g.velocities.push_back({0, 0, 0});
        g.targets.push_back({0, 0, 0});
        g.charges.push_back(0.0);  // force-free probe input
    }
    auto batch = build_batch({g}, Featurization::egnn);
    Tensor y = forward_map(model, batch);

    // forward evaluation oracle: replay the layer loop, bounding the motion
    // by the phi_x outputs and pair distances seen along the way
    Tensor h = linear_map(model.node_embed, batch.node_features);
    Tensor x = batch.positions;
    Tensor v = batch.velocities;
    Tensor inv_deg = Tensor::full({5, 1}, 0.25);
    double bound = 0.0;
    double vel_mag = 0.0;
    for (const auto& layer : model.layers) {
        Tensor xi = gather_rows(x, batch.receivers);
        Tensor xj = gather_rows(x, batch.senders);
        Tensor diff = sub(xi, xj);
        Tensor d2 = sum(mul(diff, diff), 1);
        Tensor me = layer.message.forward(concat_cols({gather_rows(h, batch.receivers), gather_rows(h, batch.senders), d2, batch.edge_attrs}));
        Tensor wx = layer.coord.forward(me);
        double max_wx = 0.0, max_d = 0.0, max_wv = 0.0;
        for (std::int64_t e = 0; e < wx.size(); ++e) max_wx = std::max(max_wx, std::abs(wx[e]));
        for (std::int64_t e = 0; e < d2.size(); ++e) max_d = std::max(max_d, std::sqrt(d2[e]));
        Tensor wv = layer.vel.forward(h);
        for (std::int64_t i = 0; i < wv.size(); ++i) max_wv = std::max(max_wv, std::abs(wv[i]));
        vel_mag = max_wv * vel_mag + max_wx * max_d;  // per-component-style recursion
        bound += 3.0 * vel_mag;                        // loose: 3 components
        Tensor agg = scatter_sum_rows(mul(diff, wx), batch.receivers, 5);
        v = add(mul(wv, v), mul(inv_deg, agg));
        x = add(x, v);
        h = layer.update.forward(concat_cols({h, scatter_sum_rows(me, batch.receivers, 5)}));
    }
    double moved = 0.0;
    for (int i = 0; i < 5; ++i)
        for (int a = 0; a < 3; ++a) moved = std::max(moved, std::abs(y(i, a) - batch.positions(i, a)));
    CHECK(moved <= bound + 1e-12);
    CHECK(moved < 10.0);  // initialization scale, not an explosion
}

TEST_CASE("mc dropout behavior") {
    RngStream rng(15);
    auto g = random_graph(rng);

    // p = 0 collapses to the deterministic forward, bitwise
    ModelConfig c0 = small_config(Architecture::gnn, Mode::mc_dropout);
    c0.dropout_p = 0.0;
    auto m0 = BlipModel::init(c0, RngStream(43));
    auto batch = build_batch({g}, Featurization::gnn);
    RngStream s(2);
    Tensor dropped = forward_mc_dropout(m0, batch, s);
    Tensor plain = forward_map(m0, batch);
    CHECK(std::memcmp(dropped.data(), plain.data(), sizeof(double) * 15) == 0);

    // inverted scaling preserves the expectation
    RngStream mask_rng(3);
    const std::int64_t n = 100'000;
    Tensor mask = dropout_mask({n}, 0.3, mask_rng);
    double meanv = mask.array().mean();
    const double se = std::sqrt((0.3 / 0.7) / static_cast<double>(n));
    CHECK(std::abs(meanv - 1.0) < 4.0 * se);

    // different streams give different samples
    auto m = BlipModel::init(small_config(Architecture::gnn, Mode::mc_dropout), RngStream(43));
    RngStream s1(4), s2(5);
    Tensor a = forward_mc_dropout(m, batch, s1);
    Tensor b = forward_mc_dropout(m, batch, s2);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * 15) != 0);
}

TEST_CASE("batch independence: outputs match the single-graph forward") {
    RngStream rng(16);
    auto g1 = random_graph(rng);
    auto g2 = random_graph(rng);
    auto g3 = random_graph(rng);
    for (auto arch : {Architecture::gnn, Architecture::egnn}) {
        auto model = BlipModel::init(small_config(arch, Mode::deterministic), RngStream(47));
        auto feat = model.config.featurization();
        Tensor joint = forward_map(model, build_batch({g1, g2, g3}, feat));
        Tensor solo = forward_map(model, build_batch({g2}, feat));
        for (int i = 0; i < 5; ++i)
            for (int a = 0; a < 3; ++a) CHECK(std::abs(joint(5 + i, a) - solo(i, a)) < 1e-12);
    }
}

TEST_CASE("gradients flow through a full gnn forward") {
    RngStream rng(18);
    auto g = random_graph(rng);
    auto model = BlipModel::init(small_config(Architecture::gnn, Mode::deterministic), RngStream(53));
    auto batch = build_batch({g}, Featurization::gnn);

    Tape tape;
    model.watch_all(tape);
    Tensor out = forward_map(model, batch);
    Tensor diff = sub(out, batch.targets);
    backward(mean(mul(diff, diff)));

    int checked = 0;
    model.visit_params([&](const std::string&, Tensor& t) {
        Tensor gr = tape.grad(t);
        bool nonzero = false;
        for (std::int64_t i = 0; i < gr.size(); ++i)
            if (gr[i] != 0.0) nonzero = true;
        CHECK(gr.all_finite());
        CHECK(nonzero);
        ++checked;
    });
    CHECK(checked > 10);
}
