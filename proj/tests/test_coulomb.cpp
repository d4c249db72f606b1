#include <doctest.h>

#include <cmath>

#include "blip/coulomb.hpp"
#include "support/oracles.hpp"

using namespace blip;

TEST_CASE("coulomb forces: symmetry and Newton's third law") {
    std::vector<Vec3> x = {{0, 0, 0}, {1, 0, 0}};
    std::vector<double> q = {1, 1};
    auto f = coulomb_forces(x, q, 1.0, 0.01);
    CHECK(f[0][0] < 0.0);  // like charges push apart
    CHECK(f[1][0] > 0.0);
    CHECK(f[0][0] == -f[1][0]);
    CHECK(f[0][1] == 0.0);
    CHECK(f[0][2] == 0.0);

    // net force vanishes for any configuration
    RngStream rng(4);
    std::vector<Vec3> xs(5);
    std::vector<double> qs(5);
    for (auto& p : xs)
        for (auto& c : p) c = rng.next_gaussian();
    for (auto& c : qs) c = (rng.next_u64() & 1) ? 1.0 : -1.0;
    auto fs = coulomb_forces(xs, qs, 1.0, 0.1);
    for (int a = 0; a < 3; ++a) {
        double net = 0;
        for (const auto& fi : fs) net += fi[a];
        CHECK(std::abs(net) < 1e-14);
    }
}

TEST_CASE("softened force magnitude at unit distance") {
    std::vector<Vec3> x = {{0, 0, 0}, {1, 0, 0}};
    std::vector<double> q = {1, 1};
    auto f = coulomb_forces(x, q, 1.0, 0.01);
    const double expected = 1.0 / std::pow(1.0 + 1e-4, 1.5);  // direct evaluation
    CHECK(f[1][0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(f[1][0] == doctest::Approx(0.99985).epsilon(1e-4));
}

TEST_CASE("zero charges give free flight") {
    SimConfig cfg;
    cfg.box_half_size = 1e12;  // no walls
    std::vector<Vec3> x = {{0.1, 0.2, 0.3}, {-1, 0, 1}, {2, -2, 0}};
    std::vector<Vec3> v = {{0.5, 0, 0}, {0, 0.25, 0}, {-0.1, 0.1, 0.4}};
    std::vector<double> q = {0, 0, 0};
    auto x0 = x;
    auto v0 = v;
    integrate(x, v, q, cfg);
    const double t = cfg.dt * cfg.n_steps;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (int a = 0; a < 3; ++a) {
            CHECK(x[i][a] == doctest::Approx(x0[i][a] + v0[i][a] * t).epsilon(1e-12));
            CHECK(v[i][a] == v0[i][a]);
        }
}

TEST_CASE("like charges repel over the horizon") {
    SimConfig cfg;
    cfg.box_half_size = 1e12;
    std::vector<Vec3> x = {{-0.3, 0, 0}, {0.3, 0, 0}};
    std::vector<Vec3> v = {{0, 0, 0}, {0, 0, 0}};
    std::vector<double> q = {1, 1};
    const double d0 = 0.6;
    integrate(x, v, q, cfg);
    const double d1 = std::abs(x[1][0] - x[0][0]);
    CHECK(d1 > d0);
}

TEST_CASE("momentum is conserved without walls") {
    SimConfig cfg;
    cfg.box_half_size = 1e12;
    RngStream rec = RngStream(17).derive("mom", 2);
    ParticleGraph g = simulate(cfg, rec);
    auto x = g.positions;
    auto v = g.velocities;
    Vec3 p0 = {0, 0, 0};
    for (const auto& vi : v)
        for (int a = 0; a < 3; ++a) p0[a] += vi[a];
    integrate(x, v, g.charges, cfg);
    Vec3 p1 = {0, 0, 0};
    for (const auto& vi : v)
        for (int a = 0; a < 3; ++a) p1[a] += vi[a];
    const double n0 = std::sqrt(p0[0] * p0[0] + p0[1] * p0[1] + p0[2] * p0[2]);
    const double dn = std::sqrt((p1[0] - p0[0]) * (p1[0] - p0[0]) + (p1[1] - p0[1]) * (p1[1] - p0[1]) +
                                (p1[2] - p0[2]) * (p1[2] - p0[2]));
    CHECK(dn / n0 < 1e-6);
}

TEST_CASE("energy drift under leapfrog stays below 1% wall-free") {
    SimConfig cfg;
    cfg.box_half_size = 1e12;
    SimConfig one = cfg;
    one.n_steps = 1;
    for (std::uint64_t seed : {0ull, 1ull, 2ull, 3ull, 8ull, 9ull}) {
        RngStream rec = RngStream(cfg.seed).derive("drift", seed);
        ParticleGraph g = simulate(cfg, rec);
        auto x = g.positions;
        auto v = g.velocities;
        const double e0 = total_energy(x, v, g.charges, cfg);
        double max_dev = 0;
        for (int s = 0; s < cfg.n_steps; ++s) {
            integrate(x, v, g.charges, one);
            max_dev = std::max(max_dev, std::abs(total_energy(x, v, g.charges, cfg) - e0));
        }
        CAPTURE(seed);
        CHECK(max_dev / std::abs(e0) < 0.01);
    }
}

TEST_CASE("trajectories are rotation-covariant") {
    SimConfig cfg;
    cfg.box_half_size = 1e12;
    RngStream rec = RngStream(23).derive("rot", 1);
    ParticleGraph g = simulate(cfg, rec);

    RngStream rotrng(55);
    auto rot = blip::testing::random_rotation(rotrng);
    auto apply = [&](const std::vector<Vec3>& rows) {
        std::vector<Vec3> out(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int a = 0; a < 3; ++a)
                out[i][a] = rot[a][0] * rows[i][0] + rot[a][1] * rows[i][1] + rot[a][2] * rows[i][2];
        return out;
    };

    auto x1 = g.positions;
    auto v1 = g.velocities;
    integrate(x1, v1, g.charges, cfg);

    auto x2 = apply(g.positions);
    auto v2 = apply(g.velocities);
    integrate(x2, v2, g.charges, cfg);

    auto x1r = apply(x1);
    for (std::size_t i = 0; i < x1.size(); ++i)
        for (int a = 0; a < 3; ++a) CHECK(std::abs(x1r[i][a] - x2[i][a]) < 1e-9);
}

TEST_CASE("splits are reproducible and independent") {
    SimConfig cfg;
    cfg.n_steps = 10;
    auto s1 = generate_split(cfg, 3, 2, 2);
    auto s2 = generate_split(cfg, 3, 2, 2);
    CHECK(s1.train.size() == 3);
    CHECK(s1.val.size() == 2);
    CHECK(s1.test.size() == 2);

    // same seed twice -> bit-identical
    for (std::size_t i = 0; i < s1.train.size(); ++i)
        for (int p = 0; p < s1.train[i].n(); ++p)
            for (int a = 0; a < 3; ++a)
                CHECK(std::memcmp(&s1.train[i].targets[p][a], &s2.train[i].targets[p][a], 8) == 0);

    // different split streams start differently
    CHECK(s1.train[0].positions[0] != s1.val[0].positions[0]);
    CHECK(s1.val[0].positions[0] != s1.test[0].positions[0]);

    CHECK_THROWS_AS(generate_split(cfg, 0, 1, 1), std::invalid_argument);
}

TEST_CASE("sim config validation") {
    SimConfig bad;
    bad.dt = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = SimConfig{};
    bad.softening = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = SimConfig{};
    bad.n_steps = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
