/**
 * Dataset generator: five (by default) charged particles in a soft-walled
 * box, integrated under softened Coulomb forces with velocity-Verlet
 * leapfrog. Each record owns an RNG sub-stream keyed by (split, index), so
 * generation is reproducible and order-independent.
 */
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "blip/graph.hpp"
#include "blip/rng.hpp"

namespace blip {

struct SimConfig {
    int n_particles = 5;
    double box_half_size = 5.0;
    double interaction_strength = 1.0;  // Coulomb constant k
    double dt = 1e-3;
    int n_steps = 1000;                 // prediction horizon in integrator steps
    double softening = 0.1;             // eps_soft
    double init_pos_std = 0.5;
    double init_vel_norm = 0.5;
    double wall_stiffness = 10.0;       // harmonic restoring force beyond the box
    std::uint64_t seed = 43;

    void validate() const {
        if (n_particles < 1) throw std::invalid_argument("SimConfig: n_particles must be >= 1");
        if (dt <= 0) throw std::invalid_argument("SimConfig: dt must be > 0");
        if (n_steps <= 0) throw std::invalid_argument("SimConfig: n_steps must be > 0");
        if (softening <= 0) throw std::invalid_argument("SimConfig: softening must be > 0");
        if (box_half_size <= 0) throw std::invalid_argument("SimConfig: box_half_size must be > 0");
    }
};

/// F_i = sum_{j != i} k q_i q_j (r_i - r_j) / (|r_i - r_j|^2 + eps^2)^{3/2}
inline std::vector<Vec3> coulomb_forces(const std::vector<Vec3>& positions, const std::vector<double>& charges,
                                        double k, double softening) {
    const std::size_t n = positions.size();
    std::vector<Vec3> f(n, Vec3{0, 0, 0});
    const double eps2 = softening * softening;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            Vec3 d = {positions[i][0] - positions[j][0], positions[i][1] - positions[j][1],
                      positions[i][2] - positions[j][2]};
            const double r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            const double inv = k * charges[i] * charges[j] / std::pow(r2 + eps2, 1.5);
            for (int a = 0; a < 3; ++a) {
                const double fa = inv * d[a];
                f[i][a] += fa;
                f[j][a] -= fa;  // Newton's third law, exact cancellation
            }
        }
    }
    return f;
}

/// Harmonic wall: restoring force proportional to the excursion beyond the box.
inline void add_wall_forces(std::vector<Vec3>& f, const std::vector<Vec3>& positions, const SimConfig& cfg) {
    const double b = cfg.box_half_size;
    for (std::size_t i = 0; i < positions.size(); ++i)
        for (int a = 0; a < 3; ++a) {
            const double x = positions[i][a];
            if (x > b)
                f[i][a] -= cfg.wall_stiffness * (x - b);
            else if (x < -b)
                f[i][a] -= cfg.wall_stiffness * (x + b);
        }
}

/// Kinetic + softened Coulomb + wall potential (unit masses).
inline double total_energy(const std::vector<Vec3>& positions, const std::vector<Vec3>& velocities,
                           const std::vector<double>& charges, const SimConfig& cfg) {
    double e = 0.0;
    for (const auto& v : velocities) e += 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    const double eps2 = cfg.softening * cfg.softening;
    for (std::size_t i = 0; i < positions.size(); ++i)
        for (std::size_t j = i + 1; j < positions.size(); ++j) {
            const auto& a = positions[i];
            const auto& b = positions[j];
            const double r2 = (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                              (a[2] - b[2]) * (a[2] - b[2]);
            e += cfg.interaction_strength * charges[i] * charges[j] / std::sqrt(r2 + eps2);
        }
    for (const auto& p : positions)
        for (int a = 0; a < 3; ++a) {
            const double over = std::abs(p[a]) - cfg.box_half_size;
            if (over > 0) e += 0.5 * cfg.wall_stiffness * over * over;
        }
    return e;
}

/// Velocity-Verlet (kick-drift-kick) for n_steps; mutates positions/velocities.
inline void integrate(std::vector<Vec3>& positions, std::vector<Vec3>& velocities,
                      const std::vector<double>& charges, const SimConfig& cfg) {
    auto force = [&](const std::vector<Vec3>& x) {
        auto f = coulomb_forces(x, charges, cfg.interaction_strength, cfg.softening);
        add_wall_forces(f, x, cfg);
        return f;
    };
    std::vector<Vec3> f = force(positions);
    const double half_dt = 0.5 * cfg.dt;
    for (int s = 0; s < cfg.n_steps; ++s) {
        for (std::size_t i = 0; i < positions.size(); ++i)
            for (int a = 0; a < 3; ++a) {
                velocities[i][a] += half_dt * f[i][a];
                positions[i][a] += cfg.dt * velocities[i][a];
            }
        f = force(positions);
        for (std::size_t i = 0; i < positions.size(); ++i)
            for (int a = 0; a < 3; ++a) velocities[i][a] += half_dt * f[i][a];
    }
}

/// Draw one record: random initial state, integrate, keep endpoints.
inline ParticleGraph simulate(const SimConfig& cfg, RngStream& rng) {
    cfg.validate();
    ParticleGraph g;
    g.positions.resize(static_cast<std::size_t>(cfg.n_particles));
    g.velocities.resize(static_cast<std::size_t>(cfg.n_particles));
    g.charges.resize(static_cast<std::size_t>(cfg.n_particles));
    for (int i = 0; i < cfg.n_particles; ++i) {
        for (int a = 0; a < 3; ++a) {
            double x = cfg.init_pos_std * rng.next_gaussian();
            x = std::clamp(x, -cfg.box_half_size, cfg.box_half_size);
            g.positions[static_cast<std::size_t>(i)][a] = x;
        }
        Vec3 dir = {rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()};
        const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        for (int a = 0; a < 3; ++a)
            g.velocities[static_cast<std::size_t>(i)][a] = cfg.init_vel_norm * dir[a] / norm;
        g.charges[static_cast<std::size_t>(i)] = (rng.next_u64() & 1) ? 1.0 : -1.0;
    }
    std::vector<Vec3> x = g.positions;
    std::vector<Vec3> v = g.velocities;
    integrate(x, v, g.charges, cfg);
    g.targets = std::move(x);
    return g;
}

struct DatasetSplits {
    std::vector<ParticleGraph> train, val, test;
};

/// Independent sub-streams per (split, record index): no shared trajectories.
inline DatasetSplits generate_split(const SimConfig& cfg, int n_train, int n_val, int n_test) {
    if (n_train < 1 || n_val < 1 || n_test < 1)
        throw std::invalid_argument("generate_split: all split sizes must be >= 1");
    RngStream root(cfg.seed);
    DatasetSplits out;
    auto fill = [&](std::vector<ParticleGraph>& dst, const char* split, int count) {
        dst.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            RngStream rec = root.derive(split, static_cast<std::uint64_t>(i));
            dst.push_back(simulate(cfg, rec));
        }
    };
    fill(out.train, "train", n_train);
    fill(out.val, "val", n_val);
    fill(out.test, "test", n_test);
    return out;
}

}  // namespace blip
