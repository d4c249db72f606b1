/**
 * Particle graphs for the charged N-body task: batched fully-connected
 * graphs with per-architecture node featurization, and lossless JSON-lines
 * dataset files.
 */
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "blip/errors.hpp"
#include "blip/tensor.hpp"

namespace blip {

using Vec3 = std::array<double, 3>;

/// One simulated record: initial state plus positions after the horizon.
struct ParticleGraph {
    std::vector<Vec3> positions;
    std::vector<Vec3> velocities;
    std::vector<double> charges;  // exactly +1 or -1
    std::vector<Vec3> targets;

    int n() const { return static_cast<int>(positions.size()); }

    void validate() const {
        const std::size_t n_ = positions.size();
        if (n_ == 0 || velocities.size() != n_ || charges.size() != n_ || targets.size() != n_)
            throw DataError("particle graph: inconsistent field lengths");
        for (std::size_t i = 0; i < n_; ++i) {
            for (int k = 0; k < 3; ++k)
                if (!std::isfinite(positions[i][k]) || !std::isfinite(velocities[i][k]) ||
                    !std::isfinite(targets[i][k]))
                    throw DataError("particle graph: non-finite value in particle " + std::to_string(i));
            if (charges[i] != 1.0 && charges[i] != -1.0)
                throw DataError("particle graph: charge of particle " + std::to_string(i) + " is not +/-1");
        }
    }
};

/// Node featurization contract per architecture.
enum class Featurization {
    gnn,   // h0 = position || velocity  (6 per node)
    egnn,  // h0 = |velocity|            (1 per node)
};

/// A batch of graphs flattened into one node/edge index space.
/// Edges are ordered pairs (receiver i, sender j); fully connected per
/// graph, never crossing graph boundaries.
struct GraphBatch {
    Tensor node_features;                                   // [N x d]
    std::vector<std::pair<std::int64_t, std::int64_t>> edge_index;
    Tensor edge_attrs;                                      // [E x 1], a_ij = c_i * c_j
    Tensor positions;                                       // [N x 3]
    Tensor velocities;                                      // [N x 3]
    Tensor targets;                                         // [N x 3]
    std::vector<std::int64_t> graph_offsets;                // n_graphs + 1 entries

    // flat views of edge_index used by gather/scatter
    std::vector<std::int64_t> receivers;  // i of each edge
    std::vector<std::int64_t> senders;    // j of each edge

    std::int64_t n_nodes() const { return graph_offsets.back(); }
    std::int64_t n_edges() const { return static_cast<std::int64_t>(edge_index.size()); }
    std::int64_t n_graphs() const { return static_cast<std::int64_t>(graph_offsets.size()) - 1; }
    std::int64_t nodes_in_graph(std::int64_t g) const { return graph_offsets[g + 1] - graph_offsets[g]; }
};

inline GraphBatch build_batch(const std::vector<ParticleGraph>& graphs, Featurization feat) {
    if (graphs.empty()) throw std::invalid_argument("build_batch: empty graph list");
    const int n_per = graphs.front().n();
    std::int64_t n_nodes = 0, n_edges = 0;
    for (const auto& g : graphs) {
        if (g.n() != n_per)
            throw std::invalid_argument("build_batch: inconsistent particle counts (" + std::to_string(g.n()) +
                                        " vs " + std::to_string(n_per) + ")");
        n_nodes += g.n();
        n_edges += static_cast<std::int64_t>(g.n()) * (g.n() - 1);
    }

    const std::int64_t feat_dim = feat == Featurization::gnn ? 6 : 1;
    GraphBatch b;
    b.node_features = Tensor::empty({n_nodes, feat_dim});
    b.edge_attrs = Tensor::empty({n_edges, 1});
    b.positions = Tensor::empty({n_nodes, 3});
    b.velocities = Tensor::empty({n_nodes, 3});
    b.targets = Tensor::empty({n_nodes, 3});
    b.edge_index.reserve(static_cast<std::size_t>(n_edges));
    b.receivers.reserve(static_cast<std::size_t>(n_edges));
    b.senders.reserve(static_cast<std::size_t>(n_edges));
    b.graph_offsets.push_back(0);

    std::int64_t node = 0, edge = 0;
    for (const auto& g : graphs) {
        const std::int64_t base = node;
        for (int i = 0; i < g.n(); ++i, ++node) {
            for (int k = 0; k < 3; ++k) {
                b.positions(node, k) = g.positions[i][k];
                b.velocities(node, k) = g.velocities[i][k];
                b.targets(node, k) = g.targets[i][k];
            }
            if (feat == Featurization::gnn) {
                for (int k = 0; k < 3; ++k) {
                    b.node_features(node, k) = g.positions[i][k];
                    b.node_features(node, 3 + k) = g.velocities[i][k];
                }
            } else {
                const auto& v = g.velocities[i];
                b.node_features(node, 0) = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            }
        }
        for (int i = 0; i < g.n(); ++i)
            for (int j = 0; j < g.n(); ++j) {
                if (i == j) continue;
                b.edge_index.emplace_back(base + i, base + j);
                b.receivers.push_back(base + i);
                b.senders.push_back(base + j);
                b.edge_attrs[edge++] = g.charges[i] * g.charges[j];
            }
        b.graph_offsets.push_back(node);
    }
    return b;
}

// ---------------------------------------------------------------------------
// JSON-lines dataset files
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json vec3s_to_json(const std::vector<Vec3>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) j.push_back({r[0], r[1], r[2]});
    return j;
}

inline std::vector<Vec3> vec3s_from_json(const nlohmann::json& j, const char* key, int line) {
    if (!j.is_array()) throw DataError("line " + std::to_string(line) + ": '" + key + "' is not an array");
    std::vector<Vec3> out;
    out.reserve(j.size());
    for (const auto& row : j) {
        if (!row.is_array() || row.size() != 3)
            throw DataError("line " + std::to_string(line) + ": '" + key + "' rows must have 3 components");
        out.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
    }
    return out;
}

}  // namespace detail

inline void write_dataset(const std::string& path, const std::vector<ParticleGraph>& graphs) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (const auto& g : graphs) {
        g.validate();
        nlohmann::json j;
        j["positions"] = detail::vec3s_to_json(g.positions);
        j["velocities"] = detail::vec3s_to_json(g.velocities);
        j["charges"] = g.charges;
        j["targets"] = detail::vec3s_to_json(g.targets);
        out << j.dump() << '\n';
    }
    if (!out) throw DataError("write failed: " + path);
}

/// Read a .jsonl dataset. expected_particles = 0 infers the count from the
/// first record; every record must then match.
inline std::vector<ParticleGraph> read_dataset(const std::string& path, int expected_particles = 0) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    std::vector<ParticleGraph> graphs;
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
        for (const char* key : {"positions", "velocities", "charges", "targets"})
            if (!j.contains(key)) throw DataError("line " + std::to_string(line_no) + ": missing key '" + key + "'");

        ParticleGraph g;
        g.positions = detail::vec3s_from_json(j["positions"], "positions", line_no);
        g.velocities = detail::vec3s_from_json(j["velocities"], "velocities", line_no);
        g.targets = detail::vec3s_from_json(j["targets"], "targets", line_no);
        g.charges = j["charges"].get<std::vector<double>>();

        try {
            g.validate();
        } catch (const DataError& e) {
            throw DataError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (expected_particles == 0) expected_particles = g.n();
        if (g.n() != expected_particles)
            throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(expected_particles) +
                            " particles, got " + std::to_string(g.n()));
        graphs.push_back(std::move(g));
    }
    return graphs;
}

}  // namespace blip
