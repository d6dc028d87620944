#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

#include "msgcel/dataset.hpp"
#include "msgcel/types.hpp"

namespace msgcel {

class TeacherNet;

struct CentroidBank {
    Matrix centroids;  // L x dim
    std::int64_t last_refresh_step = -1;
    /// Inertia after initialization and after each Lloyd iteration.
    std::vector<double> inertia_history;

    Eigen::Index size() const { return centroids.rows(); }
};

/// Lloyd's algorithm seeded by farthest-point initialization. The first
/// centre is a seeded random row; each further centre is the row farthest
/// from its nearest centre (lowest index on ties). Empty clusters are
/// re-seeded at the row farthest from its assigned centre.
CentroidBank kmeans(const Matrix& data, int clusters, int iters, std::uint64_t seed);

/// Sum of squared distances from each row to its nearest centroid.
double kmeans_inertia(const Matrix& data, const Matrix& centroids);

struct NeighborTable {
    std::unordered_map<ObjectId, std::vector<ObjectId>> neighbors;
    std::int64_t last_refresh_step = -1;

    const std::vector<ObjectId>& of(ObjectId id) const;
};

/// Within-group K nearest neighbours by Euclidean distance, self excluded,
/// ties broken by ascending object id. Row i of `embeddings` belongs to
/// `row_ids[i]`.
NeighborTable knn_table(const Matrix& embeddings, std::span<const ObjectId> row_ids, const ScaleGroups& groups,
                        int k_neighbors);

struct BatchConfig {
    int budget = 120;
    int k_neighbors = 5;
    int n_shared = 6;
};

/// Per group block: group-drawn rows first, then the shared rows (identical
/// ids in every block).
struct Batch {
    std::vector<std::vector<ObjectId>> blocks;
    std::vector<ObjectId> shared;

    std::size_t total_rows() const;
};

/// Anchors are drawn uniformly without replacement inside each group and
/// expanded with their neighbours until the group quota
/// (budget - k * n_shared) / k is filled; the remainder goes one row each to
/// the leading groups. Shared objects are drawn from the whole table first
/// and excluded from the per-group draws.
Batch assemble_batch(const ScaleGroups& groups, const NeighborTable& neighbors, const BatchConfig& config,
                     std::mt19937_64& rng);

/// True when a refresh is due at `step`.
bool refresh_due(std::int64_t step, std::int64_t period);

struct SamplerState {
    CentroidBank centroids;
    NeighborTable neighbors;
};

struct RefreshConfig {
    std::int64_t period = 1000;
    int clusters = 100;
    int kmeans_iters = 20;
    int k_neighbors = 5;
    std::uint64_t seed = 0;
};

/// When due, re-embeds every object with the teacher, rebuilds the KNN table
/// on f^t and the centroid bank on the teacher's per-group h-head outputs.
/// Returns whether it fired.
bool refresh(std::int64_t step, const RefreshConfig& config, const TeacherNet& teacher, const ObjectTable& table,
             const FeatureBank& features, const ScaleGroups& groups, SamplerState& state);

}  // namespace msgcel
