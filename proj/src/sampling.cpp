#include "msgcel/sampling.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_set>

#include "msgcel/binary_io.hpp"
#include "msgcel/encoder.hpp"

namespace msgcel {

// --- k-means -----------------------------------------------------------------

namespace {

struct Assignment {
    std::vector<Eigen::Index> label;
    std::vector<double> dist2;
};

Assignment assign_nearest(const Matrix& data, const Matrix& centroids) {
    const Eigen::Index n = data.rows();
    Assignment a;
    a.label.resize(static_cast<std::size_t>(n));
    a.dist2.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        Eigen::Index arg = 0;
        for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
            const double d = (data.row(i) - centroids.row(c)).squaredNorm();
            if (d < best) {
                best = d;
                arg = c;
            }
        }
        a.label[static_cast<std::size_t>(i)] = arg;
        a.dist2[static_cast<std::size_t>(i)] = best;
    }
    return a;
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

double kmeans_inertia(const Matrix& data, const Matrix& centroids) { return sum(assign_nearest(data, centroids).dist2); }

CentroidBank kmeans(const Matrix& data, int clusters, int iters, std::uint64_t seed) {
    const Eigen::Index n = data.rows();
    if (clusters < 1) throw Error("kmeans: cluster count must be >= 1");
    if (n < clusters) {
        throw Error("kmeans: " + std::to_string(n) + " rows cannot form " + std::to_string(clusters) + " clusters");
    }
    if (!data.allFinite()) throw Error("kmeans: non-finite data");

    CentroidBank bank;
    bank.centroids.resize(clusters, data.cols());
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    Eigen::Index chosen = pick(rng);
    bank.centroids.row(0) = data.row(chosen);
    std::vector<double> nearest(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) nearest[static_cast<std::size_t>(i)] = (data.row(i) - data.row(chosen)).squaredNorm();
    for (int c = 1; c < clusters; ++c) {
        const auto far = std::max_element(nearest.begin(), nearest.end());  // first maximum
        chosen = static_cast<Eigen::Index>(std::distance(nearest.begin(), far));
        bank.centroids.row(c) = data.row(chosen);
        for (Eigen::Index i = 0; i < n; ++i) {
            auto& d = nearest[static_cast<std::size_t>(i)];
            d = std::min(d, (data.row(i) - data.row(chosen)).squaredNorm());
        }
    }

    Assignment a = assign_nearest(data, bank.centroids);
    bank.inertia_history.push_back(sum(a.dist2));
    for (int it = 0; it < iters; ++it) {
        Matrix sums = Matrix::Zero(clusters, data.cols());
        std::vector<Eigen::Index> counts(static_cast<std::size_t>(clusters), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto c = a.label[static_cast<std::size_t>(i)];
            sums.row(c) += data.row(i);
            ++counts[static_cast<std::size_t>(c)];
        }
        std::vector<double> residual = a.dist2;
        for (int c = 0; c < clusters; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                bank.centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            } else {
                const auto far = std::max_element(residual.begin(), residual.end());
                const auto row = static_cast<Eigen::Index>(std::distance(residual.begin(), far));
                bank.centroids.row(c) = data.row(row);
                *far = 0.0;
            }
        }
        Assignment next = assign_nearest(data, bank.centroids);
        bank.inertia_history.push_back(sum(next.dist2));
        const bool stable = next.label == a.label;
        a = std::move(next);
        if (stable) break;
    }
    return bank;
}

// --- KNN ---------------------------------------------------------------------

const std::vector<ObjectId>& NeighborTable::of(ObjectId id) const {
    auto it = neighbors.find(id);
    if (it == neighbors.end()) throw Error("neighbor table: no entry for object " + std::to_string(id));
    return it->second;
}

NeighborTable knn_table(const Matrix& embeddings, std::span<const ObjectId> row_ids, const ScaleGroups& groups,
                        int k_neighbors) {
    if (k_neighbors < 1) throw Error("knn_table: K must be >= 1");
    if (static_cast<Eigen::Index>(row_ids.size()) != embeddings.rows()) throw Error("knn_table: row id count mismatch");
    std::unordered_map<ObjectId, Eigen::Index> row_of;
    for (std::size_t i = 0; i < row_ids.size(); ++i) row_of.emplace(row_ids[i], static_cast<Eigen::Index>(i));

    NeighborTable table;
    for (int m = 0; m < groups.k; ++m) {
        const auto& members = groups.members[static_cast<std::size_t>(m)];
        if (members.size() < 2) {
            throw Error("knn_table: group " + std::to_string(m) + " has fewer than 2 members");
        }
        std::vector<Eigen::Index> rows;
        rows.reserve(members.size());
        for (ObjectId id : members) {
            auto it = row_of.find(id);
            if (it == row_of.end()) throw Error("knn_table: no embedding for object " + std::to_string(id));
            rows.push_back(it->second);
        }
        const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k_neighbors), members.size() - 1);
        std::vector<std::pair<double, ObjectId>> cand;
        cand.reserve(members.size());
        for (std::size_t a = 0; a < members.size(); ++a) {
            cand.clear();
            for (std::size_t b = 0; b < members.size(); ++b) {
                if (a == b) continue;
                cand.emplace_back((embeddings.row(rows[a]) - embeddings.row(rows[b])).squaredNorm(), members[b]);
            }
            std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
            auto& out = table.neighbors[members[a]];
            for (std::size_t t = 0; t < take; ++t) out.push_back(cand[t].second);
        }
    }
    return table;
}

// --- Batch assembly ----------------------------------------------------------

std::size_t Batch::total_rows() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.size();
    return n;
}

namespace {

/// Draws `count` distinct elements by a partial Fisher-Yates pass.
std::vector<ObjectId> draw_without_replacement(std::vector<ObjectId> pool, std::size_t count, std::mt19937_64& rng) {
    count = std::min(count, pool.size());
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(count);
    return pool;
}

}  // namespace

Batch assemble_batch(const ScaleGroups& groups, const NeighborTable& neighbors, const BatchConfig& config,
                     std::mt19937_64& rng) {
    const int k = groups.k;
    if (k < 1) throw Error("assemble_batch: no groups");
    if (config.n_shared < 0 || config.budget < 1) throw Error("assemble_batch: bad batch config");
    const int drawn = config.budget - k * config.n_shared;
    if (drawn < k) {
        throw Error("assemble_batch: quota unattainable, budget " + std::to_string(config.budget) +
                    " leaves no rows per group after " + std::to_string(config.n_shared) + " shared rows");
    }

    Batch batch;
    std::vector<ObjectId> everyone;
    for (const auto& members : groups.members) everyone.insert(everyone.end(), members.begin(), members.end());
    batch.shared = draw_without_replacement(everyone, static_cast<std::size_t>(config.n_shared), rng);
    if (batch.shared.size() != static_cast<std::size_t>(config.n_shared)) {
        throw Error("assemble_batch: quota unattainable, table smaller than n_shared");
    }
    const std::unordered_set<ObjectId> shared(batch.shared.begin(), batch.shared.end());

    for (int m = 0; m < k; ++m) {
        const std::size_t quota = static_cast<std::size_t>(drawn / k + (m < drawn % k ? 1 : 0));
        std::vector<ObjectId> pool;
        for (ObjectId id : groups.members[static_cast<std::size_t>(m)])
            if (!shared.count(id)) pool.push_back(id);
        if (pool.size() < quota) {
            throw Error("assemble_batch: quota unattainable for group " + std::to_string(m) + " (" +
                        std::to_string(pool.size()) + " candidates, quota " + std::to_string(quota) + ")");
        }
        std::vector<ObjectId> block;
        std::unordered_set<ObjectId> taken;
        auto add = [&](ObjectId id) {
            if (block.size() < quota && !shared.count(id) && taken.insert(id).second) block.push_back(id);
        };
        for (std::size_t i = 0; i < pool.size() && block.size() < quota; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
            const ObjectId anchor = pool[i];
            add(anchor);
            const auto& nn = neighbors.of(anchor);
            for (std::size_t t = 0; t < nn.size() && t < static_cast<std::size_t>(config.k_neighbors); ++t) add(nn[t]);
        }
        block.insert(block.end(), batch.shared.begin(), batch.shared.end());
        batch.blocks.push_back(std::move(block));
    }
    return batch;
}

// --- Refresh -----------------------------------------------------------------

bool refresh_due(std::int64_t step, std::int64_t period) {
    if (step < 0) throw Error("refresh: step must be >= 0");
    if (period < 1) throw Error("refresh: period must be >= 1");
    return step % period == 0;
}

bool refresh(std::int64_t step, const RefreshConfig& config, const TeacherNet& teacher, const ObjectTable& table,
             const FeatureBank& features, const ScaleGroups& groups, SamplerState& state) {
    if (!refresh_due(step, config.period)) return false;

    std::vector<ObjectId> ids;
    std::vector<std::size_t> refs;
    for (const auto& r : table.records()) {
        ids.push_back(r.object_id);
        refs.push_back(r.feature_ref);
    }
    const Matrix inputs = features.gather(refs);
    const Matrix f_t = teacher.forward(inputs);
    state.neighbors = knn_table(f_t, ids, groups, config.k_neighbors);
    state.neighbors.last_refresh_step = step;

    Matrix heads(inputs.rows(), teacher.config().embed_dim);
    for (int m = 0; m < groups.k; ++m) {
        std::vector<Eigen::Index> rows;
        for (ObjectId id : groups.members[static_cast<std::size_t>(m)])
            rows.push_back(static_cast<Eigen::Index>(table.position(id)));
        Matrix block(static_cast<Eigen::Index>(rows.size()), inputs.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) block.row(static_cast<Eigen::Index>(i)) = inputs.row(rows[i]);
        const Matrix out = teacher.head_forward(block, m);
        for (std::size_t i = 0; i < rows.size(); ++i) heads.row(rows[i]) = out.row(static_cast<Eigen::Index>(i));
    }
    state.centroids = kmeans(heads, config.clusters, config.kmeans_iters,
                             mix_seed(config.seed ^ 0x6b6d65616e73ull, static_cast<std::uint64_t>(step)));
    state.centroids.last_refresh_step = step;
    return true;
}

}  // namespace msgcel
