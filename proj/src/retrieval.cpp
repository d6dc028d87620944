#include "msgcel/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include "msgcel/binary_io.hpp"

namespace msgcel {

namespace {
constexpr std::uint32_t kStoreVersion = 1;
}

void EmbeddingStore::validate() const {
    if (static_cast<std::size_t>(vectors.rows()) != ids.size()) throw Error("embedding store: count mismatch");
    std::unordered_set<ObjectId> seen;
    for (auto id : ids) {
        if (!seen.insert(id).second) throw Error("embedding store: duplicate id " + std::to_string(id));
    }
}

void EmbeddingStore::write(std::ostream& os) const {
    validate();
    io::write_magic(os, "MSE1");
    io::write_u32(os, kStoreVersion);
    io::write_u32(os, static_cast<std::uint32_t>(vectors.cols()));
    io::write_u64(os, static_cast<std::uint64_t>(ids.size()));
    for (Eigen::Index i = 0; i < vectors.rows(); ++i)
        for (Eigen::Index j = 0; j < vectors.cols(); ++j) io::write_f32(os, vectors(i, j));
    for (auto id : ids) io::write_u64(os, static_cast<std::uint64_t>(id));
}

void EmbeddingStore::write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write embedding store " + path.string());
    write(out);
    if (!out) throw Error("failed writing embedding store " + path.string());
}

EmbeddingStore EmbeddingStore::read(std::istream& is) {
    io::expect_magic(is, "MSE1");
    const auto version = io::read_u32(is);
    if (version != kStoreVersion) throw ParseError("unsupported embedding store version " + std::to_string(version));
    const auto dim = io::read_u32(is);
    const auto count = io::read_u64(is);
    EmbeddingStore s;
    s.vectors.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < s.vectors.rows(); ++i)
        for (Eigen::Index j = 0; j < s.vectors.cols(); ++j) s.vectors(i, j) = io::read_f32(is);
    s.ids.resize(count);
    for (auto& id : s.ids) id = static_cast<ObjectId>(io::read_u64(is));
    s.validate();
    return s;
}

EmbeddingStore EmbeddingStore::read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open embedding store " + path.string());
    return read(in);
}

RowVector embed_features(const StudentNet& net, const RowVector& features, int group, HeadMode head) {
    const Matrix x = features;
    auto pass = net.forward(x, group);
    if (head == HeadMode::h) return pass.h.row(0);
    RowVector out(pass.h.cols() + pass.l.cols());
    out << pass.h.row(0), pass.l.row(0);
    return out;
}

EmbeddingStore embed_all(const StudentNet& net, const ObjectTable& table, const FeatureBank& features,
                         const ScaleGroups& groups, const EmbedOptions& options) {
    const int embed = net.config().embed_dim;
    const int dim = options.head == HeadMode::h ? embed : 2 * embed;
    EmbeddingStore store;
    store.vectors.resize(static_cast<Eigen::Index>(table.size()), dim);
    if (table.empty()) return store;

    // Batch rows per head so each group is one forward pass.
    std::vector<std::vector<std::size_t>> by_group(static_cast<std::size_t>(net.config().groups));
    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto& r = table.records()[i];
        const int m = options.fixed_group ? *options.fixed_group : groups.group_of(r.object_id);
        if (m < 0 || m >= net.config().groups) throw Error("embed_all: group " + std::to_string(m) + " out of range");
        by_group[static_cast<std::size_t>(m)].push_back(i);
    }
    for (std::size_t m = 0; m < by_group.size(); ++m) {
        const auto& rows = by_group[m];
        if (rows.empty()) continue;
        std::vector<std::size_t> refs;
        for (auto i : rows) refs.push_back(table.records()[i].feature_ref);
        const auto pass = net.forward(features.gather(refs), static_cast<int>(m));
        for (std::size_t t = 0; t < rows.size(); ++t) {
            const auto row = static_cast<Eigen::Index>(rows[t]);
            const auto src = static_cast<Eigen::Index>(t);
            store.vectors.row(row).head(embed) = pass.h.row(src).cast<float>();
            if (options.head == HeadMode::hl) store.vectors.row(row).tail(embed) = pass.l.row(src).cast<float>();
        }
    }
    for (const auto& r : table.records()) store.ids.push_back(r.object_id);
    return store;
}

RankedResult query(const EmbeddingStore& store, const ObjectTable& gallery, const RowVector& q, std::size_t topk,
                   ObjectId query_id) {
    if (store.count() == 0) throw Error("query: empty store");
    if (topk < 1) throw Error("query: topk must be >= 1");
    if (q.size() != store.vectors.cols()) {
        throw Error("query: dimension mismatch, store has " + std::to_string(store.vectors.cols()) + ", query has " +
                    std::to_string(q.size()));
    }
    const Eigen::RowVectorXd qf = q.cast<float>().cast<double>();
    std::vector<std::pair<double, ObjectId>> scored(store.count());
    for (std::size_t i = 0; i < store.count(); ++i) {
        const double d = (store.vectors.row(static_cast<Eigen::Index>(i)).cast<double>() - qf).norm();
        scored[i] = {d, store.ids[i]};
    }
    const std::size_t take = std::min(topk, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end());

    RankedResult result;
    result.query_id = query_id;
    result.hits.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        const auto& rec = gallery.at(scored[i].second);
        result.hits.push_back({scored[i].second, scored[i].first, rec.image_id, rec.bbox});
    }
    return result;
}

std::vector<ImageRank> rank_images(const RankedResult& result) {
    std::vector<ImageRank> out;
    std::unordered_set<ImageId> seen;
    for (std::size_t i = 0; i < result.hits.size(); ++i) {
        const auto& h = result.hits[i];
        if (seen.insert(h.image_id).second) out.push_back({h.image_id, i, h.distance, h.object_id});
    }
    return out;
}

}  // namespace msgcel
