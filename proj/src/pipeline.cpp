#include "msgcel/pipeline.hpp"

#include <algorithm>
#include <random>

namespace msgcel {

QuerySplit select_queries(const ObjectTable& heldout, int max_queries, std::uint64_t seed) {
    if (max_queries < 1) throw ValidationError("data.max_queries must be >= 1");
    std::vector<ObjectId> labelled;
    for (const auto& r : heldout.records()) {
        if (r.class_id) labelled.push_back(r.object_id);
    }
    std::mt19937_64 rng(seed);
    std::shuffle(labelled.begin(), labelled.end(), rng);
    labelled.resize(std::min(labelled.size(), static_cast<std::size_t>(max_queries)));
    std::sort(labelled.begin(), labelled.end());
    auto is_query = [&](const ObjectRecord& r) { return std::binary_search(labelled.begin(), labelled.end(), r.object_id); };
    return {heldout.filter(is_query), heldout.filter([&](const ObjectRecord& r) { return !is_query(r); })};
}

Evaluation evaluate(const StudentNet& net, const ScaleGroups& fitted, const QuerySplit& split,
                    const FeatureBank& features, const DataConfig& data, const EvalConfig& eval) {
    eval.validate();
    if (split.gallery.empty()) throw Error("evaluate: empty gallery");
    EmbedOptions opts{data.head, data.fixed_group >= 0 ? std::optional<int>(data.fixed_group) : std::nullopt};

    Evaluation out;
    out.gallery_store = embed_all(net, split.gallery, features, assign_by_boundaries(fitted, split.gallery), opts);
    const EmbeddingStore query_store =
        embed_all(net, split.queries, features, assign_by_boundaries(fitted, split.queries), opts);

    const std::size_t topk = eval.topk == 0 ? split.gallery.size() : eval.topk;
    for (std::size_t i = 0; i < query_store.count(); ++i) {
        const RowVector q = query_store.vectors.row(static_cast<Eigen::Index>(i)).cast<double>();
        out.results.push_back(query(out.gallery_store, split.gallery, q, topk, query_store.ids[i]));
    }
    out.truth = build_ground_truth(split.gallery, split.queries, eval);
    if (!out.results.empty()) out.rows = scale_report(out.results, out.truth, split.queries, eval);
    return out;
}

std::optional<double> overall_object_map(const Evaluation& e) {
    if (e.rows.empty()) return std::nullopt;
    return e.rows.back().o_map;
}

}  // namespace msgcel
