#pragma once

#include <cstdint>
#include <vector>

#include "msgcel/config.hpp"
#include "msgcel/dataset.hpp"
#include "msgcel/encoder.hpp"
#include "msgcel/metrics.hpp"
#include "msgcel/retrieval.hpp"

namespace msgcel {

struct QuerySplit {
    ObjectTable queries;
    ObjectTable gallery;
};

/// A seeded sample of up to `max_queries` labelled objects becomes the query
/// set; every other object stays in the gallery.
QuerySplit select_queries(const ObjectTable& heldout, int max_queries, std::uint64_t seed);

struct Evaluation {
    EmbeddingStore gallery_store;
    std::vector<RankedResult> results;
    GroundTruth truth;
    std::vector<ScaleRow> rows;
};

/// Embeds gallery and queries through the heads picked by `fitted`, ranks the
/// full gallery for every query and scores it.
Evaluation evaluate(const StudentNet& net, const ScaleGroups& fitted, const QuerySplit& split,
                    const FeatureBank& features, const DataConfig& data, const EvalConfig& eval);

/// Object-level mAP of the `all` row, or empty when nothing was scorable.
std::optional<double> overall_object_map(const Evaluation& e);

}  // namespace msgcel
