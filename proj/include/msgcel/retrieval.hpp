#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "msgcel/dataset.hpp"
#include "msgcel/encoder.hpp"
#include "msgcel/types.hpp"

namespace msgcel {

/// Gallery embeddings as float32 rows with a parallel id list.
///
/// File layout: `MSE1`, u32 version, u32 dim, u64 count, count*dim f32 rows,
/// count u64 object ids; all little-endian.
struct EmbeddingStore {
    MatrixF vectors;
    std::vector<ObjectId> ids;

    int dim() const { return static_cast<int>(vectors.cols()); }
    std::size_t count() const { return ids.size(); }

    void validate() const;
    void write(std::ostream& os) const;
    void write(const std::filesystem::path& path) const;
    static EmbeddingStore read(std::istream& is);
    static EmbeddingStore read(const std::filesystem::path& path);

    bool operator==(const EmbeddingStore& o) const { return vectors == o.vectors && ids == o.ids; }
};

enum class HeadMode { h, hl };

struct EmbedOptions {
    HeadMode head = HeadMode::h;
    /// Route every object through this group's head instead of its own.
    std::optional<int> fixed_group;
};

/// Embeds one feature row through the chosen head(s) of `group`.
RowVector embed_features(const StudentNet& net, const RowVector& features, int group, HeadMode head);

/// Every object goes through the head of its scale group (or the fixed
/// group). Rows follow the table's ascending object-id order.
EmbeddingStore embed_all(const StudentNet& net, const ObjectTable& table, const FeatureBank& features,
                         const ScaleGroups& groups, const EmbedOptions& options = {});

struct Hit {
    ObjectId object_id = 0;
    double distance = 0.0;
    ImageId image_id = 0;
    Box bbox;
};

struct RankedResult {
    ObjectId query_id = -1;
    std::vector<Hit> hits;
};

/// Exact Euclidean ranking, ascending distance then ascending object id.
/// `gallery` supplies image ids and boxes for the hits.
RankedResult query(const EmbeddingStore& store, const ObjectTable& gallery, const RowVector& q, std::size_t topk,
                   ObjectId query_id = -1);

struct ImageRank {
    ImageId image_id = 0;
    std::size_t best_rank = 0;  // 0-based index of the image's best hit
    double distance = 0.0;
    ObjectId best_object = 0;
};

/// Images ordered by their best hit; each image once.
std::vector<ImageRank> rank_images(const RankedResult& result);

}  // namespace msgcel
