#pragma once

#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "msgcel/dataset.hpp"
#include "msgcel/retrieval.hpp"

namespace msgcel {

struct EvalConfig {
    double iou_object = 0.3;
    double iou_image = 1e-10;
    /// Truncate rankings to this many hits before scoring; 0 keeps everything.
    std::size_t topk = 0;
    /// Area bin edges; bins are [edge_i, edge_{i+1}).
    std::vector<double> scale_edges = {0.0, 400.0, 900.0, 3600.0, 10000.0, std::numeric_limits<double>::infinity()};

    void validate() const;
};

enum class Level { object, image };

struct GtBox {
    ClassId class_id = 0;
    Box box;
};

struct GroundTruth {
    std::map<ImageId, std::vector<GtBox>> images;
    std::unordered_map<ObjectId, ClassId> query_class;
    /// Gallery objects that pass hit_test for the query at the image-level
    /// threshold; the AP normalizer at both levels.
    std::unordered_map<ObjectId, std::size_t> relevant;
};

/// Gallery boxes become the per-image ground truth; queries must carry class ids.
GroundTruth build_ground_truth(const ObjectTable& gallery, const ObjectTable& queries, const EvalConfig& cfg);

double iou(const Box& a, const Box& b);

/// True iff the hit's image holds a box of `query_class` with IoU >= threshold.
bool hit_test(const Hit& hit, ClassId query_class, const GroundTruth& gt, double threshold);

double level_threshold(const EvalConfig& cfg, Level level);

/// Mean over queries of r_i, where r_i = 1 iff the rank-1 hit passes hit_test.
double recall_at_1(std::span<const RankedResult> results, const GroundTruth& gt, const EvalConfig& cfg, Level level);

/// AP_i = (1/R_i) sum_j j / p_j over the matched ranks p_j; queries with
/// R_i = 0 are skipped with a warning. Empty when no query is scorable.
std::optional<double> mean_ap(std::span<const RankedResult> results, const GroundTruth& gt, const EvalConfig& cfg,
                              Level level);

struct ScaleRow {
    std::string label;
    std::size_t n = 0;
    std::optional<double> o_recall;
    std::optional<double> o_map;
    std::optional<double> i_recall;
    std::optional<double> i_map;
};

/// One row per area bin (queries bucketed by their own area) plus an `all` row.
std::vector<ScaleRow> scale_report(std::span<const RankedResult> results, const GroundTruth& gt,
                                   const ObjectTable& queries, const EvalConfig& cfg);

/// `bin \t n \t O-R@1 \t O-mAP \t I-R@1 \t I-mAP`, percentages with two decimals.
void write_report(std::span<const ScaleRow> rows, std::ostream& os);

}  // namespace msgcel
