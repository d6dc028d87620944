#include "msgcel/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include <spdlog/spdlog.h>

#include "msgcel/binary_io.hpp"

namespace msgcel {

void EvalConfig::validate() const {
    if (!(iou_object >= 0.0 && iou_object <= 1.0) || !(iou_image >= 0.0 && iou_image <= 1.0)) {
        throw ValidationError("eval: IoU thresholds must lie in [0,1]");
    }
    if (iou_image > iou_object) throw ValidationError("eval: iou_image must not exceed iou_object");
    if (scale_edges.size() < 2) throw ValidationError("eval: need at least two scale edges");
    if (scale_edges.front() != 0.0 || !std::isinf(scale_edges.back())) {
        throw ValidationError("eval: scale bins must cover [0, inf)");
    }
    for (std::size_t i = 1; i < scale_edges.size(); ++i) {
        if (!(scale_edges[i] > scale_edges[i - 1])) throw ValidationError("eval: scale edges must increase");
    }
}

double iou(const Box& a, const Box& b) {
    if (!(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0)) throw Error("iou: degenerate box");
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return inter / uni;
}

bool hit_test(const Hit& hit, ClassId query_class, const GroundTruth& gt, double threshold) {
    auto it = gt.images.find(hit.image_id);
    if (it == gt.images.end()) throw Error("hit_test: image " + std::to_string(hit.image_id) + " missing from ground truth");
    for (const auto& g : it->second) {
        if (g.class_id == query_class && iou(hit.bbox, g.box) >= threshold) return true;
    }
    return false;
}

double level_threshold(const EvalConfig& cfg, Level level) {
    return level == Level::object ? cfg.iou_object : cfg.iou_image;
}

GroundTruth build_ground_truth(const ObjectTable& gallery, const ObjectTable& queries, const EvalConfig& cfg) {
    cfg.validate();
    GroundTruth gt;
    for (const auto& r : gallery.records()) {
        auto& boxes = gt.images[r.image_id];
        if (r.class_id) boxes.push_back({*r.class_id, r.bbox});
    }
    for (const auto& q : queries.records()) {
        if (!q.class_id) throw ValidationError("ground truth: query " + std::to_string(q.object_id) + " has no class id");
        gt.query_class[q.object_id] = *q.class_id;
        std::size_t count = 0;
        for (const auto& g : gallery.records()) {
            if (hit_test(Hit{g.object_id, 0.0, g.image_id, g.bbox}, *q.class_id, gt, cfg.iou_image)) ++count;
        }
        gt.relevant[q.object_id] = count;
    }
    return gt;
}

namespace {

ClassId class_of(const GroundTruth& gt, ObjectId query) {
    auto it = gt.query_class.find(query);
    if (it == gt.query_class.end()) throw Error("metrics: no class id for query " + std::to_string(query));
    return it->second;
}

std::size_t scored_length(const RankedResult& r, const EvalConfig& cfg) {
    return cfg.topk == 0 ? r.hits.size() : std::min(cfg.topk, r.hits.size());
}

}  // namespace

double recall_at_1(std::span<const RankedResult> results, const GroundTruth& gt, const EvalConfig& cfg, Level level) {
    if (results.empty()) throw Error("recall_at_1: no queries");
    const double threshold = level_threshold(cfg, level);
    double hits = 0.0;
    for (const auto& r : results) {
        const ClassId cls = class_of(gt, r.query_id);
        if (!r.hits.empty() && hit_test(r.hits.front(), cls, gt, threshold)) hits += 1.0;
    }
    return hits / static_cast<double>(results.size());
}

std::optional<double> mean_ap(std::span<const RankedResult> results, const GroundTruth& gt, const EvalConfig& cfg,
                              Level level) {
    const double threshold = level_threshold(cfg, level);
    double total = 0.0;
    std::size_t counted = 0;
    for (const auto& r : results) {
        const ClassId cls = class_of(gt, r.query_id);
        auto rel = gt.relevant.find(r.query_id);
        if (rel == gt.relevant.end() || rel->second == 0) {
            spdlog::warn("mean_ap: query {} has no relevant gallery items, excluded", r.query_id);
            continue;
        }
        double ap = 0.0;
        std::size_t found = 0;
        const std::size_t len = scored_length(r, cfg);
        for (std::size_t rank = 0; rank < len; ++rank) {
            if (hit_test(r.hits[rank], cls, gt, threshold)) {
                ++found;
                ap += static_cast<double>(found) / static_cast<double>(rank + 1);
            }
        }
        total += ap / static_cast<double>(rel->second);
        ++counted;
    }
    if (counted == 0) return std::nullopt;
    return total / static_cast<double>(counted);
}

namespace {

std::string edge_label(double v) {
    if (std::isinf(v)) return "inf";
    return io::format_double(v);
}

}  // namespace

std::vector<ScaleRow> scale_report(std::span<const RankedResult> results, const GroundTruth& gt,
                                   const ObjectTable& queries, const EvalConfig& cfg) {
    cfg.validate();
    auto score = [&](std::string label, const std::vector<RankedResult>& subset) {
        ScaleRow row;
        row.label = std::move(label);
        row.n = subset.size();
        if (!subset.empty()) {
            row.o_recall = recall_at_1(subset, gt, cfg, Level::object);
            row.o_map = mean_ap(subset, gt, cfg, Level::object);
            row.i_recall = recall_at_1(subset, gt, cfg, Level::image);
            row.i_map = mean_ap(subset, gt, cfg, Level::image);
        }
        return row;
    };

    std::vector<ScaleRow> rows;
    for (std::size_t b = 0; b + 1 < cfg.scale_edges.size(); ++b) {
        const double lo = cfg.scale_edges[b];
        const double hi = cfg.scale_edges[b + 1];
        std::vector<RankedResult> subset;
        for (const auto& r : results) {
            const double area = queries.at(r.query_id).area;
            if (area >= lo && area < hi) subset.push_back(r);
        }
        rows.push_back(score(edge_label(lo) + "-" + edge_label(hi), subset));
    }
    rows.push_back(score("all", std::vector<RankedResult>(results.begin(), results.end())));
    return rows;
}

void write_report(std::span<const ScaleRow> rows, std::ostream& os) {
    auto pct = [](const std::optional<double>& v) -> std::string {
        if (!v) return "";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * *v);
        return buf;
    };
    os << "bin\tn\tO-R@1\tO-mAP\tI-R@1\tI-mAP\n";
    for (const auto& r : rows) {
        os << r.label << '\t' << r.n << '\t' << pct(r.o_recall) << '\t' << pct(r.o_map) << '\t' << pct(r.i_recall)
           << '\t' << pct(r.i_map) << '\n';
    }
}

}  // namespace msgcel
