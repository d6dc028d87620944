#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msgcel/types.hpp"

namespace msgcel {

/// One extracted object. `class_id` is evaluation-only; nothing in the
/// training path reads it.
struct ObjectRecord {
    ObjectId object_id = 0;
    ImageId image_id = 0;
    Box bbox;
    double area = 0.0;
    std::optional<ClassId> class_id;
    std::size_t feature_ref = 0;

    bool operator==(const ObjectRecord&) const = default;
};

/// Builds a record with `area` derived from the box.
ObjectRecord make_record(ObjectId object_id, ImageId image_id, const Box& bbox,
                         std::optional<ClassId> class_id, std::size_t feature_ref);

/// Records kept in ascending object_id order with an image -> objects index.
class ObjectTable {
public:
    ObjectTable() = default;
    /// Sorts by object_id and validates boxes and id uniqueness.
    explicit ObjectTable(std::vector<ObjectRecord> records);

    const std::vector<ObjectRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    bool contains(ObjectId id) const { return position_.count(id) != 0; }
    const ObjectRecord& at(ObjectId id) const;
    std::size_t position(ObjectId id) const;

    const std::map<ImageId, std::vector<ObjectId>>& images() const { return images_; }

    template <typename Pred>
    ObjectTable filter(Pred&& keep) const {
        std::vector<ObjectRecord> out;
        for (const auto& r : records_) {
            if (keep(r)) out.push_back(r);
        }
        return ObjectTable(std::move(out));
    }

    bool operator==(const ObjectTable& other) const { return records_ == other.records_; }

private:
    std::vector<ObjectRecord> records_;
    std::unordered_map<ObjectId, std::size_t> position_;
    std::map<ImageId, std::vector<ObjectId>> images_;
};

// --- COCO / manifest I/O -----------------------------------------------------

/// Minimal COCO subset: images[].id, annotations[].{id, image_id, bbox, category_id}.
/// feature_ref is the record's position in ascending annotation-id order.
ObjectTable ingest_coco_text(const std::string& document);
ObjectTable ingest_coco(const std::filesystem::path& annotation_file);

/// Emits a COCO document that ingest_coco reads back to an identical table.
std::string to_coco_json(const ObjectTable& table);

/// `object_id \t image_id \t x \t y \t w \t h \t class_id` per line, LF endings.
/// A missing class id is written as an empty field.
void write_manifest(const ObjectTable& table, std::ostream& os);
void write_manifest(const ObjectTable& table, const std::filesystem::path& path);
ObjectTable read_manifest(std::istream& is);
ObjectTable read_manifest(const std::filesystem::path& path);

// --- Scale groups ------------------------------------------------------------

/// Equal-count area quantiles. Group m holds the m-th contiguous run of the
/// (area, object_id)-sorted table.
struct ScaleGroups {
    int k = 0;
    /// k+1 run-edge areas: first area of each run, then the largest area.
    std::vector<double> boundaries;
    /// Members of each group in (area, object_id) order.
    std::vector<std::vector<ObjectId>> members;
    std::unordered_map<ObjectId, int> assignment;

    int group_of(ObjectId id) const;
    /// Group whose area range contains `area`; clamps to the outer groups.
    int group_for_area(double area) const;
    /// Median member area, used as the group's canonical rendering scale.
    double canonical_area(int m, const ObjectTable& table) const;
};

ScaleGroups partition_by_scale(const ObjectTable& table, int k);

/// Routes every object of `table` through the boundaries of an existing
/// partition (used for objects that were not part of the fitted table).
ScaleGroups assign_by_boundaries(const ScaleGroups& fitted, const ObjectTable& table);

// --- Features ----------------------------------------------------------------

/// Feature rows indexed by ObjectRecord::feature_ref. When `base` is present
/// the bank can re-render an object at another scale: base + N(0, gain/sqrt(area)).
struct FeatureBank {
    Matrix observed;
    Matrix base;
    double noise_gain = 0.0;

    int dim() const { return static_cast<int>(observed.cols()); }
    std::size_t count() const { return static_cast<std::size_t>(observed.rows()); }
    bool renderable() const { return base.rows() > 0; }

    /// Gathers observed rows for the given records.
    Matrix gather(std::span<const std::size_t> refs) const;
    RowVector render(std::size_t ref, double area, std::mt19937_64& rng) const;

    bool operator==(const FeatureBank& o) const {
        return observed == o.observed && base == o.base && noise_gain == o.noise_gain;
    }
};

/// Binary layout: `MSF1`, u32 version, u32 dim, u64 count, count*dim f64
/// observed rows, u8 renderable, then (f64 gain, count*dim f64 base rows) if set.
void write_features(const FeatureBank& bank, const std::filesystem::path& path);
FeatureBank read_features(const std::filesystem::path& path);

// --- Synthetic long-tailed corpus --------------------------------------------

struct SynthConfig {
    int n_classes = 40;
    int n_objects = 3000;
    double zipf_exponent = 1.0;
    double area_log_mean = 6.8;  // ln(30^2)
    double area_log_sd = 1.1;
    int feature_dim = 32;
    double class_mean_sd = 1.0;
    double intra_class_sd = 0.35;
    double scale_noise_gain = 30.0;
    int objects_per_image = 4;
    double image_size = 640.0;
    std::uint64_t seed = 1;

    void validate() const;
};

struct SynthCorpus {
    ObjectTable table;
    FeatureBank features;
};

/// Pure function of the config (including its seed).
SynthCorpus synth_generate(const SynthConfig& config);

/// Zipf class weights 1/(i+1)^s normalized to sum 1.
std::vector<double> zipf_weights(int n_classes, double exponent);

/// Splits by image: a seeded `fraction` of images goes to the second table.
std::pair<ObjectTable, ObjectTable> split_by_image(const ObjectTable& table, double fraction,
                                                   std::uint64_t seed);

}  // namespace msgcel
