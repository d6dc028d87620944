#include "msgcel/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "msgcel/binary_io.hpp"

namespace msgcel {

using nlohmann::json;

ObjectRecord make_record(ObjectId object_id, ImageId image_id, const Box& bbox,
                         std::optional<ClassId> class_id, std::size_t feature_ref) {
    ObjectRecord r;
    r.object_id = object_id;
    r.image_id = image_id;
    r.bbox = bbox;
    r.area = bbox.w * bbox.h;
    r.class_id = class_id;
    r.feature_ref = feature_ref;
    return r;
}

ObjectTable::ObjectTable(std::vector<ObjectRecord> records) : records_(std::move(records)) {
    std::sort(records_.begin(), records_.end(),
              [](const ObjectRecord& a, const ObjectRecord& b) { return a.object_id < b.object_id; });
    position_.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const auto& r = records_[i];
        if (!(r.bbox.w > 0.0) || !(r.bbox.h > 0.0)) {
            throw ValidationError("object " + std::to_string(r.object_id) + ": bbox width and height must be > 0");
        }
        if (r.area != r.bbox.w * r.bbox.h) {
            throw ValidationError("object " + std::to_string(r.object_id) + ": area does not equal w*h");
        }
        if (i > 0 && records_[i - 1].object_id == r.object_id) {
            throw ValidationError("duplicate object id " + std::to_string(r.object_id));
        }
        position_.emplace(r.object_id, i);
        images_[r.image_id].push_back(r.object_id);
    }
}

const ObjectRecord& ObjectTable::at(ObjectId id) const { return records_[position(id)]; }

std::size_t ObjectTable::position(ObjectId id) const {
    auto it = position_.find(id);
    if (it == position_.end()) {
        throw Error("unknown object id " + std::to_string(id));
    }
    return it->second;
}

// --- COCO --------------------------------------------------------------------

namespace {

std::string entry_name(const char* array, std::size_t i) {
    return std::string(array) + "[" + std::to_string(i) + "]";
}

std::int64_t require_int(const json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_number_integer()) {
        throw ParseError(where + ": missing or non-integer '" + key + "'");
    }
    return it->get<std::int64_t>();
}

}  // namespace

ObjectTable ingest_coco_text(const std::string& document) {
    json doc;
    try {
        doc = json::parse(document);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("annotation document: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("images") || !doc["images"].is_array() ||
        !doc.contains("annotations") || !doc["annotations"].is_array()) {
        throw ParseError("annotation document: expected 'images' and 'annotations' arrays");
    }

    std::unordered_map<ImageId, bool> known_images;
    const auto& images = doc["images"];
    for (std::size_t i = 0; i < images.size(); ++i) {
        known_images[require_int(images[i], "id", entry_name("images", i))] = true;
    }

    struct Pending {
        ObjectId id;
        ImageId image;
        Box box;
        std::optional<ClassId> cls;
    };
    std::vector<Pending> pending;
    std::vector<ObjectId> invalid;
    const auto& anns = doc["annotations"];
    for (std::size_t i = 0; i < anns.size(); ++i) {
        const auto where = entry_name("annotations", i);
        const auto& a = anns[i];
        if (!a.is_object()) throw ParseError(where + ": not an object");
        Pending p;
        p.id = require_int(a, "id", where);
        p.image = require_int(a, "image_id", where);
        if (!known_images.count(p.image)) {
            throw ParseError(where + ": image_id " + std::to_string(p.image) + " not listed in images");
        }
        auto bb = a.find("bbox");
        if (bb == a.end() || !bb->is_array() || bb->size() != 4) {
            throw ParseError(where + ": bbox must be [x, y, w, h]");
        }
        for (const auto& v : *bb) {
            if (!v.is_number()) throw ParseError(where + ": bbox entries must be numbers");
        }
        p.box = {(*bb)[0].get<double>(), (*bb)[1].get<double>(), (*bb)[2].get<double>(), (*bb)[3].get<double>()};
        if (a.contains("category_id")) {
            p.cls = require_int(a, "category_id", where);
        }
        if (!(p.box.w > 0.0) || !(p.box.h > 0.0)) invalid.push_back(p.id);
        pending.push_back(p);
    }
    if (!invalid.empty()) {
        std::string ids;
        for (auto id : invalid) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
        throw ValidationError("bbox with non-positive width or height in annotation(s): " + ids);
    }

    std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) { return a.id < b.id; });
    std::vector<ObjectRecord> records;
    records.reserve(pending.size());
    for (std::size_t i = 0; i < pending.size(); ++i) {
        const auto& p = pending[i];
        records.push_back(make_record(p.id, p.image, p.box, p.cls, i));
    }
    return ObjectTable(std::move(records));
}

ObjectTable ingest_coco(const std::filesystem::path& annotation_file) {
    std::ifstream in(annotation_file);
    if (!in) throw Error("cannot open annotation file " + annotation_file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ingest_coco_text(ss.str());
}

std::string to_coco_json(const ObjectTable& table) {
    json doc;
    doc["images"] = json::array();
    for (const auto& [image, ids] : table.images()) {
        doc["images"].push_back({{"id", image}});
    }
    doc["annotations"] = json::array();
    for (const auto& r : table.records()) {
        json a = {{"id", r.object_id},
                  {"image_id", r.image_id},
                  {"bbox", {r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h}}};
        if (r.class_id) a["category_id"] = *r.class_id;
        doc["annotations"].push_back(std::move(a));
    }
    return doc.dump();
}

// --- Manifest ----------------------------------------------------------------

void write_manifest(const ObjectTable& table, std::ostream& os) {
    using io::format_double;
    for (const auto& r : table.records()) {
        os << r.object_id << '\t' << r.image_id << '\t' << format_double(r.bbox.x) << '\t'
           << format_double(r.bbox.y) << '\t' << format_double(r.bbox.w) << '\t' << format_double(r.bbox.h)
           << '\t';
        if (r.class_id) os << *r.class_id;
        os << '\n';
    }
}

void write_manifest(const ObjectTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write manifest " + path.string());
    write_manifest(table, out);
    if (!out) throw Error("failed writing manifest " + path.string());
}

namespace {

template <typename T>
T parse_field(std::string_view field, std::size_t line_no, const char* name) {
    T value{};
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc{} || ptr != field.data() + field.size()) {
        throw ParseError("manifest line " + std::to_string(line_no) + ": bad " + name + " '" +
                         std::string(field) + "'");
    }
    return value;
}

}  // namespace

ObjectTable read_manifest(std::istream& is) {
    std::vector<ObjectRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string_view> fields;
        std::string_view rest(line);
        while (true) {
            auto tab = rest.find('\t');
            fields.push_back(rest.substr(0, tab));
            if (tab == std::string_view::npos) break;
            rest.remove_prefix(tab + 1);
        }
        if (fields.size() != 7) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": expected 7 fields, got " +
                             std::to_string(fields.size()));
        }
        const auto id = parse_field<ObjectId>(fields[0], line_no, "object_id");
        const auto image = parse_field<ImageId>(fields[1], line_no, "image_id");
        const Box box{parse_field<double>(fields[2], line_no, "x"), parse_field<double>(fields[3], line_no, "y"),
                      parse_field<double>(fields[4], line_no, "w"), parse_field<double>(fields[5], line_no, "h")};
        std::optional<ClassId> cls;
        if (!fields[6].empty()) cls = parse_field<ClassId>(fields[6], line_no, "class_id");
        records.push_back(make_record(id, image, box, cls, 0));
    }
    std::sort(records.begin(), records.end(),
              [](const ObjectRecord& a, const ObjectRecord& b) { return a.object_id < b.object_id; });
    for (std::size_t i = 0; i < records.size(); ++i) records[i].feature_ref = i;
    return ObjectTable(std::move(records));
}

ObjectTable read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open manifest " + path.string());
    return read_manifest(in);
}

// --- Scale groups ------------------------------------------------------------

int ScaleGroups::group_of(ObjectId id) const {
    auto it = assignment.find(id);
    if (it == assignment.end()) {
        throw Error("object " + std::to_string(id) + " has no scale group");
    }
    return it->second;
}

int ScaleGroups::group_for_area(double area) const {
    if (k <= 0) throw Error("group_for_area: empty partition");
    // Last group m in [0, k) whose lower edge is <= area.
    auto first = boundaries.begin();
    auto last = boundaries.begin() + k;
    auto it = std::upper_bound(first, last, area);
    if (it == first) return 0;
    return static_cast<int>(std::distance(first, it)) - 1;
}

double ScaleGroups::canonical_area(int m, const ObjectTable& table) const {
    const auto& ids = members.at(static_cast<std::size_t>(m));
    if (ids.empty()) throw Error("canonical_area: empty group " + std::to_string(m));
    const std::size_t n = ids.size();
    const double lo = table.at(ids[(n - 1) / 2]).area;
    const double hi = table.at(ids[n / 2]).area;
    return 0.5 * (lo + hi);
}

ScaleGroups partition_by_scale(const ObjectTable& table, int k) {
    if (k <= 0) throw Error("partition_by_scale: k must be >= 1");
    if (table.empty()) throw Error("partition_by_scale: empty table");
    if (static_cast<std::size_t>(k) > table.size()) {
        throw Error("partition_by_scale: k=" + std::to_string(k) + " exceeds table size " +
                    std::to_string(table.size()));
    }
    std::vector<const ObjectRecord*> sorted;
    sorted.reserve(table.size());
    for (const auto& r : table.records()) sorted.push_back(&r);
    std::stable_sort(sorted.begin(), sorted.end(), [](const ObjectRecord* a, const ObjectRecord* b) {
        if (a->area != b->area) return a->area < b->area;
        return a->object_id < b->object_id;
    });

    ScaleGroups g;
    g.k = k;
    g.members.resize(static_cast<std::size_t>(k));
    const std::size_t n = sorted.size();
    for (int m = 0; m < k; ++m) {
        const std::size_t begin = n * static_cast<std::size_t>(m) / static_cast<std::size_t>(k);
        const std::size_t end = n * static_cast<std::size_t>(m + 1) / static_cast<std::size_t>(k);
        g.boundaries.push_back(sorted[begin]->area);
        for (std::size_t i = begin; i < end; ++i) {
            g.members[static_cast<std::size_t>(m)].push_back(sorted[i]->object_id);
            g.assignment.emplace(sorted[i]->object_id, m);
        }
    }
    g.boundaries.push_back(sorted.back()->area);
    return g;
}

ScaleGroups assign_by_boundaries(const ScaleGroups& fitted, const ObjectTable& table) {
    ScaleGroups g;
    g.k = fitted.k;
    g.boundaries = fitted.boundaries;
    g.members.resize(static_cast<std::size_t>(g.k));
    std::vector<const ObjectRecord*> sorted;
    for (const auto& r : table.records()) sorted.push_back(&r);
    std::stable_sort(sorted.begin(), sorted.end(), [](const ObjectRecord* a, const ObjectRecord* b) {
        if (a->area != b->area) return a->area < b->area;
        return a->object_id < b->object_id;
    });
    for (const auto* r : sorted) {
        const int m = fitted.group_for_area(r->area);
        g.members[static_cast<std::size_t>(m)].push_back(r->object_id);
        g.assignment.emplace(r->object_id, m);
    }
    return g;
}

// --- Features ----------------------------------------------------------------

Matrix FeatureBank::gather(std::span<const std::size_t> refs) const {
    Matrix out(static_cast<Eigen::Index>(refs.size()), observed.cols());
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (refs[i] >= count()) throw Error("feature_ref " + std::to_string(refs[i]) + " out of range");
        out.row(static_cast<Eigen::Index>(i)) = observed.row(static_cast<Eigen::Index>(refs[i]));
    }
    return out;
}

RowVector FeatureBank::render(std::size_t ref, double area, std::mt19937_64& rng) const {
    if (ref >= count()) throw Error("feature_ref " + std::to_string(ref) + " out of range");
    const auto row = static_cast<Eigen::Index>(ref);
    if (!renderable()) return observed.row(row);
    RowVector out = base.row(row);
    const double sd = noise_gain / std::sqrt(area);
    if (sd > 0.0) {
        std::normal_distribution<double> noise(0.0, sd);
        for (Eigen::Index j = 0; j < out.size(); ++j) out(j) += noise(rng);
    }
    return out;
}

namespace {
constexpr std::uint32_t kFeatureVersion = 1;

void write_rows(std::ostream& os, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) io::write_f64(os, m(i, j));
}

Matrix read_rows(std::istream& is, std::uint64_t rows, std::uint32_t cols) {
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = io::read_f64(is);
    return m;
}
}  // namespace

void write_features(const FeatureBank& bank, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write feature file " + path.string());
    io::write_magic(out, "MSF1");
    io::write_u32(out, kFeatureVersion);
    io::write_u32(out, static_cast<std::uint32_t>(bank.observed.cols()));
    io::write_u64(out, static_cast<std::uint64_t>(bank.observed.rows()));
    write_rows(out, bank.observed);
    out.put(bank.renderable() ? 1 : 0);
    if (bank.renderable()) {
        io::write_f64(out, bank.noise_gain);
        write_rows(out, bank.base);
    }
    if (!out) throw Error("failed writing feature file " + path.string());
}

FeatureBank read_features(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open feature file " + path.string());
    io::expect_magic(in, "MSF1");
    const auto version = io::read_u32(in);
    if (version != kFeatureVersion) throw ParseError("unsupported feature file version " + std::to_string(version));
    const auto dim = io::read_u32(in);
    const auto count = io::read_u64(in);
    FeatureBank bank;
    bank.observed = read_rows(in, count, dim);
    const int flag = in.get();
    if (flag == 1) {
        bank.noise_gain = io::read_f64(in);
        bank.base = read_rows(in, count, dim);
    } else if (flag != 0) {
        throw ParseError("feature file " + path.string() + ": bad renderable flag");
    }
    return bank;
}

// --- Synthetic corpus --------------------------------------------------------

void SynthConfig::validate() const {
    if (n_classes <= 0) throw ValidationError("synth: n_classes must be > 0");
    if (feature_dim <= 0) throw ValidationError("synth: feature_dim must be > 0");
    if (n_objects <= 0) throw ValidationError("synth: n_objects must be > 0");
    if (!(zipf_exponent > 0.0)) throw ValidationError("synth: zipf_exponent must be > 0");
    if (!(area_log_sd >= 0.0)) throw ValidationError("synth: area_log_sd must be >= 0");
    if (!(intra_class_sd >= 0.0) || !(class_mean_sd >= 0.0)) throw ValidationError("synth: sd values must be >= 0");
    if (!(scale_noise_gain >= 0.0)) throw ValidationError("synth: scale_noise_gain must be >= 0");
    if (objects_per_image <= 0) throw ValidationError("synth: objects_per_image must be > 0");
    if (!(image_size > 1.0)) throw ValidationError("synth: image_size must be > 1");
}

std::vector<double> zipf_weights(int n_classes, double exponent) {
    std::vector<double> w(static_cast<std::size_t>(n_classes));
    for (int i = 0; i < n_classes; ++i) w[static_cast<std::size_t>(i)] = 1.0 / std::pow(i + 1.0, exponent);
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& x : w) x /= total;
    return w;
}

SynthCorpus synth_generate(const SynthConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const int dim = config.feature_dim;

    Matrix class_means(config.n_classes, dim);
    std::normal_distribution<double> mean_dist(0.0, config.class_mean_sd);
    for (Eigen::Index i = 0; i < class_means.rows(); ++i)
        for (Eigen::Index j = 0; j < dim; ++j) class_means(i, j) = mean_dist(rng);

    const auto weights = zipf_weights(config.n_classes, config.zipf_exponent);
    std::discrete_distribution<int> class_dist(weights.begin(), weights.end());
    std::normal_distribution<double> log_area(config.area_log_mean, config.area_log_sd);
    std::uniform_real_distribution<double> log_aspect(-0.5, 0.5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> std_normal(0.0, 1.0);

    FeatureBank bank;
    bank.observed.resize(config.n_objects, dim);
    bank.base.resize(config.n_objects, dim);
    bank.noise_gain = config.scale_noise_gain;

    std::vector<ObjectRecord> records;
    records.reserve(static_cast<std::size_t>(config.n_objects));
    const double side_max = config.image_size;
    for (int i = 0; i < config.n_objects; ++i) {
        const int cls = class_dist(rng);
        const double area = std::exp(log_area(rng));
        const double aspect = std::exp(log_aspect(rng));
        const double w = std::clamp(std::sqrt(area * aspect), 1.0, side_max);
        const double h = std::clamp(std::sqrt(area / aspect), 1.0, side_max);
        const Box box{unit(rng) * (side_max - w), unit(rng) * (side_max - h), w, h};
        auto rec = make_record(i, i / config.objects_per_image, box, cls, static_cast<std::size_t>(i));

        const double noise_sd = config.scale_noise_gain / std::sqrt(rec.area);
        for (int j = 0; j < dim; ++j) {
            const double clean = class_means(cls, j) + config.intra_class_sd * std_normal(rng);
            bank.base(i, j) = clean;
            bank.observed(i, j) = clean + noise_sd * std_normal(rng);
        }
        records.push_back(rec);
    }
    return {ObjectTable(std::move(records)), std::move(bank)};
}

std::pair<ObjectTable, ObjectTable> split_by_image(const ObjectTable& table, double fraction,
                                                   std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error("split_by_image: fraction must be in [0,1]");
    std::vector<ImageId> images;
    for (const auto& [image, ids] : table.images()) images.push_back(image);
    std::mt19937_64 rng(seed);
    std::shuffle(images.begin(), images.end(), rng);
    const auto n_held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(images.size())));
    std::unordered_map<ImageId, bool> held;
    for (std::size_t i = 0; i < n_held; ++i) held[images[i]] = true;
    auto first = table.filter([&](const ObjectRecord& r) { return !held.count(r.image_id); });
    auto second = table.filter([&](const ObjectRecord& r) { return held.count(r.image_id) != 0; });
    return {std::move(first), std::move(second)};
}

}  // namespace msgcel
