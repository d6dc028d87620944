#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "msgcel/binary_io.hpp"
#include "msgcel/checkpoint.hpp"
#include "msgcel/config.hpp"
#include "msgcel/dataset.hpp"
#include "msgcel/metrics.hpp"
#include "msgcel/pipeline.hpp"
#include "msgcel/retrieval.hpp"
#include "msgcel/trainer.hpp"

namespace fs = std::filesystem;
using namespace msgcel;

namespace {

constexpr const char* kManifest = "objects.tsv";
constexpr const char* kFeatures = "features.msf";

struct CommonOptions {
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> steps;
};

AppConfig effective_config(const CommonOptions& o) {
    AppConfig c = o.config_file.empty() ? AppConfig{} : load_config_file(o.config_file);
    for (const auto& s : o.overrides) apply_override(c, s);
    if (o.seed) {
        c.synth.seed = *o.seed;
        c.model.seed = *o.seed;
        c.train.seed = *o.seed;
    }
    if (o.steps) c.train.steps = *o.steps;
    sync_derived(c);
    return c;
}

void echo(const std::string& text) { std::cerr << "# effective config\n" << text << std::flush; }

void require_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error("output directory does not exist: " + dir.string());
}

struct Dataset {
    ObjectTable table;
    FeatureBank features;
};

Dataset load_data(const fs::path& dir) {
    Dataset d{read_manifest(dir / kManifest), read_features(dir / kFeatures)};
    for (const auto& r : d.table.records()) {
        if (r.feature_ref >= d.features.count()) {
            throw ValidationError("object " + std::to_string(r.object_id) + " refers to feature row " +
                                  std::to_string(r.feature_ref) + " beyond " + (dir / kFeatures).string());
        }
    }
    return d;
}

/// (train, heldout) by image.
std::pair<ObjectTable, ObjectTable> data_split(const ObjectTable& table, const DataConfig& d) {
    return split_by_image(table, d.holdout_fraction, d.split_seed);
}

EmbedOptions embed_options(const DataConfig& d) {
    return {d.head, d.fixed_group >= 0 ? std::optional<int>(d.fixed_group) : std::nullopt};
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("failed writing " + path.string());
}

// --- rankings ----------------------------------------------------------------

/// `query_id \t rank \t object_id \t distance`, rank 1-based.
std::string format_rankings(const std::vector<RankedResult>& results) {
    std::ostringstream os;
    for (const auto& r : results) {
        for (std::size_t i = 0; i < r.hits.size(); ++i) {
            os << r.query_id << '\t' << i + 1 << '\t' << r.hits[i].object_id << '\t'
               << io::format_double(r.hits[i].distance) << '\n';
        }
    }
    return os.str();
}

std::vector<RankedResult> read_rankings(const fs::path& path, const ObjectTable& gallery) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open rankings " + path.string());
    std::map<ObjectId, std::map<long long, Hit>> by_query;
    std::vector<ObjectId> order;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        ObjectId q = 0;
        long long rank = 0;
        ObjectId obj = 0;
        double dist = 0.0;
        if (!(ls >> q >> rank >> obj >> dist) || rank < 1) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed ranking line");
        }
        if (!gallery.contains(obj)) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": object " + std::to_string(obj) +
                                  " is not in the gallery");
        }
        if (!by_query.count(q)) order.push_back(q);
        const auto& rec = gallery.at(obj);
        if (!by_query[q].emplace(rank, Hit{obj, dist, rec.image_id, rec.bbox}).second) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": duplicate rank");
        }
    }
    std::vector<RankedResult> out;
    for (ObjectId q : order) {
        RankedResult r;
        r.query_id = q;
        for (const auto& [rank, hit] : by_query[q]) r.hits.push_back(hit);
        out.push_back(std::move(r));
    }
    return out;
}

std::string report_text(const std::vector<ScaleRow>& rows) {
    std::ostringstream os;
    write_report(rows, os);
    return os.str();
}

Box parse_bbox(const std::string& text) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ValidationError("--query-bbox expects x,y,w,h, got '" + text + "'");
        }
    }
    if (v.size() != 4 || !(v[2] > 0.0) || !(v[3] > 0.0)) {
        throw ValidationError("--query-bbox expects x,y,w,h with positive w and h, got '" + text + "'");
    }
    return {v[0], v[1], v[2], v[3]};
}

// --- commands ----------------------------------------------------------------

void cmd_synth(const CommonOptions& common, const fs::path& out) {
    const auto cfg = effective_config(common);
    echo(canonical_text(cfg, {"synth"}));
    require_dir(out);
    const auto corpus = synth_generate(cfg.synth);
    write_manifest(corpus.table, out / kManifest);
    write_features(corpus.features, out / kFeatures);
    spdlog::info("wrote {} objects to {}", corpus.table.size(), out.string());
}

void cmd_ingest(const fs::path& coco, const std::string& features, const fs::path& out) {
    require_dir(out);
    const auto table = ingest_coco(coco);
    if (!features.empty()) {
        const auto bank = read_features(features);
        if (bank.count() < table.size()) {
            throw ValidationError(features + " holds " + std::to_string(bank.count()) + " feature rows for " +
                                  std::to_string(table.size()) + " annotations");
        }
        write_features(bank, out / kFeatures);
    }
    write_manifest(table, out / kManifest);
    spdlog::info("ingested {} objects from {}", table.size(), coco.string());
}

void cmd_train(const CommonOptions& common, const fs::path& data_dir, const fs::path& out, const std::string& resume,
               std::optional<std::int64_t> stop_at) {
    auto cfg = effective_config(common);
    require_dir(out);
    const auto data = load_data(data_dir);
    const auto [train_table, heldout] = data_split(data.table, cfg.data);

    TrainOptions opt;
    opt.stop_at = stop_at;
    opt.abort_checkpoint = out / "abort.ckpt";
    if (!resume.empty()) {
        opt.resume_from = CheckpointFile::read(fs::path(resume));
        echo(opt.resume_from->config_text);
    } else {
        cfg.model.feature_dim = data.features.dim();
        echo(canonical_text(cfg));
    }
    spdlog::info("training on {} objects ({} held out)", train_table.size(), heldout.size());
    const auto result = train(cfg.model, cfg.train, train_table, data.features, opt);
    result.checkpoint.write(out / "model.ckpt");

    const fs::path log_path = out / "loss.tsv";
    std::ofstream log(log_path, resume.empty() ? std::ios::binary | std::ios::trunc : std::ios::binary | std::ios::app);
    if (!log) throw Error("cannot write " + log_path.string());
    write_loss_log(result.log, log);
    if (!result.log.empty()) {
        spdlog::info("step {} total loss {}", result.log.back().step, io::format_double(result.log.back().terms.total));
    }
}

/// Objects of the chosen split: `gallery` is the held-out set minus the query sample.
ObjectTable pick_split(const std::string& split, const ObjectTable& table, const AppConfig& cfg) {
    if (split == "all") return table;
    const auto [train_table, heldout] = data_split(table, cfg.data);
    if (split == "train") return train_table;
    if (split == "heldout") return heldout;
    if (split == "gallery") return select_queries(heldout, cfg.data.max_queries, cfg.data.query_seed).gallery;
    if (split == "queries") return select_queries(heldout, cfg.data.max_queries, cfg.data.query_seed).queries;
    throw ValidationError("unknown split '" + split + "'");
}

void cmd_embed(const CommonOptions& common, const fs::path& ckpt, const fs::path& data_dir, const std::string& split,
               const fs::path& out) {
    const auto cfg = effective_config(common);
    echo(canonical_text(cfg, {"data"}));
    const auto model = load_trained_model(CheckpointFile::read(ckpt));
    const auto data = load_data(data_dir);
    const auto table = pick_split(split, data.table, cfg);
    const auto store =
        embed_all(*model.student, table, data.features, assign_by_boundaries(model.groups, table), embed_options(cfg.data));
    store.write(out);
    spdlog::info("embedded {} objects into {}", store.count(), out.string());
}

struct QueryArgs {
    fs::path checkpoint;
    fs::path data;
    fs::path store;
    std::optional<ObjectId> object;
    std::optional<ImageId> image;
    std::string bbox;
    std::size_t topk = 10;
};

void cmd_query(const CommonOptions& common, const QueryArgs& a) {
    const auto cfg = effective_config(common);
    echo(canonical_text(cfg, {"data"}));
    const auto model = load_trained_model(CheckpointFile::read(a.checkpoint));
    const auto data = load_data(a.data);
    const auto store = EmbeddingStore::read(a.store);

    const ObjectRecord* source = nullptr;
    Box box;
    if (a.object) {
        source = &data.table.at(*a.object);
        box = source->bbox;
    } else {
        box = parse_bbox(a.bbox);
        auto it = data.table.images().find(*a.image);
        if (it == data.table.images().end()) throw ValidationError("image " + std::to_string(*a.image) + " has no objects");
        double best = 0.0;
        for (ObjectId id : it->second) {
            const auto& r = data.table.at(id);
            const double overlap = iou(box, r.bbox);
            if (overlap > best) {
                best = overlap;
                source = &r;
            }
        }
        if (!source) throw ValidationError("--query-bbox overlaps no object of image " + std::to_string(*a.image));
    }
    const int group = cfg.data.fixed_group >= 0 ? cfg.data.fixed_group : model.groups.group_for_area(box.area());
    const RowVector features = data.features.observed.row(static_cast<Eigen::Index>(source->feature_ref));
    const RowVector q = embed_features(*model.student, features, group, cfg.data.head);
    ObjectTable gallery = data.table.filter([&](const ObjectRecord& r) {
        return std::find(store.ids.begin(), store.ids.end(), r.object_id) != store.ids.end();
    });
    const auto result = query(store, gallery, q, a.topk, source->object_id);

    std::cout << "rank\tobject_id\tdistance\timage_id\tx\ty\tw\th\n";
    for (std::size_t i = 0; i < result.hits.size(); ++i) {
        const auto& h = result.hits[i];
        std::cout << i + 1 << '\t' << h.object_id << '\t' << io::format_double(h.distance) << '\t' << h.image_id << '\t'
                  << io::format_double(h.bbox.x) << '\t' << io::format_double(h.bbox.y) << '\t'
                  << io::format_double(h.bbox.w) << '\t' << io::format_double(h.bbox.h) << '\n';
    }
}

void cmd_eval(const CommonOptions& common, const fs::path& ckpt, const fs::path& data_dir, const std::string& report,
              const std::string& rankings, const std::string& store) {
    const auto cfg = effective_config(common);
    echo(canonical_text(cfg, {"eval", "data"}));
    const auto model = load_trained_model(CheckpointFile::read(ckpt));
    const auto data = load_data(data_dir);
    const auto [train_table, heldout] = data_split(data.table, cfg.data);
    const auto split = select_queries(heldout, cfg.data.max_queries, cfg.data.query_seed);
    if (split.queries.empty()) throw ValidationError("no labelled held-out objects to query with");
    if (split.gallery.empty()) {
        throw ValidationError("all " + std::to_string(heldout.size()) +
                              " held-out objects became queries; lower data.max_queries");
    }
    const auto e = evaluate(*model.student, model.groups, split, data.features, cfg.data, cfg.eval);
    const auto text = report_text(e.rows);
    if (!report.empty()) write_text(report, text);
    if (!rankings.empty()) write_text(rankings, format_rankings(e.results));
    if (!store.empty()) e.gallery_store.write(fs::path(store));
    std::cout << text;
}

void cmd_report(const CommonOptions& common, const fs::path& gallery_path, const fs::path& queries_path,
                const fs::path& rankings, const std::string& out) {
    const auto cfg = effective_config(common);
    echo(canonical_text(cfg, {"eval"}));
    const auto gallery = read_manifest(gallery_path);
    const auto queries = read_manifest(queries_path);
    auto results = read_rankings(rankings, gallery);
    if (results.empty()) throw ValidationError(rankings.string() + " holds no rankings");
    for (const auto& r : results) {
        if (!queries.contains(r.query_id)) {
            throw ValidationError("ranked query " + std::to_string(r.query_id) + " is not in " + queries_path.string());
        }
    }
    const auto gt = build_ground_truth(gallery, queries, cfg.eval);
    if (cfg.eval.topk) {
        for (auto& r : results) r.hits.resize(std::min(r.hits.size(), cfg.eval.topk));
    }
    const auto text = report_text(scale_report(results, gt, queries, cfg.eval));
    if (!out.empty()) write_text(out, text);
    std::cout << text;
}

void add_common(CLI::App* cmd, CommonOptions& o, bool with_steps) {
    cmd->add_option("--config", o.config_file, "INI config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", o.overrides, "section.key=value override (repeatable)");
    cmd->add_option("--seed", o.seed, "Seed for synth, model and train");
    if (with_steps) cmd->add_option("--steps", o.steps, "Training steps")->check(CLI::NonNegativeNumber);
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_st("msgcel"));
    spdlog::set_pattern("[%l] %v");

    CLI::App app{"Multi-scale group collaborative embedding learning for object retrieval"};
    app.require_subcommand(1);
    CommonOptions common;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic long-tailed corpus");
    std::string synth_out;
    add_common(synth, common, false);
    synth->add_option("--out", synth_out, "Existing output directory")->required();

    auto* ingest = app.add_subcommand("ingest", "Convert COCO annotations into a manifest");
    std::string coco;
    std::string ingest_features;
    std::string ingest_out;
    ingest->add_option("--coco", coco, "COCO annotation JSON")->required();
    ingest->add_option("--features", ingest_features, "Feature file, one row per annotation in id order");
    ingest->add_option("--out", ingest_out, "Existing output directory")->required();

    auto* trainc = app.add_subcommand("train", "Train the student and teacher networks");
    std::string train_data;
    std::string train_out;
    std::string resume;
    std::optional<std::int64_t> stop_at;
    add_common(trainc, common, true);
    trainc->add_option("--data", train_data, "Data directory")->required()->check(CLI::ExistingDirectory);
    trainc->add_option("--out", train_out, "Existing output directory")->required();
    trainc->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
    trainc->add_option("--stop-at", stop_at, "Stop at this step")->check(CLI::NonNegativeNumber);

    auto* embed = app.add_subcommand("embed", "Write an embedding store");
    std::string embed_ckpt;
    std::string embed_data;
    std::string embed_out;
    std::string split = "gallery";
    add_common(embed, common, false);
    embed->add_option("--checkpoint", embed_ckpt)->required()->check(CLI::ExistingFile);
    embed->add_option("--data", embed_data)->required()->check(CLI::ExistingDirectory);
    embed->add_option("--split", split, "all, train, heldout, gallery or queries")
        ->check(CLI::IsMember({"all", "train", "heldout", "gallery", "queries"}));
    embed->add_option("--out", embed_out, "Store file")->required();

    auto* queryc = app.add_subcommand("query", "Rank a store against one query object");
    QueryArgs qa;
    add_common(queryc, common, false);
    queryc->add_option("--checkpoint", qa.checkpoint)->required()->check(CLI::ExistingFile);
    queryc->add_option("--data", qa.data)->required()->check(CLI::ExistingDirectory);
    queryc->add_option("--store", qa.store)->required()->check(CLI::ExistingFile);
    auto* by_object = queryc->add_option("--query-object", qa.object, "Query by object id");
    auto* by_image = queryc->add_option("--query-image", qa.image, "Image holding the query box");
    auto* by_box = queryc->add_option("--query-bbox", qa.bbox, "Query box x,y,w,h");
    by_image->needs(by_box);
    by_box->needs(by_image);
    by_object->excludes(by_image);
    queryc->add_option("--topk", qa.topk, "Hits to return")->check(CLI::PositiveNumber);

    auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
    std::string eval_ckpt;
    std::string eval_data;
    std::string eval_report;
    std::string eval_rankings;
    std::string eval_store;
    add_common(evalc, common, false);
    evalc->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
    evalc->add_option("--data", eval_data)->required()->check(CLI::ExistingDirectory);
    evalc->add_option("--report", eval_report, "Report file");
    evalc->add_option("--rankings", eval_rankings, "Rankings file");
    evalc->add_option("--store", eval_store, "Gallery store file");

    auto* reportc = app.add_subcommand("report", "Score saved rankings");
    std::string rep_gallery;
    std::string rep_queries;
    std::string rep_rankings;
    std::string rep_out;
    add_common(reportc, common, false);
    reportc->add_option("--gallery", rep_gallery, "Gallery manifest")->required()->check(CLI::ExistingFile);
    reportc->add_option("--queries", rep_queries, "Query manifest")->required()->check(CLI::ExistingFile);
    reportc->add_option("--rankings", rep_rankings, "Rankings file")->required()->check(CLI::ExistingFile);
    reportc->add_option("--out", rep_out, "Report file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (queryc->parsed() && !qa.object && !qa.image) {
        std::cerr << "query: give --query-object or --query-image with --query-bbox\n";
        return 2;
    }

    try {
        if (synth->parsed()) cmd_synth(common, synth_out);
        else if (ingest->parsed()) cmd_ingest(coco, ingest_features, ingest_out);
        else if (trainc->parsed()) cmd_train(common, train_data, train_out, resume, stop_at);
        else if (embed->parsed()) cmd_embed(common, embed_ckpt, embed_data, split, embed_out);
        else if (queryc->parsed()) cmd_query(common, qa);
        else if (evalc->parsed()) cmd_eval(common, eval_ckpt, eval_data, eval_report, eval_rankings, eval_store);
        else if (reportc->parsed()) cmd_report(common, rep_gallery, rep_queries, rep_rankings, rep_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
