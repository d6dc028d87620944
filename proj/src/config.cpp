#include "msgcel/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "msgcel/binary_io.hpp"

namespace msgcel {

namespace {

template <typename T>
T parse_number(const std::string& text, const std::string& name) {
    T value{};
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc{} || ptr != end) throw ValidationError("config: bad value '" + text + "' for " + name);
    return value;
}

template <typename T>
ConfigField number(const char* section, const char* key, T& ref) {
    const std::string name = std::string(section) + "." + key;
    return {section, key,
            [&ref] {
                if constexpr (std::is_floating_point_v<T>) return io::format_double(ref);
                else return std::to_string(ref);
            },
            [&ref, name](const std::string& v) { ref = parse_number<T>(v, name); }};
}

ConfigField boolean(const char* section, const char* key, bool& ref) {
    const std::string name = std::string(section) + "." + key;
    return {section, key, [&ref] { return std::string(ref ? "true" : "false"); },
            [&ref, name](const std::string& v) {
                if (v == "true" || v == "1") ref = true;
                else if (v == "false" || v == "0") ref = false;
                else throw ValidationError("config: bad boolean '" + v + "' for " + name);
            }};
}

std::string join_edges(const std::vector<double>& edges) {
    std::string out;
    for (std::size_t i = 0; i < edges.size(); ++i) {
        if (i) out += ',';
        out += std::isinf(edges[i]) ? std::string("inf") : io::format_double(edges[i]);
    }
    return out;
}

std::vector<double> split_edges(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "inf") out.push_back(std::numeric_limits<double>::infinity());
        else out.push_back(parse_number<double>(item, "eval.scale_edges"));
    }
    return out;
}

}  // namespace

std::vector<ConfigField> config_fields(AppConfig& c) {
    std::vector<ConfigField> f;
    auto& s = c.synth;
    f.push_back(number("synth", "n_classes", s.n_classes));
    f.push_back(number("synth", "n_objects", s.n_objects));
    f.push_back(number("synth", "zipf_exponent", s.zipf_exponent));
    f.push_back(number("synth", "area_log_mean", s.area_log_mean));
    f.push_back(number("synth", "area_log_sd", s.area_log_sd));
    f.push_back(number("synth", "feature_dim", s.feature_dim));
    f.push_back(number("synth", "class_mean_sd", s.class_mean_sd));
    f.push_back(number("synth", "intra_class_sd", s.intra_class_sd));
    f.push_back(number("synth", "scale_noise_gain", s.scale_noise_gain));
    f.push_back(number("synth", "objects_per_image", s.objects_per_image));
    f.push_back(number("synth", "image_size", s.image_size));
    f.push_back(number("synth", "seed", s.seed));

    auto& m = c.model;
    f.push_back(number("model", "feature_dim", m.feature_dim));
    f.push_back(number("model", "hidden_dim", m.hidden_dim));
    f.push_back(number("model", "trunk_layers", m.trunk_layers));
    f.push_back(number("model", "embed_dim", m.embed_dim));
    f.push_back(number("model", "teacher_dim", m.teacher_dim));
    f.push_back({"model", "activation", [&m] { return std::string(m.activation == Activation::relu ? "relu" : "tanh"); },
                 [&m](const std::string& v) {
                     if (v == "relu") m.activation = Activation::relu;
                     else if (v == "tanh") m.activation = Activation::tanh;
                     else throw ValidationError("config: model.activation must be relu or tanh");
                 }});
    f.push_back(number("model", "head_init_scale", m.head_init_scale));
    f.push_back(boolean("model", "shared_head_init", m.shared_head_init));
    f.push_back(boolean("model", "teacher_normalize", m.teacher_normalize));
    f.push_back(number("model", "seed", m.seed));

    auto& t = c.train;
    f.push_back(number("train", "steps", t.steps));
    f.push_back(number("train", "batch", t.batch));
    f.push_back(number("train", "groups", t.groups));
    f.push_back(number("train", "clusters", t.clusters));
    f.push_back(number("train", "knn", t.knn));
    f.push_back(number("train", "n_shared", t.n_shared));
    f.push_back(number("train", "refresh_period", t.refresh_period));
    f.push_back(number("train", "kmeans_iters", t.kmeans_iters));
    f.push_back(number("train", "lr", t.lr));
    f.push_back(number("train", "weight_decay", t.weight_decay));
    f.push_back(number("train", "ema_momentum", t.ema_momentum));
    f.push_back(number("train", "beta1", t.beta1));
    f.push_back(number("train", "beta2", t.beta2));
    f.push_back(number("train", "adam_eps", t.adam_eps));
    f.push_back(number("train", "seed", t.seed));

    auto& l = c.train.loss;
    f.push_back(number("loss", "sigma", l.sigma));
    f.push_back(number("loss", "delta", l.delta));
    f.push_back(number("loss", "tau", l.tau));
    f.push_back(number("loss", "epsilon_floor", l.epsilon_floor));
    f.push_back(boolean("loss", "full_grad", l.full_grad));
    f.push_back(boolean("loss", "use_ckd", l.use_ckd));

    auto& e = c.eval;
    f.push_back(number("eval", "iou_object", e.iou_object));
    f.push_back(number("eval", "iou_image", e.iou_image));
    f.push_back(number("eval", "topk", e.topk));
    f.push_back({"eval", "scale_edges", [&e] { return join_edges(e.scale_edges); },
                 [&e](const std::string& v) { e.scale_edges = split_edges(v); }});

    auto& d = c.data;
    f.push_back(number("data", "holdout_fraction", d.holdout_fraction));
    f.push_back(number("data", "split_seed", d.split_seed));
    f.push_back(number("data", "max_queries", d.max_queries));
    f.push_back(number("data", "query_seed", d.query_seed));
    f.push_back({"data", "head", [&d] { return std::string(d.head == HeadMode::h ? "h" : "hl"); },
                 [&d](const std::string& v) {
                     if (v == "h") d.head = HeadMode::h;
                     else if (v == "hl") d.head = HeadMode::hl;
                     else throw ValidationError("config: data.head must be h or hl");
                 }});
    f.push_back(number("data", "fixed_group", d.fixed_group));
    return f;
}

void apply_setting(AppConfig& config, std::string_view section, std::string_view key, const std::string& value) {
    for (auto& field : config_fields(config)) {
        if (field.section == section && field.key == key) {
            field.set(value);
            return;
        }
    }
    throw ValidationError("config: unknown key '" + std::string(section) + "." + std::string(key) + "'");
}

void apply_override(AppConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ValidationError("config: override must look like section.key=value, got '" + assignment + "'");
    }
    apply_setting(config, std::string_view(assignment).substr(0, dot),
                  std::string_view(assignment).substr(dot + 1, eq - dot - 1), assignment.substr(eq + 1));
}

void apply_config_text(AppConfig& config, const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ValidationError("config: key '" + section + "' is outside any [section]");
        for (const auto& [key, value] : body) apply_setting(config, section, key, value.data());
    }
}

AppConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    AppConfig config;
    apply_config_text(config, ss.str());
    sync_derived(config);
    return config;
}

std::string canonical_text(const AppConfig& config, const std::vector<std::string>& sections) {
    auto copy = config;
    std::ostringstream os;
    std::string current;
    for (auto& field : config_fields(copy)) {
        if (!sections.empty() && std::find(sections.begin(), sections.end(), field.section) == sections.end()) continue;
        if (field.section != current) {
            if (!current.empty()) os << '\n';
            os << '[' << field.section << "]\n";
            current = field.section;
        }
        os << field.key << " = " << field.get() << '\n';
    }
    return os.str();
}

void sync_derived(AppConfig& config) { config.model.groups = config.train.groups; }

}  // namespace msgcel
