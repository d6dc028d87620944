#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "msgcel/dataset.hpp"
#include "msgcel/encoder.hpp"
#include "msgcel/metrics.hpp"
#include "msgcel/retrieval.hpp"
#include "msgcel/trainer.hpp"

namespace msgcel {

/// Held-out split and query selection for evaluation.
struct DataConfig {
    double holdout_fraction = 0.2;
    std::uint64_t split_seed = 11;
    int max_queries = 300;
    std::uint64_t query_seed = 13;
    HeadMode head = HeadMode::h;
    /// -1 routes by area; otherwise every object uses this group's head.
    int fixed_group = -1;
};

struct AppConfig {
    SynthConfig synth;
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    DataConfig data;
};

struct ConfigField {
    std::string section;
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

/// Every recognised `section.key`, in canonical order, bound to `config`.
std::vector<ConfigField> config_fields(AppConfig& config);

/// Throws ValidationError for unknown keys or unparsable values.
void apply_setting(AppConfig& config, std::string_view section, std::string_view key, const std::string& value);
/// `section.key=value` form used by command-line overrides.
void apply_override(AppConfig& config, const std::string& assignment);

/// INI text (`[section]` headers, `key = value` lines, `#`/`;` comments).
void apply_config_text(AppConfig& config, const std::string& text);
AppConfig load_config_file(const std::filesystem::path& path);

/// Canonical INI text of the selected sections (all when empty).
std::string canonical_text(const AppConfig& config, const std::vector<std::string>& sections = {});

/// Keeps train.groups as the source of truth for model.groups.
void sync_derived(AppConfig& config);

}  // namespace msgcel
