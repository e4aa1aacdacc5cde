#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "corefkit/errors.hpp"
#include "corefkit/masking.hpp"
#include "corefkit/model.hpp"
#include "corefkit/trainer.hpp"

namespace corefkit {

// Flat run configuration shared by all subcommands. Precedence: defaults <
// config file < COREFKIT_SEED (seed only) < command-line flags.
struct RunConfig {
    std::string corpus;
    std::string vocab_path;
    std::string data_dir;
    std::string checkpoint;
    std::string metrics;
    std::string probe_path;
    std::string probe_mode = "recovery";
    bool pretagged = true;

    uint32_t vocab_target = 1024;
    uint32_t max_len = 512;
    uint32_t shard_size = 4096;

    MaskingConfig masking;

    uint32_t hidden = 32;
    uint32_t layers = 2;
    uint32_t heads = 4;
    uint32_t ffn = 128;
    double dropout = 0.0;

    uint32_t batch_size = 16;
    uint32_t steps = 2000;
    double peak_lr = 1e-3;
    double warmup_fraction = 0.2;
    double mrp_weight = 1.0;
    double mlm_weight = 1.0;
    double clip_norm = 1.0;
    uint32_t checkpoint_every = 0;

    uint32_t stories = 50000;
    uint32_t stories_per_doc = 20;
    uint32_t probe_items = 500;
    uint32_t probe_candidates = 4;

    uint64_t seed = 42;
    uint32_t workers = 1;

    ModelConfig model_config(uint32_t vocab_size) const {
        ModelConfig cfg;
        cfg.vocab_size = vocab_size;
        cfg.hidden = hidden;
        cfg.layers = layers;
        cfg.heads = heads;
        cfg.ffn = ffn;
        cfg.max_positions = max_len;
        cfg.dropout = dropout;
        return cfg;
    }

    TrainConfig train_config() const {
        TrainConfig cfg;
        cfg.batch_size = batch_size;
        cfg.total_steps = steps;
        cfg.peak_lr = peak_lr;
        cfg.warmup_fraction = warmup_fraction;
        cfg.mrp_weight = mrp_weight;
        cfg.mlm_weight = mlm_weight;
        cfg.seed = seed;
        cfg.checkpoint_every = checkpoint_every;
        cfg.clip_norm = clip_norm;
        cfg.workers = workers;
        return cfg;
    }
};

namespace detail {

inline uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const uint64_t v = std::stoull(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': expected an unsigned integer, got '" + value +
                         "'");
    }
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': expected a number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true" || value == "yes") {
        return true;
    }
    if (value == "0" || value == "false" || value == "no") {
        return false;
    }
    throw UsageError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

} // namespace detail

// Ordered key table; also the source of the usage error's key listing.
inline const std::map<std::string, std::function<void(RunConfig&, const std::string&)>>&
config_key_table() {
    using Setter = std::function<void(RunConfig&, const std::string&)>;
    static const std::map<std::string, Setter> table = {
        {"corpus", [](RunConfig& c, const std::string& v) { c.corpus = v; }},
        {"vocab", [](RunConfig& c, const std::string& v) { c.vocab_path = v; }},
        {"data_dir", [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
        {"checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; }},
        {"metrics", [](RunConfig& c, const std::string& v) { c.metrics = v; }},
        {"probe", [](RunConfig& c, const std::string& v) { c.probe_path = v; }},
        {"probe_mode", [](RunConfig& c, const std::string& v) { c.probe_mode = v; }},
        {"pretagged",
         [](RunConfig& c, const std::string& v) { c.pretagged = detail::parse_bool("pretagged", v); }},
        {"vocab_target",
         [](RunConfig& c, const std::string& v) {
             c.vocab_target = static_cast<uint32_t>(detail::parse_u64("vocab_target", v));
         }},
        {"max_len",
         [](RunConfig& c, const std::string& v) {
             c.max_len = static_cast<uint32_t>(detail::parse_u64("max_len", v));
         }},
        {"shard_size",
         [](RunConfig& c, const std::string& v) {
             c.shard_size = static_cast<uint32_t>(detail::parse_u64("shard_size", v));
         }},
        {"mode",
         [](RunConfig& c, const std::string& v) { c.masking.mode = mask_mode_from_name(v); }},
        {"budget_fraction",
         [](RunConfig& c, const std::string& v) {
             c.masking.budget_fraction = detail::parse_double("budget_fraction", v);
         }},
        {"mrp_share",
         [](RunConfig& c, const std::string& v) {
             c.masking.mrp_word_share = detail::parse_double("mrp_share", v);
         }},
        {"mask_prob",
         [](RunConfig& c, const std::string& v) {
             c.masking.mask_prob = detail::parse_double("mask_prob", v);
         }},
        {"random_prob",
         [](RunConfig& c, const std::string& v) {
             c.masking.random_prob = detail::parse_double("random_prob", v);
         }},
        {"keep_prob",
         [](RunConfig& c, const std::string& v) {
             c.masking.keep_prob = detail::parse_double("keep_prob", v);
         }},
        {"hidden",
         [](RunConfig& c, const std::string& v) {
             c.hidden = static_cast<uint32_t>(detail::parse_u64("hidden", v));
         }},
        {"layers",
         [](RunConfig& c, const std::string& v) {
             c.layers = static_cast<uint32_t>(detail::parse_u64("layers", v));
         }},
        {"heads",
         [](RunConfig& c, const std::string& v) {
             c.heads = static_cast<uint32_t>(detail::parse_u64("heads", v));
         }},
        {"ffn",
         [](RunConfig& c, const std::string& v) {
             c.ffn = static_cast<uint32_t>(detail::parse_u64("ffn", v));
         }},
        {"dropout",
         [](RunConfig& c, const std::string& v) { c.dropout = detail::parse_double("dropout", v); }},
        {"batch_size",
         [](RunConfig& c, const std::string& v) {
             c.batch_size = static_cast<uint32_t>(detail::parse_u64("batch_size", v));
         }},
        {"steps",
         [](RunConfig& c, const std::string& v) {
             c.steps = static_cast<uint32_t>(detail::parse_u64("steps", v));
         }},
        {"peak_lr",
         [](RunConfig& c, const std::string& v) { c.peak_lr = detail::parse_double("peak_lr", v); }},
        {"warmup_fraction",
         [](RunConfig& c, const std::string& v) {
             c.warmup_fraction = detail::parse_double("warmup_fraction", v);
         }},
        {"mrp_weight",
         [](RunConfig& c, const std::string& v) {
             c.mrp_weight = detail::parse_double("mrp_weight", v);
         }},
        {"mlm_weight",
         [](RunConfig& c, const std::string& v) {
             c.mlm_weight = detail::parse_double("mlm_weight", v);
         }},
        {"clip_norm",
         [](RunConfig& c, const std::string& v) {
             c.clip_norm = detail::parse_double("clip_norm", v);
         }},
        {"checkpoint_every",
         [](RunConfig& c, const std::string& v) {
             c.checkpoint_every = static_cast<uint32_t>(detail::parse_u64("checkpoint_every", v));
         }},
        {"stories",
         [](RunConfig& c, const std::string& v) {
             c.stories = static_cast<uint32_t>(detail::parse_u64("stories", v));
         }},
        {"stories_per_doc",
         [](RunConfig& c, const std::string& v) {
             c.stories_per_doc = static_cast<uint32_t>(detail::parse_u64("stories_per_doc", v));
         }},
        {"probe_items",
         [](RunConfig& c, const std::string& v) {
             c.probe_items = static_cast<uint32_t>(detail::parse_u64("probe_items", v));
         }},
        {"probe_candidates",
         [](RunConfig& c, const std::string& v) {
             c.probe_candidates = static_cast<uint32_t>(detail::parse_u64("probe_candidates", v));
         }},
        {"seed",
         [](RunConfig& c, const std::string& v) { c.seed = detail::parse_u64("seed", v); }},
        {"workers",
         [](RunConfig& c, const std::string& v) {
             c.workers = static_cast<uint32_t>(detail::parse_u64("workers", v));
         }},
    };
    return table;
}

inline std::string valid_config_keys() {
    std::string keys;
    for (const auto& [key, setter] : config_key_table()) {
        if (!keys.empty()) {
            keys += ", ";
        }
        keys += key;
    }
    return keys;
}

inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = config_key_table();
    const auto it = table.find(key);
    if (it == table.end()) {
        throw UsageError("unknown config key '" + key + "'; valid keys: " + valid_config_keys());
    }
    it->second(cfg, value);
}

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t begin = 0;
    std::size_t end = s.size();
    while (begin < end && (s[begin] == ' ' || s[begin] == '\t')) {
        ++begin;
    }
    while (end > begin && (s[end - 1] == ' ' || s[end - 1] == '\t' || s[end - 1] == '\r')) {
        --end;
    }
    return std::string(s.substr(begin, end - begin));
}

} // namespace detail

// Flat key=value config file with # comments.
inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open config file " + path.string());
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        const std::string stripped = detail::trim(line);
        if (stripped.empty()) {
            continue;
        }
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config file " + path.string() + " line " + std::to_string(line_no) +
                             ": expected key=value");
        }
        apply_config_key(cfg, detail::trim(stripped.substr(0, eq)),
                         detail::trim(stripped.substr(eq + 1)));
    }
}

// COREFKIT_SEED overrides the config-file seed; an explicit --seed flag still
// wins over the environment.
inline void apply_seed_env(RunConfig& cfg) {
    if (const char* env = std::getenv("COREFKIT_SEED")) {
        cfg.seed = detail::parse_u64("COREFKIT_SEED", env);
    }
}

} // namespace corefkit
