// corefkit command-line front end: vocabulary building, corpus preprocessing,
// training, probing and shard inspection as subcommands over a flat config.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "corefkit/config.hpp"
#include "corefkit/corpus.hpp"
#include "corefkit/errors.hpp"
#include "corefkit/masking.hpp"
#include "corefkit/mentions.hpp"
#include "corefkit/model.hpp"
#include "corefkit/probe.hpp"
#include "corefkit/stats.hpp"
#include "corefkit/synth.hpp"
#include "corefkit/tagger.hpp"
#include "corefkit/tokenizer.hpp"
#include "corefkit/trainer.hpp"
#include "corefkit/vocab.hpp"

namespace {

using json = nlohmann::json;
namespace ck = corefkit;

// Stream tags for deriving independent rng streams from the master seed.
constexpr uint64_t pack_stream = 0x5041434bull;        // "PACK"
constexpr uint64_t gen_corpus_stream = 0x47454e43ull;  // "GENC"
constexpr uint64_t gen_probe_stream = 0x47454e50ull;   // "GENP"

struct CommonFlags {
    std::string config_path;
    uint64_t seed = 0;
    uint32_t workers = 0;
    CLI::Option* config_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* workers_opt = nullptr;

    void attach(CLI::App* cmd) {
        config_opt = cmd->add_option("--config", config_path, "flat key=value config file");
        seed_opt = cmd->add_option("--seed", seed, "master seed (overrides config and env)");
        workers_opt = cmd->add_option("--workers", workers, "worker count (1 = bit-reproducible)");
    }

    // defaults < config file < COREFKIT_SEED < flags
    ck::RunConfig resolve() const {
        ck::RunConfig cfg;
        if (config_opt->count() > 0) {
            ck::apply_config_file(cfg, config_path);
        }
        ck::apply_seed_env(cfg);
        if (seed_opt->count() > 0) {
            cfg.seed = seed;
        }
        if (workers_opt->count() > 0) {
            cfg.workers = workers;
        }
        return cfg;
    }
};

ck::Vocab load_vocab_checked(const std::string& path) {
    if (path.empty()) {
        throw ck::UsageError("missing vocab path (set --vocab or the 'vocab' config key)");
    }
    return ck::load_vocab(path);
}

std::string require_path(const std::string& value, const char* what) {
    if (value.empty()) {
        throw ck::UsageError(std::string("missing ") + what);
    }
    return value;
}

int run_build_vocab(const ck::RunConfig& cfg, const std::string& out) {
    const auto docs =
        ck::read_documents(require_path(cfg.corpus, "corpus path (--corpus)"), cfg.pretagged);
    std::vector<std::pair<std::string, uint64_t>> counts;
    std::unordered_map<std::string, std::size_t> slot;
    for (const auto& doc : docs) {
        for (const auto& tw : doc.words) {
            auto [it, inserted] = slot.emplace(tw.word, counts.size());
            if (inserted) {
                counts.emplace_back(tw.word, 1);
            } else {
                ++counts[it->second].second;
            }
        }
    }
    const ck::Vocab vocab = ck::build_vocab(counts, cfg.vocab_target);
    ck::save_vocab(vocab, require_path(out, "output path (--out)"));
    std::cout << "wrote vocab with " << vocab.size() << " entries\n";
    return 0;
}

int run_gen_corpus(const ck::RunConfig& cfg, const std::string& out) {
    const std::filesystem::path dir = require_path(out, "output directory (--out)");
    std::filesystem::create_directories(dir);

    ck::Rng corpus_rng(ck::derive_seed(cfg.seed, gen_corpus_stream));
    const auto stories = ck::generate_stories(cfg.stories, corpus_rng);
    {
        std::ofstream f(dir / "corpus.txt", std::ios::binary | std::ios::trunc);
        ck::write_pretagged(f, stories, cfg.stories_per_doc);
    }

    ck::Rng probe_rng(ck::derive_seed(cfg.seed, gen_probe_stream));
    const auto held_out = ck::generate_stories(cfg.probe_items, probe_rng);
    std::vector<ck::ProbeItem> recovery, disambiguation;
    for (const auto& story : held_out) {
        recovery.push_back(ck::make_recovery_item(story, cfg.probe_candidates, probe_rng));
        disambiguation.push_back(ck::make_disambiguation_item(story, probe_rng));
    }
    {
        std::ofstream f(dir / "probe_recovery.tsv", std::ios::binary | std::ios::trunc);
        ck::write_probe_file(f, recovery, ck::ProbeMode::recovery);
    }
    {
        std::ofstream f(dir / "probe_disambiguation.tsv", std::ios::binary | std::ios::trunc);
        ck::write_probe_file(f, disambiguation, ck::ProbeMode::disambiguation);
    }
    std::cout << "wrote " << stories.size() << " stories and " << recovery.size()
              << " probe items to " << dir.string() << "\n";
    return 0;
}

int run_preprocess(const ck::RunConfig& cfg, const std::string& out) {
    const auto docs =
        ck::read_documents(require_path(cfg.corpus, "corpus path (--corpus)"), cfg.pretagged);
    const ck::Vocab vocab = load_vocab_checked(cfg.vocab_path);
    ck::Rng pack_rng(ck::derive_seed(cfg.seed, pack_stream));
    const auto packed = ck::pack_sequences(docs, vocab, cfg.max_len, pack_rng);
    const auto manifest = ck::preprocess_to_shards(
        packed, vocab, cfg.masking, cfg.seed, require_path(out, "output directory (--out)"),
        cfg.shard_size, cfg.max_len, cfg.workers);
    std::cout << "wrote " << manifest.total_instances() << " instances in "
              << manifest.shards.size() << " shard(s), mode=" << manifest.mode << "\n";
    return 0;
}

int run_train(const ck::RunConfig& cfg) {
    const std::string data_dir = require_path(cfg.data_dir, "data directory (--data)");
    const auto manifest = ck::load_manifest(data_dir);
    const auto instances = ck::read_shards(manifest, data_dir);
    const ck::Vocab vocab = load_vocab_checked(cfg.vocab_path);
    if (vocab.content_hash() != manifest.vocab_hash) {
        throw ck::DataError("vocab file does not match the vocab the shards were built with");
    }
    ck::ModelConfig model_cfg = cfg.model_config(vocab.size());
    model_cfg.max_positions = manifest.max_len;
    const auto result =
        ck::train(instances, model_cfg, cfg.train_config(),
                  require_path(cfg.checkpoint, "checkpoint path (config key 'checkpoint')"),
                  cfg.metrics);
    std::cout << "final losses: L=" << result.final_loss << " L_MRP=" << result.final_mrp
              << " L_MLM=" << result.final_mlm << "\n";
    return 0;
}

int run_probe(const ck::RunConfig& cfg) {
    const auto params = ck::load_checkpoint(
        require_path(cfg.checkpoint, "checkpoint path (config key 'checkpoint')"));
    const ck::Vocab vocab = load_vocab_checked(cfg.vocab_path);
    if (params.cfg.vocab_size != vocab.size()) {
        throw ck::DataError("checkpoint vocab size does not match the vocab file");
    }
    json report;
    if (cfg.probe_mode == "recovery") {
        const auto items = ck::parse_probe_file(
            require_path(cfg.probe_path, "probe file (--probe)"), ck::ProbeMode::recovery);
        const auto rec = ck::evaluate_recovery(params, vocab, items);
        report = {{"mode", "recovery"},
                  {"items", rec.items},
                  {"accuracy_at_1", rec.accuracy_at_1},
                  {"mean_reciprocal_rank", rec.mean_reciprocal_rank}};
    } else if (cfg.probe_mode == "disambiguation") {
        const auto items = ck::parse_probe_file(
            require_path(cfg.probe_path, "probe file (--probe)"), ck::ProbeMode::disambiguation);
        const double acc = ck::evaluate_disambiguation(params, vocab, items);
        report = {{"mode", "disambiguation"}, {"items", items.size()}, {"accuracy", acc}};
    } else {
        throw ck::UsageError("probe_mode must be 'recovery' or 'disambiguation'");
    }
    std::cout << report.dump(2) << "\n";
    return 0;
}

int run_inspect(const ck::RunConfig& cfg, uint64_t limit, uint64_t offset) {
    const std::string data_dir = require_path(cfg.data_dir, "data directory (--data)");
    const auto manifest = ck::load_manifest(data_dir);
    const auto instances = ck::read_shards(manifest, data_dir);
    const ck::Vocab vocab = load_vocab_checked(cfg.vocab_path);
    const uint64_t end = std::min<uint64_t>(instances.size(), offset + limit);
    for (uint64_t i = offset; i < end; ++i) {
        const auto& inst = instances[i];
        std::cout << "instance " << i << " n=" << inst.seq_len
                  << " mrp_targets=" << inst.mrp_targets.size()
                  << (inst.had_eligible_group ? "" : " (no eligible group)") << "\n  ";
        for (std::size_t p = 0; p < inst.input_ids.size(); ++p) {
            if (p > 0) {
                std::cout << ' ';
            }
            const uint32_t label = inst.mlm_labels[p];
            if (label == ck::TrainingInstance::ignore_label) {
                std::cout << vocab.entry(inst.input_ids[p]);
            } else if (inst.input_ids[p] == ck::Vocab::mask_id) {
                std::cout << "[MASK->" << vocab.entry(label) << "]";
            } else if (inst.input_ids[p] == label) {
                std::cout << "{kept:" << vocab.entry(label) << "}";
            } else {
                std::cout << "{" << vocab.entry(inst.input_ids[p]) << "->" << vocab.entry(label)
                          << "}";
            }
        }
        std::cout << "\n";
        for (const auto& target : inst.mrp_targets) {
            std::cout << "  copy target " << target.start << ".." << target.end << " referents:";
            for (const auto& [s, e] : target.referents) {
                std::cout << " " << s << ".." << e;
            }
            std::cout << "\n";
        }
    }
    return 0;
}

int run_stats(const ck::RunConfig& cfg) {
    const std::string data_dir = require_path(cfg.data_dir, "data directory (--data)");
    const auto manifest = ck::load_manifest(data_dir);
    const auto instances = ck::read_shards(manifest, data_dir);
    const auto stats = ck::measure_masking(instances);
    const json report = {
        {"mode", manifest.mode},
        {"sequences", stats.sequences},
        {"sequences_with_eligible_group", stats.sequences_with_eligible_group},
        {"body_tokens", stats.body_tokens},
        {"labeled_positions", stats.labeled_positions},
        {"masked_fraction", stats.masked_fraction()},
        {"action_split",
         {{"mask", stats.mask_fraction()},
          {"random", stats.random_fraction()},
          {"keep", stats.keep_fraction()}}},
        {"masked_words", stats.masked_words},
        {"mrp_targets", stats.mrp_targets},
        {"mrp_word_share", stats.mrp_word_share()},
        {"mlm_to_mrp_ratio", stats.mlm_to_mrp_ratio()},
    };
    std::cout << report.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"corefkit: coreference-aware masked language model pretraining kit"};
    app.require_subcommand(1);

    auto* build_vocab_cmd = app.add_subcommand("build-vocab", "build a subword vocabulary");
    CommonFlags bv_common;
    bv_common.attach(build_vocab_cmd);
    std::string bv_corpus, bv_out;
    uint32_t bv_size = 0;
    bool bv_raw = false;
    auto* bv_corpus_opt = build_vocab_cmd->add_option("--corpus", bv_corpus, "corpus file");
    auto* bv_size_opt = build_vocab_cmd->add_option("--size", bv_size, "target vocab size");
    auto* bv_out_opt = build_vocab_cmd->add_option("--out", bv_out, "vocab output path");
    auto* bv_raw_opt =
        build_vocab_cmd->add_flag("--raw", bv_raw, "corpus is raw text, not word/TAG");

    auto* gen_cmd = app.add_subcommand("gen-corpus", "generate the synthetic story corpus");
    CommonFlags gen_common;
    gen_common.attach(gen_cmd);
    std::string gen_out;
    uint32_t gen_stories = 0, gen_items = 0, gen_candidates = 0, gen_per_doc = 0;
    auto* gen_out_opt = gen_cmd->add_option("--out", gen_out, "output directory");
    auto* gen_stories_opt = gen_cmd->add_option("--stories", gen_stories, "story count");
    auto* gen_items_opt = gen_cmd->add_option("--probe-items", gen_items, "held-out probe items");
    auto* gen_cand_opt =
        gen_cmd->add_option("--probe-candidates", gen_candidates, "candidates per probe item");
    auto* gen_per_doc_opt =
        gen_cmd->add_option("--stories-per-doc", gen_per_doc, "stories per packed document");

    auto* pre_cmd = app.add_subcommand("preprocess", "tag + pack + mask + shard a corpus");
    CommonFlags pre_common;
    pre_common.attach(pre_cmd);
    std::string pre_corpus, pre_vocab, pre_out, pre_mode;
    uint32_t pre_max_len = 0, pre_shard = 0;
    bool pre_raw = false;
    auto* pre_corpus_opt = pre_cmd->add_option("--corpus", pre_corpus, "corpus file");
    auto* pre_vocab_opt = pre_cmd->add_option("--vocab", pre_vocab, "vocab file");
    auto* pre_out_opt = pre_cmd->add_option("--out", pre_out, "shard output directory");
    auto* pre_mode_opt =
        pre_cmd->add_option("--mode", pre_mode, "random_subword, wwm, mrm or full");
    auto* pre_max_len_opt = pre_cmd->add_option("--max-len", pre_max_len, "max sequence length");
    auto* pre_shard_opt = pre_cmd->add_option("--shard-size", pre_shard, "instances per shard");
    auto* pre_raw_opt = pre_cmd->add_flag("--raw", pre_raw, "corpus is raw text, not word/TAG");

    auto* train_cmd = app.add_subcommand("train", "train on preprocessed shards");
    CommonFlags train_common;
    train_common.attach(train_cmd);
    std::string train_data, train_vocab, train_ckpt, train_metrics;
    uint32_t train_steps = 0, train_batch = 0;
    double train_lr = 0.0;
    auto* train_data_opt = train_cmd->add_option("--data", train_data, "shard directory");
    auto* train_vocab_opt = train_cmd->add_option("--vocab", train_vocab, "vocab file");
    auto* train_ckpt_opt = train_cmd->add_option("--checkpoint", train_ckpt, "checkpoint path");
    auto* train_metrics_opt = train_cmd->add_option("--metrics", train_metrics, "metrics CSV path");
    auto* train_steps_opt = train_cmd->add_option("--steps", train_steps, "total steps");
    auto* train_batch_opt = train_cmd->add_option("--batch-size", train_batch, "batch size");
    auto* train_lr_opt = train_cmd->add_option("--lr", train_lr, "peak learning rate");

    auto* probe_cmd = app.add_subcommand("probe", "evaluate coreferential recovery");
    CommonFlags probe_common;
    probe_common.attach(probe_cmd);
    std::string probe_ckpt, probe_vocab, probe_file, probe_mode;
    auto* probe_ckpt_opt = probe_cmd->add_option("--checkpoint", probe_ckpt, "checkpoint path");
    auto* probe_vocab_opt = probe_cmd->add_option("--vocab", probe_vocab, "vocab file");
    auto* probe_file_opt = probe_cmd->add_option("--probe", probe_file, "probe TSV file");
    auto* probe_mode_opt =
        probe_cmd->add_option("--probe-mode", probe_mode, "recovery or disambiguation");

    auto* inspect_cmd = app.add_subcommand("inspect", "dump shard instances human-readably");
    CommonFlags inspect_common;
    inspect_common.attach(inspect_cmd);
    std::string inspect_data, inspect_vocab;
    uint64_t inspect_limit = 10, inspect_offset = 0;
    auto* inspect_data_opt = inspect_cmd->add_option("--data", inspect_data, "shard directory");
    auto* inspect_vocab_opt = inspect_cmd->add_option("--vocab", inspect_vocab, "vocab file");
    inspect_cmd->add_option("--limit", inspect_limit, "instances to print");
    inspect_cmd->add_option("--offset", inspect_offset, "first instance index");

    auto* stats_cmd = app.add_subcommand("stats", "masking-statistics report (JSON)");
    CommonFlags stats_common;
    stats_common.attach(stats_cmd);
    std::string stats_data;
    auto* stats_data_opt = stats_cmd->add_option("--data", stats_data, "shard directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Collapse CLI11's error-code zoo onto the documented contract:
        // 0 success/help, 1 usage error.
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (build_vocab_cmd->parsed()) {
            ck::RunConfig cfg = bv_common.resolve();
            if (bv_corpus_opt->count() > 0) cfg.corpus = bv_corpus;
            if (bv_size_opt->count() > 0) cfg.vocab_target = bv_size;
            if (bv_raw_opt->count() > 0) cfg.pretagged = !bv_raw;
            std::string out = cfg.vocab_path;
            if (bv_out_opt->count() > 0) out = bv_out;
            return run_build_vocab(cfg, out);
        }
        if (gen_cmd->parsed()) {
            ck::RunConfig cfg = gen_common.resolve();
            if (gen_stories_opt->count() > 0) cfg.stories = gen_stories;
            if (gen_items_opt->count() > 0) cfg.probe_items = gen_items;
            if (gen_cand_opt->count() > 0) cfg.probe_candidates = gen_candidates;
            if (gen_per_doc_opt->count() > 0) cfg.stories_per_doc = gen_per_doc;
            std::string out = cfg.data_dir;
            if (gen_out_opt->count() > 0) out = gen_out;
            return run_gen_corpus(cfg, out);
        }
        if (pre_cmd->parsed()) {
            ck::RunConfig cfg = pre_common.resolve();
            if (pre_corpus_opt->count() > 0) cfg.corpus = pre_corpus;
            if (pre_vocab_opt->count() > 0) cfg.vocab_path = pre_vocab;
            if (pre_mode_opt->count() > 0) cfg.masking.mode = ck::mask_mode_from_name(pre_mode);
            if (pre_max_len_opt->count() > 0) cfg.max_len = pre_max_len;
            if (pre_shard_opt->count() > 0) cfg.shard_size = pre_shard;
            if (pre_raw_opt->count() > 0) cfg.pretagged = !pre_raw;
            std::string out = cfg.data_dir;
            if (pre_out_opt->count() > 0) out = pre_out;
            return run_preprocess(cfg, out);
        }
        if (train_cmd->parsed()) {
            ck::RunConfig cfg = train_common.resolve();
            if (train_data_opt->count() > 0) cfg.data_dir = train_data;
            if (train_vocab_opt->count() > 0) cfg.vocab_path = train_vocab;
            if (train_ckpt_opt->count() > 0) cfg.checkpoint = train_ckpt;
            if (train_metrics_opt->count() > 0) cfg.metrics = train_metrics;
            if (train_steps_opt->count() > 0) cfg.steps = train_steps;
            if (train_batch_opt->count() > 0) cfg.batch_size = train_batch;
            if (train_lr_opt->count() > 0) cfg.peak_lr = train_lr;
            return run_train(cfg);
        }
        if (probe_cmd->parsed()) {
            ck::RunConfig cfg = probe_common.resolve();
            if (probe_ckpt_opt->count() > 0) cfg.checkpoint = probe_ckpt;
            if (probe_vocab_opt->count() > 0) cfg.vocab_path = probe_vocab;
            if (probe_file_opt->count() > 0) cfg.probe_path = probe_file;
            if (probe_mode_opt->count() > 0) cfg.probe_mode = probe_mode;
            return run_probe(cfg);
        }
        if (inspect_cmd->parsed()) {
            ck::RunConfig cfg = inspect_common.resolve();
            if (inspect_data_opt->count() > 0) cfg.data_dir = inspect_data;
            if (inspect_vocab_opt->count() > 0) cfg.vocab_path = inspect_vocab;
            return run_inspect(cfg, inspect_limit, inspect_offset);
        }
        if (stats_cmd->parsed()) {
            ck::RunConfig cfg = stats_common.resolve();
            if (stats_data_opt->count() > 0) cfg.data_dir = stats_data;
            return run_stats(cfg);
        }
    } catch (const ck::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ck::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
