#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "corefkit/corpus.hpp"
#include "corefkit/synth.hpp"
#include "corefkit/trainer.hpp"

using namespace corefkit;

namespace {

namespace fs = std::filesystem;

struct Pipeline {
    Vocab vocab;
    std::vector<TrainingInstance> instances;
};

Pipeline make_pipeline(std::size_t stories, uint64_t seed, MaskMode mode = MaskMode::full) {
    Rng story_rng(seed);
    const auto generated = generate_stories(stories, story_rng);
    std::stringstream text;
    write_pretagged(text, generated, 8);
    const auto docs = read_pretagged(text);

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
    Pipeline p{build_vocab(counts, 1024), {}};

    Rng pack_rng(derive_seed(seed, 1));
    const auto packed = pack_sequences(docs, p.vocab, 96, pack_rng);
    MaskingConfig cfg;
    cfg.mode = mode;
    for (std::size_t i = 0; i < packed.size(); ++i) {
        std::vector<TaggedWord> tagged(packed[i].seq.raw_words.size());
        for (std::size_t w = 0; w < tagged.size(); ++w) {
            tagged[w] = {packed[i].seq.raw_words[w], packed[i].tags[w]};
        }
        const auto groups = detect_mention_groups(tagged);
        Rng rng(derive_seed(seed + 2, i));
        const auto plan = sample_plan(packed[i].seq, groups, cfg, rng);
        auto inst = apply_plan(packed[i].seq, plan, p.vocab, rng);
        inst.had_eligible_group =
            std::any_of(groups.begin(), groups.end(), [](const auto& g) { return g.eligible(); });
        p.instances.push_back(std::move(inst));
    }
    return p;
}

ModelConfig small_model(uint32_t vocab_size) {
    ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.hidden = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.ffn = 32;
    cfg.max_positions = 96;
    return cfg;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct MetricsRow {
    uint64_t step;
    double lr, total, mrp, mlm;
};

std::vector<MetricsRow> parse_metrics(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line); // header
    REQUIRE(line == "step,lr,L,L_MRP,L_MLM");
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        MetricsRow row{};
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream fields(line);
        fields >> row.step >> row.lr >> row.total >> row.mrp >> row.mlm;
        rows.push_back(row);
    }
    return rows;
}

} // namespace

TEST_CASE("learning rate schedule", "[trainer]") {
    TrainConfig cfg;
    cfg.total_steps = 1000;
    cfg.warmup_fraction = 0.2;
    cfg.peak_lr = 5e-5;
    REQUIRE(lr_at(0, cfg) == 0.0);
    REQUIRE(lr_at(200, cfg) == 5e-5);
    REQUIRE_THAT(lr_at(600, cfg), Catch::Matchers::WithinAbs(2.5e-5, 1e-20));
    REQUIRE(lr_at(1000, cfg) == 0.0);
    REQUIRE(lr_at(1001, cfg) == 0.0);
    REQUIRE_THAT(lr_at(100, cfg), Catch::Matchers::WithinAbs(2.5e-5, 1e-20));
}

TEST_CASE("adam step with zero gradient leaves parameters unchanged", "[trainer]") {
    const ModelConfig cfg = small_model(32);
    ModelParams params = init_params(cfg, 3);
    const ModelParams reference = init_params(cfg, 3);
    detail::AdamState state{zeros_like(params), zeros_like(params)};
    const ModelParams zero_grads = zeros_like(params);
    TrainConfig tc;
    detail::adam_step(params, zero_grads, state, 1, 1e-3, tc);
    detail::adam_step(params, zero_grads, state, 2, 1e-3, tc);
    std::vector<const std::vector<double>*> expect;
    for_each_tensor(reference,
                    [&](const std::string&, const std::vector<double>& v) { expect.push_back(&v); });
    std::size_t k = 0;
    for_each_tensor(params, [&](const std::string&, const std::vector<double>& v) {
        REQUIRE(*expect[k++] == v);
    });
}

TEST_CASE("zero learning rate trains to the initial parameters", "[trainer]") {
    const Pipeline p = make_pipeline(40, 11);
    const ModelConfig mcfg = small_model(p.vocab.size());
    TrainConfig tc;
    tc.total_steps = 5;
    tc.batch_size = 4;
    tc.peak_lr = 0.0;
    tc.seed = 9;
    const auto result = train(p.instances, mcfg, tc, "", "");
    const ModelParams reference = init_params(mcfg, 9);
    std::vector<const std::vector<double>*> expect;
    for_each_tensor(reference,
                    [&](const std::string&, const std::vector<double>& v) { expect.push_back(&v); });
    std::size_t k = 0;
    for_each_tensor(result.params, [&](const std::string&, const std::vector<double>& v) {
        REQUIRE(*expect[k++] == v);
    });
}

TEST_CASE("training is deterministic per seed and worker count", "[trainer]") {
    const Pipeline p = make_pipeline(60, 12);
    const ModelConfig mcfg = small_model(p.vocab.size());
    TrainConfig tc;
    tc.total_steps = 12;
    tc.batch_size = 6;
    tc.seed = 21;

    const auto dir = fs::temp_directory_path() / "corefkit_trainer_det";
    fs::remove_all(dir);
    fs::create_directories(dir);

    tc.workers = 1;
    train(p.instances, mcfg, tc, dir / "a.ckpt", dir / "a.csv");
    train(p.instances, mcfg, tc, dir / "b.ckpt", dir / "b.csv");
    tc.workers = 3;
    train(p.instances, mcfg, tc, dir / "c.ckpt", dir / "c.csv");

    REQUIRE(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));
    REQUIRE(file_bytes(dir / "a.csv") == file_bytes(dir / "b.csv"));
    REQUIRE(file_bytes(dir / "a.ckpt") == file_bytes(dir / "c.ckpt"));
    REQUIRE(file_bytes(dir / "a.csv") == file_bytes(dir / "c.csv"));
    fs::remove_all(dir);
}

TEST_CASE("metrics rows satisfy the loss accounting identity", "[trainer]") {
    const Pipeline p = make_pipeline(50, 13);
    const ModelConfig mcfg = small_model(p.vocab.size());
    TrainConfig tc;
    tc.total_steps = 10;
    tc.batch_size = 8;
    tc.seed = 5;
    const auto dir = fs::temp_directory_path() / "corefkit_trainer_metrics";
    fs::remove_all(dir);
    fs::create_directories(dir);
    train(p.instances, mcfg, tc, "", dir / "m.csv");
    const auto rows = parse_metrics(dir / "m.csv");
    REQUIRE(rows.size() == 10);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        REQUIRE(rows[i].step == i + 1);
        REQUIRE(std::abs(rows[i].total - (rows[i].mrp + rows[i].mlm)) <= 1e-12);
        REQUIRE(rows[i].lr == lr_at(rows[i].step, tc));
    }
    fs::remove_all(dir);
}

TEST_CASE("two hundred steps reduce the copy loss", "[trainer][slow]") {
    const Pipeline p = make_pipeline(300, 14);
    const ModelConfig mcfg = small_model(p.vocab.size());
    TrainConfig tc;
    tc.total_steps = 200;
    tc.batch_size = 8;
    tc.peak_lr = 1e-3;
    tc.seed = 31;
    const auto dir = fs::temp_directory_path() / "corefkit_trainer_learn";
    fs::remove_all(dir);
    fs::create_directories(dir);
    train(p.instances, mcfg, tc, "", dir / "m.csv");
    const auto rows = parse_metrics(dir / "m.csv");
    REQUIRE(rows.size() == 200);
    REQUIRE(rows.back().mrp < rows.front().mrp);
    REQUIRE(rows.back().total < rows.front().total);
    fs::remove_all(dir);
}

TEST_CASE("training rejects an empty dataset", "[trainer]") {
    const ModelConfig mcfg = small_model(32);
    TrainConfig tc;
    REQUIRE_THROWS_AS(train({}, mcfg, tc, "", ""), DataError);
}

TEST_CASE("non-finite loss aborts with a batch dump", "[trainer]") {
    const Pipeline p = make_pipeline(20, 16);
    const ModelConfig mcfg = small_model(p.vocab.size());
    TrainConfig tc;
    tc.total_steps = 10;
    tc.batch_size = 4;
    tc.peak_lr = std::numeric_limits<double>::infinity();
    tc.warmup_fraction = 0.0; // full blast from step one
    tc.clip_norm = 0.0;
    tc.seed = 2;
    REQUIRE_THROWS_WITH(train(p.instances, mcfg, tc, "", ""),
                        Catch::Matchers::ContainsSubstring("non-finite loss"));
}

TEST_CASE("checkpoint cadence writes loadable checkpoints", "[trainer]") {
    const Pipeline p = make_pipeline(30, 15);
    const ModelConfig mcfg = small_model(p.vocab.size());
    TrainConfig tc;
    tc.total_steps = 6;
    tc.batch_size = 4;
    tc.checkpoint_every = 2;
    tc.seed = 77;
    const auto dir = fs::temp_directory_path() / "corefkit_trainer_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto result = train(p.instances, mcfg, tc, dir / "model.ckpt", "");
    const ModelParams loaded = load_checkpoint(dir / "model.ckpt");
    std::vector<const std::vector<double>*> expect;
    for_each_tensor(result.params,
                    [&](const std::string&, const std::vector<double>& v) { expect.push_back(&v); });
    std::size_t k = 0;
    for_each_tensor(loaded, [&](const std::string&, const std::vector<double>& v) {
        REQUIRE(*expect[k++] == v);
    });
    fs::remove_all(dir);
}
