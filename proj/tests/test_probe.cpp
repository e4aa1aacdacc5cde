#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "corefkit/probe.hpp"
#include "corefkit/synth.hpp"
#include "corefkit/trainer.hpp"

using namespace corefkit;

namespace {

Vocab story_vocab(uint64_t seed, std::size_t stories = 200) {
    Rng rng(seed);
    const auto generated = generate_stories(stories, rng);
    std::vector<std::pair<std::string, uint64_t>> counts;
    std::unordered_map<std::string, std::size_t> slot;
    for (const auto& story : generated) {
        for (const auto& tw : story.words) {
            auto [it, inserted] = slot.emplace(tw.word, counts.size());
            if (inserted) {
                counts.emplace_back(tw.word, 1);
            } else {
                ++counts[it->second].second;
            }
        }
    }
    // Pronoun used by disambiguation items.
    auto [it, inserted] = slot.emplace("they", counts.size());
    if (inserted) {
        counts.emplace_back("they", 1);
    }
    return build_vocab(counts, 1024);
}

} // namespace

TEST_CASE("probe files round trip", "[probe]") {
    Rng rng(41);
    std::vector<ProbeItem> recovery, disambiguation;
    for (int i = 0; i < 20; ++i) {
        const SynthStory story = generate_story(rng);
        recovery.push_back(make_recovery_item(story, 4, rng));
        disambiguation.push_back(make_disambiguation_item(story, rng));
    }
    const auto dir = std::filesystem::temp_directory_path();
    {
        std::ofstream f(dir / "corefkit_probe_rec.tsv", std::ios::trunc);
        write_probe_file(f, recovery, ProbeMode::recovery);
        std::ofstream g(dir / "corefkit_probe_dis.tsv", std::ios::trunc);
        write_probe_file(g, disambiguation, ProbeMode::disambiguation);
    }
    const auto rec = parse_probe_file(dir / "corefkit_probe_rec.tsv", ProbeMode::recovery);
    REQUIRE(rec.size() == recovery.size());
    for (std::size_t i = 0; i < rec.size(); ++i) {
        REQUIRE(rec[i].words == recovery[i].words);
        REQUIRE(rec[i].masked_word == recovery[i].masked_word);
        REQUIRE(rec[i].candidate_words == recovery[i].candidate_words);
        REQUIRE(rec[i].gold == recovery[i].gold);
    }
    const auto dis = parse_probe_file(dir / "corefkit_probe_dis.tsv", ProbeMode::disambiguation);
    REQUIRE(dis.size() == disambiguation.size());
    REQUIRE(dis[0].candidate_strings == disambiguation[0].candidate_strings);
    std::filesystem::remove(dir / "corefkit_probe_rec.tsv");
    std::filesystem::remove(dir / "corefkit_probe_dis.tsv");
}

TEST_CASE("recovery items place the gold among distinct candidates", "[probe]") {
    Rng rng(42);
    for (int i = 0; i < 100; ++i) {
        const SynthStory story = generate_story(rng);
        const ProbeItem item = make_recovery_item(story, 4, rng);
        REQUIRE(item.candidate_words.size() == 4);
        REQUIRE(item.gold < 4);
        for (uint32_t c : item.candidate_words) {
            REQUIRE(c != item.masked_word);
            REQUIRE(c < item.words.size());
        }
        // Gold candidate shares the masked surface form; distractors do not.
        const std::string masked_surface = ascii_lower(item.words[item.masked_word]);
        for (std::size_t k = 0; k < item.candidate_words.size(); ++k) {
            const std::string surface = ascii_lower(item.words[item.candidate_words[k]]);
            if (k == item.gold) {
                REQUIRE(surface == masked_surface);
            } else {
                REQUIRE(surface != masked_surface);
            }
        }
    }
}

TEST_CASE("single candidate is trivially recovered", "[probe]") {
    const Vocab vocab = story_vocab(5);
    const ModelConfig cfg{vocab.size(), 16, 1, 2, 32, 64, 0.0};
    const ModelParams params = init_params(cfg, 3);
    Rng rng(43);
    const SynthStory story = generate_story(rng);
    ProbeItem item = make_recovery_item(story, 4, rng);
    item.candidate_words = {item.candidate_words[item.gold]};
    item.gold = 0;
    const auto report = evaluate_recovery(params, vocab, std::vector<ProbeItem>{item});
    REQUIRE(report.accuracy_at_1 == 1.0);
    REQUIRE(report.mean_reciprocal_rank == 1.0);
}

TEST_CASE("untrained recovery accuracy is near chance", "[probe]") {
    const Vocab vocab = story_vocab(6);
    const ModelConfig cfg{vocab.size(), 16, 1, 2, 32, 64, 0.0};
    const ModelParams params = init_params(cfg, 17);
    Rng rng(44);
    std::vector<ProbeItem> items;
    for (int i = 0; i < 200; ++i) {
        items.push_back(make_recovery_item(generate_story(rng), 4, rng));
    }
    const auto report = evaluate_recovery(params, vocab, items);
    REQUIRE(report.accuracy_at_1 > 0.10);
    REQUIRE(report.accuracy_at_1 < 0.45);
}

TEST_CASE("ranking is invariant to candidate order", "[probe]") {
    const Vocab vocab = story_vocab(7);
    const ModelConfig cfg{vocab.size(), 16, 1, 2, 32, 64, 0.0};
    const ModelParams params = init_params(cfg, 5);
    Rng rng(45);
    const SynthStory story = generate_story(rng);
    ProbeItem item = make_recovery_item(story, 4, rng);

    const Ranking base = recover_mention(params, vocab, item);
    const uint32_t best_span = item.candidate_words[base.order[0]];

    ProbeItem permuted = item;
    std::rotate(permuted.candidate_words.begin(), permuted.candidate_words.begin() + 1,
                permuted.candidate_words.end());
    const Ranking rotated = recover_mention(params, vocab, permuted);
    REQUIRE(permuted.candidate_words[rotated.order[0]] == best_span);

    // Deterministic for a fixed checkpoint.
    const Ranking again = recover_mention(params, vocab, item);
    REQUIRE(base.scores == again.scores);
}

TEST_CASE("recovery rejects malformed items", "[probe]") {
    const Vocab vocab = story_vocab(8);
    const ModelConfig cfg{vocab.size(), 16, 1, 2, 32, 64, 0.0};
    const ModelParams params = init_params(cfg, 5);
    Rng rng(46);
    const SynthStory story = generate_story(rng);
    ProbeItem item = make_recovery_item(story, 4, rng);

    ProbeItem outside = item;
    outside.candidate_words[0] = static_cast<uint32_t>(outside.words.size() + 3);
    REQUIRE_THROWS_WITH(recover_mention(params, vocab, outside),
                        Catch::Matchers::ContainsSubstring("outside passage"));

    ProbeItem self_ref = item;
    self_ref.candidate_words[0] = self_ref.masked_word;
    REQUIRE_THROWS_WITH(recover_mention(params, vocab, self_ref),
                        Catch::Matchers::ContainsSubstring("masked span among candidates"));
}

TEST_CASE("disambiguation tie breaks toward the lower index", "[probe]") {
    const Vocab vocab = story_vocab(9);
    const ModelConfig cfg{vocab.size(), 16, 1, 2, 32, 64, 0.0};
    const ModelParams params = init_params(cfg, 5);
    Rng rng(47);
    const SynthStory story = generate_story(rng);
    ProbeItem item = make_disambiguation_item(story, rng);
    item.candidate_strings = {"Alice", "Alice"};
    item.gold = 0;
    REQUIRE(disambiguate(params, vocab, item) == 0);
}

TEST_CASE("empty candidate string is rejected", "[probe]") {
    const Vocab vocab = story_vocab(10);
    const ModelConfig cfg{vocab.size(), 16, 1, 2, 32, 64, 0.0};
    const ModelParams params = init_params(cfg, 5);
    Rng rng(48);
    ProbeItem item = make_disambiguation_item(generate_story(rng), rng);
    item.candidate_strings[0] = "";
    REQUIRE_THROWS_WITH(disambiguate(params, vocab, item),
                        Catch::Matchers::ContainsSubstring("empty candidate"));
}

TEST_CASE("overfit model recovers the memorized fill", "[probe][slow]") {
    // One passage, one mask position, trained until the masked-LM head
    // memorizes the original word; the matching candidate must win.
    const std::vector<std::string> words = {"Claire", "met",   "Bob", "at",
                                            "the",    "park",  ".",   "Claire",
                                            "thanked", "Bob",  "."};
    Vocab vocab = make_vocab_with_specials();
    for (const auto& w : words) {
        if (!vocab.contains(w)) {
            vocab.add(w);
        }
    }
    const auto seq = tokenize(words, vocab);
    // Mask word 7 ("Claire") with the mask action.
    std::vector<MaskTarget> plan(1);
    plan[0].word = seq.words[7];
    plan[0].strategy = MaskStrategy::mlm;
    plan[0].action = MaskAction::mask_token;
    Rng rng(3);
    const TrainingInstance inst = apply_plan(seq, plan, vocab, rng);
    const std::vector<TrainingInstance> data(8, inst);

    ModelConfig mcfg{vocab.size(), 16, 1, 2, 32, 32, 0.0};
    TrainConfig tc;
    tc.total_steps = 150;
    tc.batch_size = 4;
    tc.peak_lr = 2e-3;
    tc.seed = 4;
    const auto result = train(data, mcfg, tc, "", "");

    ProbeItem item;
    item.words = words;
    item.masked_word = 7;
    item.candidate_strings = {"park", "Claire", "Bob"};
    item.gold = 1;
    REQUIRE(disambiguate(result.params, vocab, item) == 1);
}
