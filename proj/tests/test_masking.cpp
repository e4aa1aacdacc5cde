#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <unordered_set>
#include <vector>

#include "corefkit/masking.hpp"
#include "corefkit/mentions.hpp"
#include "corefkit/rng.hpp"
#include "corefkit/synth.hpp"
#include "corefkit/tokenizer.hpp"
#include "corefkit/vocab.hpp"

using namespace corefkit;

namespace {

Vocab whole_word_vocab(const std::vector<std::string>& words) {
    Vocab vocab = make_vocab_with_specials();
    std::unordered_set<std::string> seen;
    for (const auto& w : words) {
        if (seen.insert(w).second) {
            vocab.add(w);
        }
    }
    return vocab;
}

struct StoryFixture {
    TokenizedSequence seq;
    std::vector<MentionGroup> groups;
    Vocab vocab;
};

StoryFixture make_story_fixture(const SynthStory& story) {
    StoryFixture fx;
    std::vector<std::string> words;
    for (const auto& tw : story.words) {
        words.push_back(tw.word);
    }
    fx.vocab = whole_word_vocab(words);
    fx.seq = tokenize(words, fx.vocab);
    fx.groups = detect_mention_groups(story.words);
    return fx;
}

} // namespace

TEST_CASE("repeated mention is masked with its referent recorded", "[masking]") {
    const std::vector<std::string> words = {"Claire", "defense", "Claire"};
    const Vocab vocab = whole_word_vocab(words);
    const auto seq = tokenize(words, vocab);
    const std::vector<TaggedWord> tagged = {
        {"Claire", Tag::PROPN}, {"defense", Tag::NOUN}, {"Claire", Tag::PROPN}};
    const auto groups = detect_mention_groups(tagged);

    MaskingConfig cfg;
    cfg.budget_fraction = 0.67; // budget = 2 of 3 tokens
    cfg.mrp_word_share = 1.0;
    cfg.mode = MaskMode::full;

    Rng rng(7);
    const auto plan = sample_plan(seq, groups, cfg, rng);
    REQUIRE(plan.size() == 2);

    const auto& mention = plan[0];
    REQUIRE(mention.strategy == MaskStrategy::mrp);
    REQUIRE((mention.word.word_index == 0 || mention.word.word_index == 2));
    REQUIRE(mention.referents.size() == 1);
    REQUIRE(mention.referents[0].word_index == 2 - mention.word.word_index);

    // The other Claire is reserved, so the MLM pick must be "defense".
    const auto& plain = plan[1];
    REQUIRE(plain.strategy == MaskStrategy::mlm);
    REQUIRE(plain.word.word_index == 1);
    REQUIRE(plain.referents.empty());
}

TEST_CASE("token budget is maximal under the stop rule", "[masking]") {
    std::vector<std::string> words(20, "w");
    const Vocab vocab = whole_word_vocab(words);
    const auto seq = tokenize(words, vocab);
    MaskingConfig cfg; // defaults: 0.15 budget
    for (uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const auto plan = sample_plan(seq, {}, cfg, rng);
        std::size_t masked = 0;
        for (const auto& t : plan) {
            masked += t.word.length();
        }
        REQUIRE(masked == 3); // round(0.15 * 20), single-token words fill it exactly
    }
}

TEST_CASE("action split and mention share match the sampling design", "[masking][montecarlo]") {
    Rng story_rng(20240815);
    MaskingConfig cfg; // full mode defaults
    uint64_t action_counts[3] = {0, 0, 0};
    uint64_t masked_words = 0;
    uint64_t mrp_words = 0;
    for (int i = 0; i < 10000; ++i) {
        const SynthStory story = generate_story(story_rng);
        const auto fx = make_story_fixture(story);
        Rng rng(derive_seed(123, static_cast<uint64_t>(i)));
        const auto plan = sample_plan(fx.seq, fx.groups, cfg, rng);
        for (const auto& target : plan) {
            ++action_counts[static_cast<int>(target.action)];
            ++masked_words;
            if (target.strategy == MaskStrategy::mrp) {
                ++mrp_words;
            }
        }
    }
    const double total = static_cast<double>(masked_words);
    REQUIRE_THAT(action_counts[0] / total, Catch::Matchers::WithinAbs(0.80, 0.01));
    REQUIRE_THAT(action_counts[1] / total, Catch::Matchers::WithinAbs(0.10, 0.01));
    REQUIRE_THAT(action_counts[2] / total, Catch::Matchers::WithinAbs(0.10, 0.01));
    // Every synthetic story has an eligible group.
    REQUIRE_THAT(mrp_words / total, Catch::Matchers::WithinAbs(0.20, 0.02));
}

TEST_CASE("empty plan materializes the original sequence", "[masking]") {
    const std::vector<std::string> words = {"a", "b", "c"};
    const Vocab vocab = whole_word_vocab(words);
    const auto seq = tokenize(words, vocab);
    Rng rng(1);
    const auto inst = apply_plan(seq, {}, vocab, rng);
    REQUIRE(inst.seq_len == 3);
    REQUIRE(inst.input_ids.size() == 5);
    REQUIRE(inst.input_ids.front() == Vocab::cls_id);
    REQUIRE(inst.input_ids.back() == Vocab::sep_id);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(inst.input_ids[i + 1] == seq.token_ids[i]);
        REQUIRE(inst.mlm_labels[i + 1] == TrainingInstance::ignore_label);
    }
    REQUIRE(inst.mrp_targets.empty());
    REQUIRE(inst.word_spans.size() == 3);
}

TEST_CASE("mask action places mask ids and labels", "[masking]") {
    const std::vector<std::string> words = {"Claire", "won"};
    const Vocab vocab = whole_word_vocab(words);
    const auto seq = tokenize(words, vocab);
    std::vector<MaskTarget> plan(1);
    plan[0].word = seq.words[0];
    plan[0].strategy = MaskStrategy::mlm;
    plan[0].action = MaskAction::mask_token;
    Rng rng(3);
    const auto inst = apply_plan(seq, plan, vocab, rng);
    REQUIRE(inst.input_ids[1] == Vocab::mask_id);
    REQUIRE(inst.mlm_labels[1] == vocab.lookup("Claire"));
    REQUIRE(inst.mlm_labels[2] == TrainingInstance::ignore_label);
}

TEST_CASE("keep action labels all subwords without corruption", "[masking]") {
    Vocab vocab = make_vocab_with_specials();
    vocab.add("un");
    vocab.add("##happi");
    vocab.add("##ness");
    const auto seq = tokenize(std::vector<std::string>{"unhappiness"}, vocab);
    REQUIRE(seq.words[0].length() == 3);
    std::vector<MaskTarget> plan(1);
    plan[0].word = seq.words[0];
    plan[0].strategy = MaskStrategy::mlm;
    plan[0].action = MaskAction::keep;
    Rng rng(5);
    const auto inst = apply_plan(seq, plan, vocab, rng);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(inst.input_ids[i + 1] == seq.token_ids[i]);
        REQUIRE(inst.mlm_labels[i + 1] == seq.token_ids[i]);
    }
}

TEST_CASE("random replacements never draw special tokens", "[masking]") {
    const std::vector<std::string> words = {"x", "y", "z", "w", "v"};
    const Vocab vocab = whole_word_vocab(words);
    const auto seq = tokenize(words, vocab);
    MaskingConfig cfg;
    cfg.budget_fraction = 1.0;
    cfg.mask_prob = 0.0;
    cfg.random_prob = 1.0;
    cfg.keep_prob = 0.0;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        Rng rng(seed);
        const auto plan = sample_plan(seq, {}, cfg, rng);
        Rng rng2(seed + 1000);
        const auto inst = apply_plan(seq, plan, vocab, rng2);
        for (std::size_t p = 1; p + 1 < inst.input_ids.size(); ++p) {
            REQUIRE(inst.mlm_labels[p] != TrainingInstance::ignore_label);
            REQUIRE(inst.input_ids[p] >= Vocab::num_special);
        }
    }
}

TEST_CASE("referent positions are never corrupted", "[masking][property]") {
    Rng story_rng(555);
    MaskingConfig cfg;
    for (int i = 0; i < 300; ++i) {
        const SynthStory story = generate_story(story_rng);
        const auto fx = make_story_fixture(story);
        Rng rng(derive_seed(77, static_cast<uint64_t>(i)));
        const auto plan = sample_plan(fx.seq, fx.groups, cfg, rng);
        const auto inst = apply_plan(fx.seq, plan, fx.vocab, rng);
        for (const auto& target : inst.mrp_targets) {
            REQUIRE_FALSE(target.referents.empty());
            for (const auto& [s, e] : target.referents) {
                for (uint16_t p = s; p <= e; ++p) {
                    REQUIRE(inst.input_ids[p] == fx.seq.token_ids[p - 1]);
                    REQUIRE(inst.mlm_labels[p] == TrainingInstance::ignore_label);
                }
            }
        }
        // Budget: labeled positions match round(0.15 n) up to one word.
        std::size_t labeled = 0;
        for (uint32_t label : inst.mlm_labels) {
            labeled += label != TrainingInstance::ignore_label ? 1 : 0;
        }
        const auto budget =
            static_cast<std::size_t>(std::llround(cfg.budget_fraction * fx.seq.length()));
        REQUIRE(labeled <= budget);
        std::size_t max_word = 0;
        for (const auto& w : fx.seq.words) {
            max_word = std::max<std::size_t>(max_word, w.length());
        }
        REQUIRE(budget - labeled <= max_word);
    }
}

TEST_CASE("wwm mode never produces copy targets", "[masking]") {
    Rng story_rng(9);
    MaskingConfig cfg;
    cfg.mode = MaskMode::wwm;
    for (int i = 0; i < 50; ++i) {
        const SynthStory story = generate_story(story_rng);
        const auto fx = make_story_fixture(story);
        Rng rng(i);
        const auto plan = sample_plan(fx.seq, fx.groups, cfg, rng);
        for (const auto& target : plan) {
            REQUIRE(target.strategy == MaskStrategy::mlm);
            REQUIRE(target.referents.empty());
        }
    }
}

TEST_CASE("mrm mode selects mentions but records no referents", "[masking]") {
    Rng story_rng(10);
    MaskingConfig cfg;
    cfg.mode = MaskMode::mrm;
    for (int i = 0; i < 50; ++i) {
        const SynthStory story = generate_story(story_rng);
        const auto fx = make_story_fixture(story);
        Rng rng(i);
        const auto plan = sample_plan(fx.seq, fx.groups, cfg, rng);
        Rng rng2(i);
        const auto inst = apply_plan(fx.seq, plan, fx.vocab, rng2);
        REQUIRE(inst.mrp_targets.empty());
    }
}

TEST_CASE("random_subword mode reproduces classic token masking", "[masking]") {
    std::vector<std::string> words;
    for (int i = 0; i < 40; ++i) {
        words.push_back(i % 2 == 0 ? "alpha" : "beta");
    }
    const Vocab vocab = whole_word_vocab(words);
    const auto seq = tokenize(words, vocab);
    MaskingConfig cfg;
    cfg.mode = MaskMode::random_subword;
    Rng rng(11);
    const auto plan = sample_plan(seq, {}, cfg, rng);
    REQUIRE(plan.size() == 6); // round(0.15 * 40), one token per target
    std::unordered_set<uint32_t> positions;
    for (const auto& target : plan) {
        REQUIRE(target.word.length() == 1);
        REQUIRE(target.strategy == MaskStrategy::mlm);
        REQUIRE(positions.insert(target.word.start).second);
    }
}

TEST_CASE("plans are deterministic per seed", "[masking]") {
    Rng story_rng(12);
    const SynthStory story = generate_story(story_rng);
    const auto fx = make_story_fixture(story);
    MaskingConfig cfg;
    auto render = [&](uint64_t seed) {
        Rng rng(seed);
        const auto plan = sample_plan(fx.seq, fx.groups, cfg, rng);
        std::string repr;
        for (const auto& t : plan) {
            repr += std::to_string(t.word.word_index) + ":" +
                    std::to_string(static_cast<int>(t.strategy)) +
                    std::to_string(static_cast<int>(t.action)) + ";";
            for (const auto& r : t.referents) {
                repr += std::to_string(r.word_index) + ",";
            }
        }
        return repr;
    };
    REQUIRE(render(42) == render(42));
    REQUIRE(render(42) != render(43)); // overwhelmingly likely
}

TEST_CASE("a plan whose referent overlaps a masked word is rejected", "[masking]") {
    const std::vector<std::string> words = {"Claire", "met", "Claire"};
    const Vocab vocab = whole_word_vocab(words);
    const auto seq = tokenize(words, vocab);
    std::vector<MaskTarget> plan(2);
    plan[0].word = seq.words[0];
    plan[0].strategy = MaskStrategy::mrp;
    plan[0].action = MaskAction::mask_token;
    plan[0].referents = {seq.words[2]};
    plan[1].word = seq.words[2]; // corrupts the referent of plan[0]
    plan[1].strategy = MaskStrategy::mlm;
    plan[1].action = MaskAction::mask_token;
    Rng rng(1);
    REQUIRE_THROWS_WITH(apply_plan(seq, plan, vocab, rng),
                        Catch::Matchers::ContainsSubstring("referent overlaps"));

    std::vector<MaskTarget> no_refs(1);
    no_refs[0].word = seq.words[0];
    no_refs[0].strategy = MaskStrategy::mrp;
    no_refs[0].action = MaskAction::mask_token;
    REQUIRE_THROWS_WITH(apply_plan(seq, no_refs, vocab, rng),
                        Catch::Matchers::ContainsSubstring("without referents"));
}

TEST_CASE("masking config validation", "[masking]") {
    MaskingConfig cfg;
    cfg.mask_prob = 0.5;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = MaskingConfig{};
    cfg.budget_fraction = 1.5;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}
