#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "corefkit/errors.hpp"
#include "corefkit/mentions.hpp"
#include "corefkit/rng.hpp"
#include "corefkit/tokenizer.hpp"

namespace corefkit {

enum class MaskMode : uint8_t {
    // Classic per-subword masking, masked-LM loss only.
    random_subword,
    // Whole word masking: uniform word selection, all subwords corrupted together.
    wwm,
    // Mention reference masking: word selection favors repeated noun groups,
    // but no copy targets are recorded (masking scheme alone).
    mrm,
    // Mention reference masking plus copy targets with referent sets.
    full,
};

inline const char* mask_mode_name(MaskMode mode) {
    switch (mode) {
        case MaskMode::random_subword: return "random_subword";
        case MaskMode::wwm: return "wwm";
        case MaskMode::mrm: return "mrm";
        case MaskMode::full: return "full";
    }
    return "full";
}

inline MaskMode mask_mode_from_name(std::string_view name) {
    if (name == "random_subword") return MaskMode::random_subword;
    if (name == "wwm") return MaskMode::wwm;
    if (name == "mrm") return MaskMode::mrm;
    if (name == "full") return MaskMode::full;
    throw UsageError("unknown mask mode '" + std::string(name) +
                     "' (expected random_subword, wwm, mrm or full)");
}

enum class MaskStrategy : uint8_t { mrp, mlm };
enum class MaskAction : uint8_t { mask_token, random_token, keep };

struct MaskTarget {
    WordSpan word;
    MaskStrategy strategy = MaskStrategy::mlm;
    MaskAction action = MaskAction::mask_token;
    // Non-empty iff strategy == mrp: the other, still observable occurrences
    // of the same noun group.
    std::vector<WordSpan> referents;
};

struct MaskingConfig {
    double budget_fraction = 0.15;
    // Probability that the next masked word is a mention pick while eligible
    // groups remain; 0.2 realizes the 4:1 MLM:MRP word ratio in expectation.
    double mrp_word_share = 0.2;
    double mask_prob = 0.8;
    double random_prob = 0.1;
    double keep_prob = 0.1;
    MaskMode mode = MaskMode::full;

    void validate() const {
        auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
        if (!in_unit(budget_fraction) || !in_unit(mrp_word_share) || !in_unit(mask_prob) ||
            !in_unit(random_prob) || !in_unit(keep_prob)) {
            throw std::invalid_argument("masking config: fractions must lie in [0, 1]");
        }
        if (std::abs(mask_prob + random_prob + keep_prob - 1.0) > 1e-12) {
            throw std::invalid_argument("masking config: action split must sum to 1");
        }
    }

    // Canonical string, hashed into the shard manifest fingerprint.
    std::string fingerprint_text() const {
        char buf[192];
        std::snprintf(buf, sizeof(buf), "budget=%.17g;mrp=%.17g;actions=%.17g,%.17g,%.17g;mode=%s",
                      budget_fraction, mrp_word_share, mask_prob, random_prob, keep_prob,
                      mask_mode_name(mode));
        return buf;
    }
};

// One copy-prediction target in instance coordinates (cls at position 0).
struct MrpTarget {
    uint16_t start = 0;
    uint16_t end = 0;
    std::vector<std::pair<uint16_t, uint16_t>> referents;
};

// A materialized training example: corrupted ids bracketed by cls/sep,
// per-position masked-LM labels and the copy targets with referent sets.
struct TrainingInstance {
    static constexpr uint32_t ignore_label = 0xffffffffu;

    std::vector<uint32_t> input_ids;  // cls + body + sep
    std::vector<uint32_t> mlm_labels; // original id at corrupted positions, else ignore
    std::vector<MrpTarget> mrp_targets;
    // Word boundaries of the body in instance coordinates; the copy loss
    // normalizes over start/end positions of whole words.
    std::vector<std::pair<uint16_t, uint16_t>> word_spans;
    uint16_t seq_len = 0; // body token count n
    // Whether the source sequence had any repeated-noun group; kept for the
    // conditional masking statistics.
    bool had_eligible_group = false;

    std::size_t length() const { return input_ids.size(); }
};

namespace detail {

inline MaskAction sample_action(const MaskingConfig& cfg, Rng& rng) {
    const double u = rng.uniform01();
    if (u < cfg.mask_prob) {
        return MaskAction::mask_token;
    }
    if (u < cfg.mask_prob + cfg.random_prob) {
        return MaskAction::random_token;
    }
    return MaskAction::keep;
}

} // namespace detail

// Samples which words (or subword tokens) to corrupt. Token budget is
// round(budget_fraction * n); selection stops as soon as the next pick would
// exceed it. Mention picks choose an eligible group uniformly, then one of
// its occurrences uniformly; the group is then consumed and its remaining
// occurrences are reserved so referents stay observable.
inline std::vector<MaskTarget> sample_plan(const TokenizedSequence& seq,
                                           std::span<const MentionGroup> groups,
                                           const MaskingConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<MaskTarget> plan;
    const std::size_t n = seq.token_ids.size();
    const auto budget = static_cast<std::size_t>(std::llround(cfg.budget_fraction * static_cast<double>(n)));
    if (budget == 0 || n == 0) {
        return plan;
    }

    if (cfg.mode == MaskMode::random_subword) {
        // Per-token selection; each token is its own single-position target.
        std::vector<uint32_t> free_positions(n);
        for (std::size_t i = 0; i < n; ++i) {
            free_positions[i] = static_cast<uint32_t>(i);
        }
        std::vector<uint32_t> pos_word(n);
        for (const auto& w : seq.words) {
            for (uint32_t p = w.start; p <= w.end; ++p) {
                pos_word[p] = w.word_index;
            }
        }
        while (plan.size() < budget && !free_positions.empty()) {
            const std::size_t pick = rng.uniform_below(free_positions.size());
            const uint32_t pos = free_positions[pick];
            free_positions[pick] = free_positions.back();
            free_positions.pop_back();
            MaskTarget target;
            target.word = WordSpan{pos_word[pos], pos, pos};
            target.strategy = MaskStrategy::mlm;
            target.action = detail::sample_action(cfg, rng);
            plan.push_back(std::move(target));
        }
        return plan;
    }

    const bool mention_selection = cfg.mode == MaskMode::mrm || cfg.mode == MaskMode::full;
    enum class WordState : uint8_t { free, masked, reserved };
    std::vector<WordState> state(seq.words.size(), WordState::free);

    // Per-group free occurrence lists; a group is dropped once consumed.
    struct GroupState {
        std::size_t group_index;
        std::vector<uint32_t> free_occurrences;
    };
    std::vector<GroupState> group_states;
    std::vector<std::size_t> word_group(seq.words.size(), SIZE_MAX);
    if (mention_selection) {
        for (std::size_t g = 0; g < groups.size(); ++g) {
            group_states.push_back({g, groups[g].occurrences});
            for (uint32_t occ : groups[g].occurrences) {
                word_group[occ] = g;
            }
        }
    }

    std::vector<uint32_t> free_words(seq.words.size());
    for (std::size_t i = 0; i < seq.words.size(); ++i) {
        free_words[i] = static_cast<uint32_t>(i);
    }
    auto remove_free_word = [&](uint32_t word_index) {
        for (std::size_t i = 0; i < free_words.size(); ++i) {
            if (free_words[i] == word_index) {
                free_words[i] = free_words.back();
                free_words.pop_back();
                return;
            }
        }
    };
    auto remove_group_occurrence = [&](uint32_t word_index) {
        const std::size_t g = word_group[word_index];
        if (g == SIZE_MAX) {
            return;
        }
        for (auto& gs : group_states) {
            if (gs.group_index != g) {
                continue;
            }
            std::erase(gs.free_occurrences, word_index);
            return;
        }
    };
    // A group can donate a masked occurrence only if at least one other
    // occurrence remains as referent.
    auto eligible_groups = [&]() {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < group_states.size(); ++i) {
            if (group_states[i].free_occurrences.size() >= 2) {
                out.push_back(i);
            }
        }
        return out;
    };

    std::size_t masked_tokens = 0;
    while (masked_tokens < budget && !free_words.empty()) {
        bool use_mrp = false;
        std::vector<std::size_t> eligible;
        if (mention_selection) {
            eligible = eligible_groups();
            if (!eligible.empty()) {
                use_mrp = rng.uniform01() < cfg.mrp_word_share;
            }
        }

        uint32_t word_index = 0;
        std::size_t chosen_state = SIZE_MAX;
        if (use_mrp) {
            chosen_state = eligible[rng.uniform_below(eligible.size())];
            const auto& occs = group_states[chosen_state].free_occurrences;
            word_index = occs[rng.uniform_below(occs.size())];
        } else {
            word_index = free_words[rng.uniform_below(free_words.size())];
        }

        const WordSpan span = seq.words[word_index];
        if (masked_tokens + span.length() > budget) {
            break;
        }

        MaskTarget target;
        target.word = span;
        target.action = detail::sample_action(cfg, rng);
        target.strategy = MaskStrategy::mlm;
        if (use_mrp) {
            auto& gs = group_states[chosen_state];
            if (cfg.mode == MaskMode::full) {
                target.strategy = MaskStrategy::mrp;
                for (uint32_t occ : gs.free_occurrences) {
                    if (occ != word_index) {
                        target.referents.push_back(seq.words[occ]);
                    }
                }
            }
            // Consume the group; reserve the other occurrences.
            for (uint32_t occ : gs.free_occurrences) {
                if (occ != word_index) {
                    state[occ] = WordState::reserved;
                    remove_free_word(occ);
                }
            }
            gs = group_states.back();
            group_states.pop_back();
        } else {
            remove_group_occurrence(word_index);
        }

        state[word_index] = WordState::masked;
        remove_free_word(word_index);
        masked_tokens += span.length();
        plan.push_back(std::move(target));
    }
    return plan;
}

// Materializes a plan: corrupts the selected positions, records masked-LM
// labels at every covered position and the copy targets in instance
// coordinates (cls prepended at position 0, sep appended).
inline TrainingInstance apply_plan(const TokenizedSequence& seq, std::span<const MaskTarget> plan,
                                   const Vocab& vocab, Rng& rng) {
    const std::size_t n = seq.token_ids.size();
    TrainingInstance inst;
    inst.seq_len = static_cast<uint16_t>(n);
    inst.input_ids.reserve(n + 2);
    inst.input_ids.push_back(Vocab::cls_id);
    inst.input_ids.insert(inst.input_ids.end(), seq.token_ids.begin(), seq.token_ids.end());
    inst.input_ids.push_back(Vocab::sep_id);
    inst.mlm_labels.assign(n + 2, TrainingInstance::ignore_label);
    inst.word_spans.reserve(seq.words.size());
    for (const auto& w : seq.words) {
        inst.word_spans.emplace_back(static_cast<uint16_t>(w.start + 1),
                                     static_cast<uint16_t>(w.end + 1));
    }

    const uint32_t non_special = vocab.size() - Vocab::num_special;
    std::vector<bool> corrupted(n, false);

    for (const auto& target : plan) {
        for (uint32_t pos = target.word.start; pos <= target.word.end; ++pos) {
            const uint32_t inst_pos = pos + 1;
            inst.mlm_labels[inst_pos] = seq.token_ids[pos];
            corrupted[pos] = true;
            switch (target.action) {
                case MaskAction::mask_token:
                    inst.input_ids[inst_pos] = Vocab::mask_id;
                    break;
                case MaskAction::random_token:
                    if (non_special == 0) {
                        throw std::invalid_argument("apply_plan: vocab has no non-special tokens");
                    }
                    inst.input_ids[inst_pos] =
                        Vocab::num_special + static_cast<uint32_t>(rng.uniform_below(non_special));
                    break;
                case MaskAction::keep:
                    break;
            }
        }
    }

    for (const auto& target : plan) {
        if (target.strategy != MaskStrategy::mrp) {
            continue;
        }
        if (target.referents.empty()) {
            throw std::logic_error("apply_plan: mrp target without referents");
        }
        MrpTarget mt;
        mt.start = static_cast<uint16_t>(target.word.start + 1);
        mt.end = static_cast<uint16_t>(target.word.end + 1);
        for (const auto& ref : target.referents) {
            for (uint32_t pos = ref.start; pos <= ref.end; ++pos) {
                if (corrupted[pos]) {
                    throw std::logic_error("apply_plan: referent overlaps a masked word");
                }
            }
            mt.referents.emplace_back(static_cast<uint16_t>(ref.start + 1),
                                      static_cast<uint16_t>(ref.end + 1));
        }
        inst.mrp_targets.push_back(std::move(mt));
    }
    return inst;
}

} // namespace corefkit
