#pragma once

#include <cstdint>
#include <span>

#include "corefkit/masking.hpp"

namespace corefkit {

// Measured masking statistics over materialized instances. Actions are
// recovered per position: mask id -> MaskToken, id equal to the label ->
// Keep, anything else -> RandomToken.
struct MaskingStats {
    uint64_t sequences = 0;
    uint64_t sequences_with_eligible_group = 0;
    uint64_t body_tokens = 0;
    uint64_t labeled_positions = 0;
    uint64_t action_mask = 0;
    uint64_t action_random = 0;
    uint64_t action_keep = 0;
    uint64_t masked_words = 0;
    uint64_t mrp_targets = 0;
    // Restricted to sequences that had at least one eligible group.
    uint64_t masked_words_eligible = 0;
    uint64_t mrp_targets_eligible = 0;

    double masked_fraction() const {
        return body_tokens == 0 ? 0.0
                                : static_cast<double>(labeled_positions) /
                                      static_cast<double>(body_tokens);
    }
    double mask_fraction() const {
        return labeled_positions == 0 ? 0.0
                                      : static_cast<double>(action_mask) /
                                            static_cast<double>(labeled_positions);
    }
    double random_fraction() const {
        return labeled_positions == 0 ? 0.0
                                      : static_cast<double>(action_random) /
                                            static_cast<double>(labeled_positions);
    }
    double keep_fraction() const {
        return labeled_positions == 0 ? 0.0
                                      : static_cast<double>(action_keep) /
                                            static_cast<double>(labeled_positions);
    }
    // Share of masked words carrying a copy target, among sequences that had
    // an eligible group.
    double mrp_word_share() const {
        return masked_words_eligible == 0 ? 0.0
                                          : static_cast<double>(mrp_targets_eligible) /
                                                static_cast<double>(masked_words_eligible);
    }
    double mlm_to_mrp_ratio() const {
        return mrp_targets_eligible == 0
                   ? 0.0
                   : static_cast<double>(masked_words_eligible - mrp_targets_eligible) /
                         static_cast<double>(mrp_targets_eligible);
    }
};

inline MaskingStats measure_masking(std::span<const TrainingInstance> instances) {
    MaskingStats stats;
    for (const auto& inst : instances) {
        ++stats.sequences;
        stats.body_tokens += inst.seq_len;
        if (inst.had_eligible_group) {
            ++stats.sequences_with_eligible_group;
        }
        for (std::size_t p = 0; p < inst.input_ids.size(); ++p) {
            const uint32_t label = inst.mlm_labels[p];
            if (label == TrainingInstance::ignore_label) {
                continue;
            }
            ++stats.labeled_positions;
            if (inst.input_ids[p] == Vocab::mask_id) {
                ++stats.action_mask;
            } else if (inst.input_ids[p] == label) {
                ++stats.action_keep;
            } else {
                ++stats.action_random;
            }
        }
        uint64_t words_here = 0;
        for (const auto& [s, e] : inst.word_spans) {
            for (uint16_t p = s; p <= e; ++p) {
                if (inst.mlm_labels[p] != TrainingInstance::ignore_label) {
                    ++words_here;
                    break;
                }
            }
        }
        stats.masked_words += words_here;
        stats.mrp_targets += inst.mrp_targets.size();
        if (inst.had_eligible_group) {
            stats.masked_words_eligible += words_here;
            stats.mrp_targets_eligible += inst.mrp_targets.size();
        }
    }
    return stats;
}

} // namespace corefkit
