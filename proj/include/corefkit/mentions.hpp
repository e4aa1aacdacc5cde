#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "corefkit/tagger.hpp"

namespace corefkit {

// All occurrences of one noun surface form (case-folded) within a sequence.
// Eligible for mention reference masking when the noun repeats.
struct MentionGroup {
    std::string key;
    std::vector<uint32_t> occurrences; // word indices, strictly increasing

    bool eligible() const { return occurrences.size() >= 2; }
};

// Groups NOUN/PROPN words by case-folded surface form. Pronouns are excluded:
// repeated identical nouns are presumed coreferent, pronouns carry no such
// signal without resolution.
inline std::vector<MentionGroup> detect_mention_groups(std::span<const TaggedWord> tagged) {
    std::vector<MentionGroup> groups;
    std::unordered_map<std::string, std::size_t> slot;
    for (std::size_t i = 0; i < tagged.size(); ++i) {
        const Tag tag = tagged[i].tag;
        if (tag != Tag::NOUN && tag != Tag::PROPN) {
            continue;
        }
        std::string key = ascii_lower(tagged[i].word);
        auto [it, inserted] = slot.emplace(std::move(key), groups.size());
        if (inserted) {
            groups.push_back({it->first, {static_cast<uint32_t>(i)}});
        } else {
            groups[it->second].occurrences.push_back(static_cast<uint32_t>(i));
        }
    }
    return groups;
}

} // namespace corefkit
