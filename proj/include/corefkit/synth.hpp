#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "corefkit/errors.hpp"
#include "corefkit/probe.hpp"
#include "corefkit/rng.hpp"
#include "corefkit/tagger.hpp"

namespace corefkit {

// Templated stories with known entity structure. Every story introduces 2-4
// named entities and repeats each of them at least twice, so the gold
// referent of any masked mention is recoverable from the sentence roles.
struct SynthStory {
    std::vector<TaggedWord> words;
    // Entity name -> word indices of its occurrences.
    std::vector<std::pair<std::string, std::vector<uint32_t>>> entities;
};

namespace synth_detail {

inline const std::vector<std::string>& places() {
    static const std::vector<std::string> v = {
        "park",    "library", "market", "station", "harbor",  "museum",  "bakery",
        "office",  "garden",  "theater", "castle",  "bridge",  "school",  "village",
        "workshop", "orchard", "plaza",  "tavern",  "gallery", "lighthouse",
    };
    return v;
}

inline const std::vector<std::string>& objects() {
    static const std::vector<std::string> v = {
        "book",   "letter", "map",     "coin",   "lantern", "basket", "violin",
        "painting", "ticket", "key",   "scarf",  "camera",  "compass", "journal",
        "umbrella", "kite",  "puzzle", "recipe", "telescope", "medal",
    };
    return v;
}

struct StoryBuilder {
    SynthStory story;
    std::unordered_map<std::string, std::size_t> entity_slot;

    void word(const std::string& w, Tag tag) {
        story.words.push_back({w, tag});
    }

    void entity(const std::string& name) {
        auto [it, inserted] = entity_slot.emplace(name, story.entities.size());
        if (inserted) {
            story.entities.emplace_back(name, std::vector<uint32_t>{});
        }
        story.entities[it->second].second.push_back(static_cast<uint32_t>(story.words.size()));
        story.words.push_back({name, Tag::PROPN});
    }

    void stop() { word(".", Tag::OTHER); }
};

template <typename T>
const T& pick(const std::vector<T>& pool, Rng& rng) {
    return pool[rng.uniform_below(pool.size())];
}

} // namespace synth_detail

inline SynthStory generate_story(Rng& rng) {
    using namespace synth_detail;
    const auto& names = builtin_name_list();
    const std::size_t entity_count = 2 + rng.uniform_below(3);

    std::vector<std::string> cast;
    std::unordered_set<std::size_t> used;
    while (cast.size() < entity_count) {
        const std::size_t i = rng.uniform_below(names.size());
        if (used.insert(i).second) {
            cast.push_back(names[i]);
        }
    }
    const std::string place1 = pick(places(), rng);
    std::string place2 = pick(places(), rng);
    while (place2 == place1) {
        place2 = pick(places(), rng);
    }
    const std::string object1 = pick(objects(), rng);
    std::string object2 = pick(objects(), rng);
    while (object2 == object1) {
        object2 = pick(objects(), rng);
    }

    StoryBuilder b;
    // A met B at the P1 .
    b.entity(cast[0]);
    b.word("met", Tag::VERB);
    b.entity(cast[1]);
    b.word("at", Tag::OTHER);
    b.word("the", Tag::OTHER);
    b.word(place1, Tag::NOUN);
    b.stop();
    // A gave the O1 to B .
    b.entity(cast[0]);
    b.word("gave", Tag::VERB);
    b.word("the", Tag::OTHER);
    b.word(object1, Tag::NOUN);
    b.word("to", Tag::OTHER);
    b.entity(cast[1]);
    b.stop();
    // B thanked A for the O1 .
    b.entity(cast[1]);
    b.word("thanked", Tag::VERB);
    b.entity(cast[0]);
    b.word("for", Tag::OTHER);
    b.word("the", Tag::OTHER);
    b.word(object1, Tag::NOUN);
    b.stop();
    if (entity_count >= 3) {
        // C visited the P2 with A .
        b.entity(cast[2]);
        b.word("visited", Tag::VERB);
        b.word("the", Tag::OTHER);
        b.word(place2, Tag::NOUN);
        b.word("with", Tag::OTHER);
        b.entity(cast[0]);
        b.stop();
        // B showed C the O2 .
        b.entity(cast[1]);
        b.word("showed", Tag::VERB);
        b.entity(cast[2]);
        b.word("the", Tag::OTHER);
        b.word(object2, Tag::NOUN);
        b.stop();
    }
    if (entity_count == 4) {
        // D watched C near the P1 .
        b.entity(cast[3]);
        b.word("watched", Tag::VERB);
        b.entity(cast[2]);
        b.word("near", Tag::OTHER);
        b.word("the", Tag::OTHER);
        b.word(place1, Tag::NOUN);
        b.stop();
        // D joined A at the P2 .
        b.entity(cast[3]);
        b.word("joined", Tag::VERB);
        b.entity(cast[0]);
        b.word("at", Tag::OTHER);
        b.word("the", Tag::OTHER);
        b.word(place2, Tag::NOUN);
        b.stop();
    }
    return b.story;
}

inline std::vector<SynthStory> generate_stories(std::size_t count, Rng& rng) {
    std::vector<SynthStory> stories;
    stories.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        stories.push_back(generate_story(rng));
    }
    return stories;
}

// One sentence per line as word/TAG, a blank line between documents. Stories
// are grouped stories_per_doc at a time so packing yields full-length
// sequences, as with contiguous running text.
inline void write_pretagged(std::ostream& out, std::span<const SynthStory> stories,
                            std::size_t stories_per_doc = 1) {
    if (stories_per_doc == 0) {
        stories_per_doc = 1;
    }
    for (std::size_t s = 0; s < stories.size(); ++s) {
        const auto& story = stories[s];
        bool first = true;
        for (const auto& tw : story.words) {
            if (!first) {
                out << ' ';
            }
            out << tw.word << '/' << tag_name(tw.tag);
            first = false;
            if (tw.word == ".") {
                out << '\n';
                first = true;
            }
        }
        if ((s + 1) % stories_per_doc == 0 || s + 1 == stories.size()) {
            out << '\n';
        }
    }
}

// Builds a recovery probe item from a story: mask one occurrence of an entity
// that repeats, offer one other occurrence of it (gold) plus distractor spans
// with distinct surface forms, shuffled.
inline ProbeItem make_recovery_item(const SynthStory& story, std::size_t num_candidates, Rng& rng) {
    const auto& entity = story.entities[rng.uniform_below(story.entities.size())];
    const auto& occs = entity.second;
    const uint32_t masked = occs[rng.uniform_below(occs.size())];
    std::vector<uint32_t> others;
    for (uint32_t o : occs) {
        if (o != masked) {
            others.push_back(o);
        }
    }
    const uint32_t gold_span = others[rng.uniform_below(others.size())];

    // Distractors: occurrences of other surface forms (entities first, then
    // common nouns), one per surface.
    std::vector<uint32_t> distractor_pool;
    std::unordered_set<std::string> seen{ascii_lower(entity.first)};
    for (const auto& [name, name_occs] : story.entities) {
        if (seen.insert(ascii_lower(name)).second) {
            distractor_pool.push_back(name_occs[rng.uniform_below(name_occs.size())]);
        }
    }
    for (std::size_t w = 0; w < story.words.size(); ++w) {
        const auto& tw = story.words[w];
        if (tw.tag != Tag::NOUN) {
            continue;
        }
        if (seen.insert(ascii_lower(tw.word)).second) {
            distractor_pool.push_back(static_cast<uint32_t>(w));
        }
    }
    if (distractor_pool.size() + 1 < num_candidates) {
        throw std::invalid_argument("make_recovery_item: story too small for candidate count");
    }

    ProbeItem item;
    item.words.reserve(story.words.size());
    for (const auto& tw : story.words) {
        item.words.push_back(tw.word);
    }
    item.masked_word = masked;
    item.candidate_words.push_back(gold_span);
    while (item.candidate_words.size() < num_candidates) {
        const std::size_t i = rng.uniform_below(distractor_pool.size());
        item.candidate_words.push_back(distractor_pool[i]);
        distractor_pool[i] = distractor_pool.back();
        distractor_pool.pop_back();
    }
    // Shuffle candidates; track where the gold span lands.
    for (std::size_t i = item.candidate_words.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_below(i);
        std::swap(item.candidate_words[i - 1], item.candidate_words[j]);
    }
    for (std::size_t i = 0; i < item.candidate_words.size(); ++i) {
        if (item.candidate_words[i] == gold_span) {
            item.gold = static_cast<uint32_t>(i);
            break;
        }
    }
    return item;
}

// Disambiguation item: one non-introducing occurrence of an entity is
// replaced by a pronoun; candidates are the story's entity names.
inline ProbeItem make_disambiguation_item(const SynthStory& story, Rng& rng) {
    const std::size_t which = rng.uniform_below(story.entities.size());
    const auto& entity = story.entities[which];
    const auto& occs = entity.second;
    const uint32_t replaced = occs[1 + rng.uniform_below(occs.size() - 1)];

    ProbeItem item;
    item.words.reserve(story.words.size());
    for (const auto& tw : story.words) {
        item.words.push_back(tw.word);
    }
    item.words[replaced] = "they";
    item.masked_word = replaced;
    for (std::size_t e = 0; e < story.entities.size(); ++e) {
        item.candidate_strings.push_back(story.entities[e].first);
        if (e == which) {
            item.gold = static_cast<uint32_t>(e);
        }
    }
    return item;
}

inline void write_probe_file(std::ostream& out, std::span<const ProbeItem> items, ProbeMode mode) {
    for (const auto& item : items) {
        for (std::size_t w = 0; w < item.words.size(); ++w) {
            if (w > 0) {
                out << ' ';
            }
            out << item.words[w];
        }
        out << '\t' << item.masked_word << '\t';
        if (mode == ProbeMode::recovery) {
            for (std::size_t i = 0; i < item.candidate_words.size(); ++i) {
                if (i > 0) {
                    out << '|';
                }
                out << item.candidate_words[i];
            }
        } else {
            for (std::size_t i = 0; i < item.candidate_strings.size(); ++i) {
                if (i > 0) {
                    out << '|';
                }
                out << item.candidate_strings[i];
            }
        }
        out << '\t' << item.gold << '\n';
    }
}

} // namespace corefkit
