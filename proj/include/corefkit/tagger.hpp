#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "corefkit/errors.hpp"

namespace corefkit {

enum class Tag : uint8_t { NOUN, PROPN, PRON, VERB, ADJ, ADV, OTHER };

struct TaggedWord {
    std::string word;
    Tag tag = Tag::OTHER;
};

inline const char* tag_name(Tag tag) {
    switch (tag) {
        case Tag::NOUN: return "NOUN";
        case Tag::PROPN: return "PROPN";
        case Tag::PRON: return "PRON";
        case Tag::VERB: return "VERB";
        case Tag::ADJ: return "ADJ";
        case Tag::ADV: return "ADV";
        case Tag::OTHER: return "OTHER";
    }
    return "OTHER";
}

inline Tag tag_from_name(std::string_view name) {
    if (name == "NOUN") return Tag::NOUN;
    if (name == "PROPN") return Tag::PROPN;
    if (name == "PRON") return Tag::PRON;
    if (name == "VERB") return Tag::VERB;
    if (name == "ADJ") return Tag::ADJ;
    if (name == "ADV") return Tag::ADV;
    if (name == "OTHER") return Tag::OTHER;
    throw DataError("unknown part-of-speech tag '" + std::string(name) + "'");
}

inline std::string ascii_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

// First-name inventory shared by the heuristic tagger and the synthetic story
// generator.
inline const std::vector<std::string>& builtin_name_list() {
    static const std::vector<std::string> names = {
        "Alice",  "Bob",    "Claire", "David",  "Emma",   "Frank",  "Grace",  "Henry",
        "Irene",  "Jack",   "Karen",  "Liam",   "Mia",    "Noah",   "Olivia", "Peter",
        "Quinn",  "Rosa",   "Sam",    "Tina",   "Uma",    "Victor", "Wendy",  "Xavier",
        "Yara",   "Zane",   "Amber",  "Bruno",  "Carmen", "Derek",  "Elena",  "Felix",
        "Gloria", "Hugo",   "Iris",   "Jonas",  "Kira",   "Lucas",  "Marta",  "Nina",
        "Oscar",  "Paula",  "Ruben",  "Sofia",  "Tomas",  "Ursula", "Vera",   "Walter",
    };
    return names;
}

namespace detail {

inline const std::unordered_set<std::string>& pronoun_set() {
    static const std::unordered_set<std::string> s = {
        "i",   "me",   "my",    "mine",  "you",   "your",  "yours", "he",     "him",
        "his", "she",  "her",   "hers",  "it",    "its",   "we",    "us",     "our",
        "ours", "they", "them", "their", "theirs", "this", "that",  "these",  "those",
        "who", "whom", "whose", "which", "himself", "herself", "itself", "themselves",
        "myself", "yourself", "ourselves", "someone", "anyone", "everyone", "nobody",
    };
    return s;
}

inline const std::unordered_set<std::string>& closed_class_set() {
    static const std::unordered_set<std::string> s = {
        // determiners
        "a", "an", "the", "some", "any", "no", "each", "every", "either", "neither",
        "both", "all", "few", "many", "much", "most", "several", "such",
        // prepositions
        "of", "in", "on", "at", "by", "for", "with", "about", "against", "between",
        "into", "through", "during", "before", "after", "above", "below", "to",
        "from", "up", "down", "out", "off", "over", "under", "near", "behind",
        "beside", "around", "across", "along", "inside", "outside", "toward",
        "upon", "within", "without",
        // conjunctions and particles
        "and", "or", "but", "nor", "so", "yet", "if", "while", "because", "although",
        "though", "unless", "until", "when", "where", "as", "than", "that", "whether",
        "once", "since",
        // misc function words
        "not", "there", "here", "also", "only", "just",
    };
    return s;
}

inline const std::unordered_set<std::string>& auxiliary_set() {
    static const std::unordered_set<std::string> s = {
        "be", "am", "is", "are", "was", "were", "been", "being",
        "have", "has", "had", "having", "do", "does", "did", "doing",
        "will", "would", "shall", "should", "can", "could", "may", "might", "must",
        "go", "goes", "went", "gone", "say", "says", "said", "get", "gets", "got",
        "make", "makes", "made", "see", "sees", "saw", "seen", "take", "takes", "took",
    };
    return s;
}

inline const std::unordered_set<std::string>& adverb_set() {
    static const std::unordered_set<std::string> s = {
        "very", "too", "quite", "rather", "almost", "always", "never", "often",
        "sometimes", "soon", "later", "now", "then", "again", "still", "already",
        "yesterday", "today", "tomorrow", "early", "late", "together", "away",
    };
    return s;
}

inline const std::unordered_set<std::string>& name_set() {
    static const std::unordered_set<std::string> s = [] {
        std::unordered_set<std::string> out;
        for (const auto& n : builtin_name_list()) {
            out.insert(ascii_lower(n));
        }
        return out;
    }();
    return s;
}

inline bool is_capitalized(std::string_view word) {
    return !word.empty() && std::isupper(static_cast<unsigned char>(word[0])) != 0;
}

inline bool is_punctuation(std::string_view word) {
    return !word.empty() &&
           std::all_of(word.begin(), word.end(),
                       [](unsigned char c) { return std::ispunct(c) != 0; });
}

inline bool ends_with_any(std::string_view word, std::span<const std::string_view> suffixes) {
    for (auto suffix : suffixes) {
        if (word.size() > suffix.size() + 1 && word.ends_with(suffix)) {
            return true;
        }
    }
    return false;
}

} // namespace detail

// Heuristic tagger: closed-class lexicon, name list, capitalization, suffix
// rules, default NOUN. Good enough to surface repeated nouns; pre-tagged
// input is the high-fidelity path.
inline std::vector<TaggedWord> tag_words(std::span<const std::string> words) {
    static constexpr std::array<std::string_view, 2> adv_suffixes = {"ly", "ward"};
    static constexpr std::array<std::string_view, 3> verb_suffixes = {"ing", "ed", "ize"};
    static constexpr std::array<std::string_view, 8> adj_suffixes = {
        "ous", "ful", "ive", "able", "ible", "ish", "less", "ic"};

    std::vector<TaggedWord> tagged;
    tagged.reserve(words.size());
    bool sentence_start = true;
    for (const auto& word : words) {
        Tag tag = Tag::NOUN;
        const std::string lower = ascii_lower(word);
        if (detail::is_punctuation(word)) {
            tag = Tag::OTHER;
        } else if (detail::pronoun_set().contains(lower)) {
            tag = Tag::PRON;
        } else if (detail::closed_class_set().contains(lower)) {
            tag = Tag::OTHER;
        } else if (detail::auxiliary_set().contains(lower)) {
            tag = Tag::VERB;
        } else if (detail::adverb_set().contains(lower)) {
            tag = Tag::ADV;
        } else if (detail::name_set().contains(lower)) {
            tag = Tag::PROPN;
        } else if (!sentence_start && detail::is_capitalized(word)) {
            tag = Tag::PROPN;
        } else if (detail::ends_with_any(lower, adv_suffixes)) {
            tag = Tag::ADV;
        } else if (detail::ends_with_any(lower, verb_suffixes)) {
            tag = Tag::VERB;
        } else if (detail::ends_with_any(lower, adj_suffixes)) {
            tag = Tag::ADJ;
        }
        tagged.push_back({word, tag});
        sentence_start = word == "." || word == "!" || word == "?";
    }
    return tagged;
}

// Pre-tagged line format: word/TAG tokens separated by spaces, one sentence
// per line. The tag is taken after the last '/'.
inline std::vector<TaggedWord> parse_tagged_line(std::string_view line) {
    std::vector<TaggedWord> tagged;
    std::size_t pos = 0;
    while (pos < line.size()) {
        while (pos < line.size() && line[pos] == ' ') {
            ++pos;
        }
        if (pos >= line.size()) {
            break;
        }
        const std::size_t end = std::min(line.find(' ', pos), line.size());
        const std::string_view token = line.substr(pos, end - pos);
        const std::size_t slash = token.rfind('/');
        if (slash == std::string_view::npos || slash == 0 || slash + 1 == token.size()) {
            throw DataError("pre-tagged input: token '" + std::string(token) +
                            "' is not of the form word/TAG");
        }
        tagged.push_back({std::string(token.substr(0, slash)),
                          tag_from_name(token.substr(slash + 1))});
        pos = end;
    }
    return tagged;
}

} // namespace corefkit
