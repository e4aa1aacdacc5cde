#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "corefkit/vocab.hpp"

namespace corefkit {

// Contiguous subword span of one word; start/end are inclusive token positions.
struct WordSpan {
    uint32_t word_index = 0;
    uint32_t start = 0;
    uint32_t end = 0;

    uint32_t length() const { return end - start + 1; }
};

struct TokenizedSequence {
    std::vector<uint32_t> token_ids;
    std::vector<WordSpan> words;
    std::vector<std::string> raw_words;

    std::size_t length() const { return token_ids.size(); }
};

// Greedy longest-match-first segmentation of one word. A word with no valid
// segmentation becomes a single unk subword.
inline std::vector<uint32_t> segment_word(std::string_view word, const Vocab& vocab) {
    std::vector<uint32_t> pieces;
    std::size_t pos = 0;
    while (pos < word.size()) {
        const bool initial = pos == 0;
        std::size_t best_len = 0;
        uint32_t best_id = 0;
        for (std::size_t len = word.size() - pos; len >= 1; --len) {
            std::string candidate = initial ? std::string() : std::string(Vocab::continuation);
            candidate.append(word.substr(pos, len));
            auto it = vocab.index.find(candidate);
            if (it != vocab.index.end()) {
                best_len = len;
                best_id = it->second;
                break;
            }
        }
        if (best_len == 0) {
            return {Vocab::unk_id};
        }
        pieces.push_back(best_id);
        pos += best_len;
    }
    if (pieces.empty()) {
        return {Vocab::unk_id};
    }
    return pieces;
}

inline TokenizedSequence tokenize(std::span<const std::string> words, const Vocab& vocab) {
    TokenizedSequence seq;
    seq.raw_words.assign(words.begin(), words.end());
    seq.words.reserve(words.size());
    for (std::size_t w = 0; w < words.size(); ++w) {
        const auto pieces = segment_word(words[w], vocab);
        WordSpan span;
        span.word_index = static_cast<uint32_t>(w);
        span.start = static_cast<uint32_t>(seq.token_ids.size());
        span.end = static_cast<uint32_t>(seq.token_ids.size() + pieces.size() - 1);
        seq.token_ids.insert(seq.token_ids.end(), pieces.begin(), pieces.end());
        seq.words.push_back(span);
    }
    return seq;
}

// Concatenates the span's subwords, stripping continuation markers.
// Round-trips tokenize for in-vocab words.
inline std::string detokenize_word(const WordSpan& span, const TokenizedSequence& seq,
                                   const Vocab& vocab) {
    if (span.start > span.end || span.end >= seq.token_ids.size()) {
        throw std::invalid_argument("detokenize_word: invalid span");
    }
    std::string word;
    for (uint32_t pos = span.start; pos <= span.end; ++pos) {
        std::string_view piece = vocab.entry(seq.token_ids[pos]);
        if (pos > span.start && piece.starts_with(Vocab::continuation)) {
            piece.remove_prefix(Vocab::continuation.size());
        }
        word.append(piece);
    }
    return word;
}

} // namespace corefkit
