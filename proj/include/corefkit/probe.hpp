#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "corefkit/errors.hpp"
#include "corefkit/masking.hpp"
#include "corefkit/model.hpp"
#include "corefkit/objectives.hpp"
#include "corefkit/tokenizer.hpp"
#include "corefkit/vocab.hpp"

namespace corefkit {

enum class ProbeMode : uint8_t { recovery, disambiguation };

// One probe item. Recovery mode ranks candidate word spans of the passage by
// the copy head; disambiguation mode scores candidate strings by masked-LM
// probability of the substituted fill.
struct ProbeItem {
    std::vector<std::string> words;
    uint32_t masked_word = 0;
    std::vector<uint32_t> candidate_words;       // recovery mode
    std::vector<std::string> candidate_strings;  // disambiguation mode
    uint32_t gold = 0;
};

namespace detail {

inline std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t end = std::min(text.find(sep, pos), text.size());
        parts.emplace_back(text.substr(pos, end - pos));
        pos = end + 1;
        if (end == text.size()) {
            break;
        }
    }
    return parts;
}

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::size_t pos = 0;
    while (pos < text.size()) {
        while (pos < text.size() && text[pos] == ' ') {
            ++pos;
        }
        const std::size_t end = std::min(text.find(' ', pos), text.size());
        if (end > pos) {
            words.emplace_back(text.substr(pos, end - pos));
        }
        pos = end;
    }
    return words;
}

} // namespace detail

// Probe file: one item per line, tab-separated: passage, mask-word-index,
// |-separated candidates (word indices in recovery mode, strings in
// disambiguation mode), gold index.
inline std::vector<ProbeItem> parse_probe_file(const std::filesystem::path& path, ProbeMode mode) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open probe file " + path.string());
    }
    std::vector<ProbeItem> items;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto fields = detail::split(line, '\t');
        if (fields.size() != 4) {
            throw DataError("probe file " + path.string() + " line " + std::to_string(line_no) +
                            ": expected 4 tab-separated fields");
        }
        ProbeItem item;
        item.words = detail::split_words(fields[0]);
        item.masked_word = static_cast<uint32_t>(std::stoul(fields[1]));
        const auto cands = detail::split(fields[2], '|');
        item.gold = static_cast<uint32_t>(std::stoul(fields[3]));
        if (mode == ProbeMode::recovery) {
            for (const auto& c : cands) {
                item.candidate_words.push_back(static_cast<uint32_t>(std::stoul(c)));
            }
            if (item.gold >= item.candidate_words.size()) {
                throw DataError("probe file line " + std::to_string(line_no) +
                                ": gold index out of range");
            }
        } else {
            item.candidate_strings = cands;
            if (item.gold >= item.candidate_strings.size()) {
                throw DataError("probe file line " + std::to_string(line_no) +
                                ": gold index out of range");
            }
        }
        if (item.masked_word >= item.words.size()) {
            throw DataError("probe file line " + std::to_string(line_no) +
                            ": mask word index out of range");
        }
        items.push_back(std::move(item));
    }
    return items;
}

struct Ranking {
    std::vector<std::size_t> order; // candidate indices, best first
    std::vector<double> scores;     // per candidate, in item order
};

// Ranks the item's candidate spans by word-level copy probability with the
// masked word replaced by mask tokens. Ties break toward the lower candidate
// index.
inline Ranking recover_mention(const ModelParams& params, const Vocab& vocab,
                               const ProbeItem& item) {
    if (item.candidate_words.empty()) {
        throw std::invalid_argument("recover_mention: no candidates");
    }
    const TokenizedSequence seq = tokenize(item.words, vocab);
    std::vector<uint32_t> ids;
    ids.reserve(seq.token_ids.size() + 2);
    ids.push_back(Vocab::cls_id);
    ids.insert(ids.end(), seq.token_ids.begin(), seq.token_ids.end());
    ids.push_back(Vocab::sep_id);
    const WordSpan masked = seq.words[item.masked_word];
    for (uint32_t p = masked.start; p <= masked.end; ++p) {
        ids[p + 1] = Vocab::mask_id;
    }

    CandidateSet cset;
    for (std::size_t w = 0; w < seq.words.size(); ++w) {
        if (w == item.masked_word) {
            continue;
        }
        const auto s = static_cast<uint16_t>(seq.words[w].start + 1);
        const auto e = static_cast<uint16_t>(seq.words[w].end + 1);
        cset.words.emplace_back(s, e);
        cset.starts.push_back(s);
        cset.ends.push_back(e);
    }

    for (uint32_t c : item.candidate_words) {
        if (c >= seq.words.size()) {
            throw std::invalid_argument("recover_mention: candidate outside passage");
        }
        if (c == item.masked_word) {
            throw std::invalid_argument("recover_mention: masked span among candidates");
        }
    }

    const EncoderOutput enc = forward(params, ids);
    const std::pair<uint16_t, uint16_t> target{static_cast<uint16_t>(masked.start + 1),
                                               static_cast<uint16_t>(masked.end + 1)};
    Ranking ranking;
    ranking.scores.resize(item.candidate_words.size());
    for (std::size_t i = 0; i < item.candidate_words.size(); ++i) {
        const WordSpan cand = seq.words[item.candidate_words[i]];
        ranking.scores[i] = word_copy_prob(enc.hidden, params.copy_gate, target,
                                           {static_cast<uint16_t>(cand.start + 1),
                                            static_cast<uint16_t>(cand.end + 1)},
                                           cset);
    }
    ranking.order.resize(ranking.scores.size());
    std::iota(ranking.order.begin(), ranking.order.end(), 0);
    std::stable_sort(ranking.order.begin(), ranking.order.end(),
                     [&](std::size_t a, std::size_t b) { return ranking.scores[a] > ranking.scores[b]; });
    return ranking;
}

struct RecoveryReport {
    double accuracy_at_1 = 0.0;
    double mean_reciprocal_rank = 0.0;
    std::size_t items = 0;
};

inline RecoveryReport evaluate_recovery(const ModelParams& params, const Vocab& vocab,
                                        std::span<const ProbeItem> items) {
    RecoveryReport report;
    for (const auto& item : items) {
        const Ranking ranking = recover_mention(params, vocab, item);
        const auto pos = std::find(ranking.order.begin(), ranking.order.end(), item.gold) -
                         ranking.order.begin();
        if (pos == 0) {
            report.accuracy_at_1 += 1.0;
        }
        report.mean_reciprocal_rank += 1.0 / static_cast<double>(pos + 1);
        ++report.items;
    }
    if (report.items > 0) {
        report.accuracy_at_1 /= static_cast<double>(report.items);
        report.mean_reciprocal_rank /= static_cast<double>(report.items);
    }
    return report;
}

// Scores one candidate string: the passage is re-tokenized with the candidate
// substituted for the masked word, the candidate's subword positions are
// masked, and the score is the length-normalized sum of masked-LM
// log-probabilities of the candidate's subwords.
inline double disambiguation_score(const ModelParams& params, const Vocab& vocab,
                                   const ProbeItem& item, const std::string& candidate) {
    const auto cand_words = detail::split_words(candidate);
    if (cand_words.empty()) {
        throw std::invalid_argument("disambiguate: empty candidate string");
    }
    std::vector<std::string> words;
    words.reserve(item.words.size() + cand_words.size() - 1);
    words.insert(words.end(), item.words.begin(), item.words.begin() + item.masked_word);
    words.insert(words.end(), cand_words.begin(), cand_words.end());
    words.insert(words.end(), item.words.begin() + item.masked_word + 1, item.words.end());

    const TokenizedSequence seq = tokenize(words, vocab);
    std::vector<uint32_t> ids;
    ids.reserve(seq.token_ids.size() + 2);
    ids.push_back(Vocab::cls_id);
    ids.insert(ids.end(), seq.token_ids.begin(), seq.token_ids.end());
    ids.push_back(Vocab::sep_id);

    std::vector<std::pair<uint32_t, uint32_t>> masked_positions; // (instance pos, original id)
    for (std::size_t w = item.masked_word; w < item.masked_word + cand_words.size(); ++w) {
        const WordSpan span = seq.words[w];
        for (uint32_t p = span.start; p <= span.end; ++p) {
            masked_positions.emplace_back(p + 1, seq.token_ids[p]);
            ids[p + 1] = Vocab::mask_id;
        }
    }
    if (masked_positions.empty()) {
        throw std::invalid_argument("disambiguate: candidate tokenizes to zero subwords");
    }

    const EncoderOutput enc = forward(params, ids);
    double score = 0.0;
    for (const auto& [pos, id] : masked_positions) {
        const auto log_probs = mlm_log_probs(params, enc.hidden.row(pos));
        score += log_probs[id];
    }
    return score / static_cast<double>(masked_positions.size());
}

// Returns the index of the best-scoring candidate; ties break toward the
// lower index.
inline std::size_t disambiguate(const ModelParams& params, const Vocab& vocab,
                                const ProbeItem& item) {
    if (item.candidate_strings.empty()) {
        throw std::invalid_argument("disambiguate: no candidates");
    }
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t i = 0; i < item.candidate_strings.size(); ++i) {
        const double score = disambiguation_score(params, vocab, item, item.candidate_strings[i]);
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    return best;
}

inline double evaluate_disambiguation(const ModelParams& params, const Vocab& vocab,
                                      std::span<const ProbeItem> items) {
    if (items.empty()) {
        return 0.0;
    }
    std::size_t correct = 0;
    for (const auto& item : items) {
        if (disambiguate(params, vocab, item) == item.gold) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

// Vocabulary-argmax recovery through the masked-LM head: the masked word is
// recovered iff the argmax token at every masked position equals the original
// token. This is the masked-LM counterpart of copy-head recovery.
inline bool mlm_argmax_recovers(const ModelParams& params, const Vocab& vocab,
                                const ProbeItem& item) {
    const TokenizedSequence seq = tokenize(item.words, vocab);
    std::vector<uint32_t> ids;
    ids.reserve(seq.token_ids.size() + 2);
    ids.push_back(Vocab::cls_id);
    ids.insert(ids.end(), seq.token_ids.begin(), seq.token_ids.end());
    ids.push_back(Vocab::sep_id);
    const WordSpan masked = seq.words[item.masked_word];
    for (uint32_t p = masked.start; p <= masked.end; ++p) {
        ids[p + 1] = Vocab::mask_id;
    }
    const EncoderOutput enc = forward(params, ids);
    for (uint32_t p = masked.start; p <= masked.end; ++p) {
        const auto log_probs = mlm_log_probs(params, enc.hidden.row(p + 1));
        const auto best = std::max_element(log_probs.begin(), log_probs.end()) - log_probs.begin();
        if (static_cast<uint32_t>(best) != seq.token_ids[p]) {
            return false;
        }
    }
    return true;
}

inline double evaluate_mlm_argmax_recovery(const ModelParams& params, const Vocab& vocab,
                                           std::span<const ProbeItem> items) {
    if (items.empty()) {
        return 0.0;
    }
    std::size_t correct = 0;
    for (const auto& item : items) {
        if (mlm_argmax_recovers(params, vocab, item)) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

} // namespace corefkit
