#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "corefkit/errors.hpp"
#include "corefkit/hashing.hpp"

namespace corefkit {

// Subword inventory. Ids are dense 0..size-1 and the first five ids are the
// special tokens in fixed order: pad, unk, mask, cls, sep. Non-initial
// subwords carry the "##" continuation prefix.
struct Vocab {
    static constexpr uint32_t pad_id = 0;
    static constexpr uint32_t unk_id = 1;
    static constexpr uint32_t mask_id = 2;
    static constexpr uint32_t cls_id = 3;
    static constexpr uint32_t sep_id = 4;
    static constexpr uint32_t num_special = 5;
    static constexpr std::string_view continuation = "##";

    std::vector<std::string> entries;
    std::unordered_map<std::string, uint32_t> index;

    uint32_t size() const { return static_cast<uint32_t>(entries.size()); }

    bool is_special(uint32_t id) const { return id < num_special; }

    const std::string& entry(uint32_t id) const {
        if (id >= entries.size()) {
            throw std::invalid_argument("vocab: id out of range");
        }
        return entries[id];
    }

    // Returns the id of `piece` or unk_id when absent.
    uint32_t lookup(std::string_view piece) const {
        auto it = index.find(std::string(piece));
        return it == index.end() ? unk_id : it->second;
    }

    bool contains(std::string_view piece) const {
        return index.contains(std::string(piece));
    }

    void add(std::string piece) {
        if (index.contains(piece)) {
            throw std::invalid_argument("vocab: duplicate entry '" + piece + "'");
        }
        index.emplace(piece, static_cast<uint32_t>(entries.size()));
        entries.push_back(std::move(piece));
    }

    // Hash over the entry list; feeds the shard manifest fingerprint.
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& e : entries) {
            h = fnv1a64(e, h);
            h = fnv1a64("\n", h);
        }
        return h;
    }
};

inline Vocab make_vocab_with_specials() {
    Vocab v;
    v.add("[PAD]");
    v.add("[UNK]");
    v.add("[MASK]");
    v.add("[CLS]");
    v.add("[SEP]");
    return v;
}

namespace detail {

// A word as a symbol sequence: first character plain, the rest ##-prefixed.
inline std::vector<std::string> word_to_symbols(std::string_view word) {
    std::vector<std::string> symbols;
    bool first = true;
    std::size_t i = 0;
    while (i < word.size()) {
        // Keep UTF-8 code points intact.
        std::size_t len = 1;
        const auto byte = static_cast<unsigned char>(word[i]);
        if ((byte & 0xe0u) == 0xc0u) {
            len = 2;
        } else if ((byte & 0xf0u) == 0xe0u) {
            len = 3;
        } else if ((byte & 0xf8u) == 0xf0u) {
            len = 4;
        }
        len = std::min(len, word.size() - i);
        std::string sym = first ? "" : std::string(Vocab::continuation);
        sym.append(word.substr(i, len));
        symbols.push_back(std::move(sym));
        i += len;
        first = false;
    }
    return symbols;
}

inline std::string merge_symbols(const std::string& left, const std::string& right) {
    std::string_view r = right;
    if (r.starts_with(Vocab::continuation)) {
        r.remove_prefix(Vocab::continuation.size());
    }
    return left + std::string(r);
}

} // namespace detail

// Frequency-driven subword inventory: start from the per-word symbol
// sequences, repeatedly merge the most frequent adjacent pair (ties broken by
// lexicographically smallest pair) until the target size is reached or no
// pair occurs at least twice. Deterministic given corpus order and size.
inline Vocab build_vocab(const std::vector<std::pair<std::string, uint64_t>>& word_counts,
                         std::size_t target_size) {
    if (word_counts.empty()) {
        throw DataError("build_vocab: empty corpus");
    }

    struct WordEntry {
        std::vector<std::string> symbols;
        uint64_t count;
    };
    std::vector<WordEntry> words;
    words.reserve(word_counts.size());
    for (const auto& [word, count] : word_counts) {
        if (word.empty() || count == 0) {
            continue;
        }
        words.push_back({detail::word_to_symbols(word), count});
    }
    if (words.empty()) {
        throw DataError("build_vocab: empty corpus");
    }

    Vocab vocab = make_vocab_with_specials();
    // Base symbols in order of first appearance.
    for (const auto& w : words) {
        for (const auto& sym : w.symbols) {
            if (!vocab.contains(sym)) {
                vocab.add(sym);
            }
        }
    }
    if (vocab.size() > target_size) {
        std::ostringstream msg;
        msg << "build_vocab: target size " << target_size << " below minimum "
            << vocab.size() << " (specials + base symbols)";
        throw DataError(msg.str());
    }

    while (vocab.size() < target_size) {
        std::map<std::pair<std::string, std::string>, uint64_t> pair_counts;
        for (const auto& w : words) {
            for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
                pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.count;
            }
        }
        // std::map iterates pairs in lexicographic order, so the first maximal
        // entry is the tie-break winner.
        const std::pair<std::string, std::string>* best = nullptr;
        uint64_t best_count = 1; // require count >= 2
        for (const auto& [pair, count] : pair_counts) {
            if (count > best_count) {
                best_count = count;
                best = &pair;
            }
        }
        if (best == nullptr) {
            break;
        }
        const std::string merged = detail::merge_symbols(best->first, best->second);
        for (auto& w : words) {
            std::vector<std::string> next;
            next.reserve(w.symbols.size());
            std::size_t i = 0;
            while (i < w.symbols.size()) {
                if (i + 1 < w.symbols.size() && w.symbols[i] == best->first &&
                    w.symbols[i + 1] == best->second) {
                    next.push_back(merged);
                    i += 2;
                } else {
                    next.push_back(w.symbols[i]);
                    ++i;
                }
            }
            w.symbols = std::move(next);
        }
        if (!vocab.contains(merged)) {
            vocab.add(merged);
        }
    }
    return vocab;
}

// Stream form: whitespace-separated words, counted in encounter order.
inline Vocab build_vocab(std::istream& corpus, std::size_t target_size) {
    std::vector<std::pair<std::string, uint64_t>> counts;
    std::unordered_map<std::string, std::size_t> slot;
    std::string word;
    while (corpus >> word) {
        auto [it, inserted] = slot.emplace(word, counts.size());
        if (inserted) {
            counts.emplace_back(word, 1);
        } else {
            ++counts[it->second].second;
        }
    }
    return build_vocab(counts, target_size);
}

// Vocab file: UTF-8, one subword per line, line number = id; the first five
// lines are the special tokens.
inline void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("save_vocab: cannot open " + path.string());
    }
    for (const auto& e : vocab.entries) {
        out << e << '\n';
    }
}

inline Vocab load_vocab(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("load_vocab: cannot open " + path.string());
    }
    Vocab vocab;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            throw DataError("load_vocab: empty entry at line " +
                            std::to_string(vocab.entries.size() + 1) + " in " + path.string());
        }
        if (vocab.contains(line)) {
            throw DataError("load_vocab: duplicate entry '" + line + "' in " + path.string());
        }
        vocab.add(line);
    }
    if (vocab.size() < Vocab::num_special) {
        throw DataError("load_vocab: fewer than " + std::to_string(Vocab::num_special) +
                        " entries in " + path.string());
    }
    return vocab;
}

} // namespace corefkit
