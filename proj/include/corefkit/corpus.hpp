#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "corefkit/errors.hpp"
#include "corefkit/hashing.hpp"
#include "corefkit/masking.hpp"
#include "corefkit/rng.hpp"
#include "corefkit/tagger.hpp"
#include "corefkit/tokenizer.hpp"
#include "corefkit/vocab.hpp"

namespace corefkit {

// One document: a flat tagged word stream. Packing never crosses document
// boundaries.
struct Document {
    std::vector<TaggedWord> words;
};

// Pre-tagged corpus: one sentence per line as word/TAG tokens; a blank line
// ends the current document.
inline std::vector<Document> read_pretagged(std::istream& in) {
    std::vector<Document> docs;
    Document current;
    std::string line;
    auto flush = [&] {
        if (!current.words.empty()) {
            docs.push_back(std::move(current));
            current = {};
        }
    };
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            flush();
            continue;
        }
        auto sentence = parse_tagged_line(line);
        current.words.insert(current.words.end(), sentence.begin(), sentence.end());
    }
    flush();
    return docs;
}

// Raw text corpus: whitespace tokens, one sentence per line, blank line ends a
// document; the builtin heuristic tagger supplies tags.
inline std::vector<Document> read_raw(std::istream& in) {
    std::vector<Document> docs;
    std::vector<std::string> words;
    std::string line;
    auto flush = [&] {
        if (!words.empty()) {
            Document doc;
            doc.words = tag_words(words);
            docs.push_back(std::move(doc));
            words.clear();
        }
    };
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            flush();
            continue;
        }
        std::size_t pos = 0;
        while (pos < line.size()) {
            while (pos < line.size() && line[pos] == ' ') {
                ++pos;
            }
            const std::size_t end = std::min(line.find(' ', pos), line.size());
            if (end > pos) {
                words.emplace_back(line.substr(pos, end - pos));
            }
            pos = end;
        }
    }
    flush();
    return docs;
}

inline std::vector<Document> read_documents(const std::filesystem::path& path, bool pretagged) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open corpus file " + path.string());
    }
    return pretagged ? read_pretagged(in) : read_raw(in);
}

// A packed sequence plus the per-word tags needed for mention grouping.
struct PackedSequence {
    TokenizedSequence seq;
    std::vector<Tag> tags;
};

// Greedy packing of contiguous text into sequences of up to max_len-2 body
// tokens (cls/sep reserved). With probability 0.10 a sequence is shortened to
// a uniform random total length in [16, max_len]. Words are never split.
inline std::vector<PackedSequence> pack_sequences(std::span<const Document> docs,
                                                  const Vocab& vocab, uint32_t max_len, Rng& rng) {
    if (max_len < 18 || max_len > 65535) {
        throw std::invalid_argument("pack_sequences: max_len must lie in [18, 65535]");
    }
    const uint32_t full_budget = max_len - 2;
    std::vector<PackedSequence> out;
    std::unordered_map<std::string, std::vector<uint32_t>> piece_cache;
    for (const auto& doc : docs) {
        // Tokenize each word once up front.
        std::vector<const std::vector<uint32_t>*> pieces(doc.words.size());
        for (std::size_t w = 0; w < doc.words.size(); ++w) {
            auto [it, inserted] = piece_cache.try_emplace(doc.words[w].word);
            if (inserted) {
                it->second = segment_word(doc.words[w].word, vocab);
            }
            pieces[w] = &it->second;
            if (pieces[w]->size() > full_budget) {
                throw DataError("pack_sequences: word '" + doc.words[w].word +
                                "' does not fit in max_len");
            }
        }
        std::size_t cursor = 0;
        while (cursor < doc.words.size()) {
            uint32_t budget = full_budget;
            if (rng.uniform01() < 0.10) {
                const uint32_t target = 16 + static_cast<uint32_t>(rng.uniform_below(max_len - 16 + 1));
                budget = std::min(budget, target - 2);
            }
            PackedSequence packed;
            uint32_t used = 0;
            while (cursor < doc.words.size()) {
                const auto len = static_cast<uint32_t>(pieces[cursor]->size());
                // A word longer than a shortened budget still goes in alone;
                // every sequence makes progress.
                if (used + len > budget && !packed.seq.words.empty()) {
                    break;
                }
                WordSpan span;
                span.word_index = static_cast<uint32_t>(packed.seq.words.size());
                span.start = used;
                span.end = used + len - 1;
                packed.seq.token_ids.insert(packed.seq.token_ids.end(), pieces[cursor]->begin(),
                                            pieces[cursor]->end());
                packed.seq.words.push_back(span);
                packed.seq.raw_words.push_back(doc.words[cursor].word);
                packed.tags.push_back(doc.words[cursor].tag);
                used += len;
                ++cursor;
                if (used >= budget) {
                    break;
                }
            }
            out.push_back(std::move(packed));
        }
    }
    return out;
}

namespace detail {

inline void put_u16(std::string& buf, uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& buf, uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) {
        buf.push_back(static_cast<char>((v >> shift) & 0xff));
    }
}

struct ByteReader {
    std::string_view bytes;
    std::size_t pos = 0;

    uint16_t u16() {
        if (pos + 2 > bytes.size()) {
            throw DataError("shard record: truncated field");
        }
        const auto v = static_cast<uint16_t>(static_cast<unsigned char>(bytes[pos]) |
                                             (static_cast<unsigned char>(bytes[pos + 1]) << 8));
        pos += 2;
        return v;
    }

    uint32_t u32() {
        if (pos + 4 > bytes.size()) {
            throw DataError("shard record: truncated field");
        }
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }

    uint8_t u8() {
        if (pos + 1 > bytes.size()) {
            throw DataError("shard record: truncated field");
        }
        return static_cast<uint8_t>(bytes[pos++]);
    }
};

inline std::string encode_instance(const TrainingInstance& inst) {
    std::string buf;
    put_u16(buf, inst.seq_len);
    buf.push_back(inst.had_eligible_group ? 1 : 0);
    put_u16(buf, static_cast<uint16_t>(inst.word_spans.size()));
    for (const auto& [s, e] : inst.word_spans) {
        put_u16(buf, s);
        put_u16(buf, e);
    }
    for (uint32_t id : inst.input_ids) {
        put_u32(buf, id);
    }
    for (uint32_t label : inst.mlm_labels) {
        put_u32(buf, label);
    }
    put_u16(buf, static_cast<uint16_t>(inst.mrp_targets.size()));
    for (const auto& t : inst.mrp_targets) {
        put_u16(buf, t.start);
        put_u16(buf, t.end);
        put_u16(buf, static_cast<uint16_t>(t.referents.size()));
        for (const auto& [s, e] : t.referents) {
            put_u16(buf, s);
            put_u16(buf, e);
        }
    }
    return buf;
}

inline TrainingInstance decode_instance(std::string_view payload) {
    ByteReader r{payload};
    TrainingInstance inst;
    inst.seq_len = r.u16();
    inst.had_eligible_group = r.u8() != 0;
    const uint16_t word_count = r.u16();
    inst.word_spans.reserve(word_count);
    for (uint16_t i = 0; i < word_count; ++i) {
        const uint16_t s = r.u16();
        const uint16_t e = r.u16();
        inst.word_spans.emplace_back(s, e);
    }
    const std::size_t total = static_cast<std::size_t>(inst.seq_len) + 2;
    inst.input_ids.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        inst.input_ids.push_back(r.u32());
    }
    inst.mlm_labels.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        inst.mlm_labels.push_back(r.u32());
    }
    const uint16_t target_count = r.u16();
    inst.mrp_targets.reserve(target_count);
    for (uint16_t i = 0; i < target_count; ++i) {
        MrpTarget t;
        t.start = r.u16();
        t.end = r.u16();
        const uint16_t refs = r.u16();
        for (uint16_t j = 0; j < refs; ++j) {
            const uint16_t s = r.u16();
            const uint16_t e = r.u16();
            t.referents.emplace_back(s, e);
        }
        inst.mrp_targets.push_back(std::move(t));
    }
    if (r.pos != payload.size()) {
        throw DataError("shard record: trailing bytes");
    }
    return inst;
}

} // namespace detail

inline constexpr std::string_view shard_magic = "CPK1";
inline constexpr uint16_t shard_version = 1;

// Shard file: magic "CPK1", version u16, then length-prefixed records, each
// followed by a CRC-32 of its payload. All integers little-endian.
inline void write_shard_file(const std::filesystem::path& path,
                             std::span<const TrainingInstance> instances) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open shard file for writing: " + path.string());
    }
    std::string header;
    header.append(shard_magic);
    detail::put_u16(header, shard_version);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& inst : instances) {
        const std::string payload = detail::encode_instance(inst);
        std::string framed;
        detail::put_u32(framed, static_cast<uint32_t>(payload.size()));
        framed += payload;
        detail::put_u32(framed, crc32(payload.data(), payload.size()));
        out.write(framed.data(), static_cast<std::streamsize>(framed.size()));
    }
    if (!out) {
        throw DataError("failed writing shard file: " + path.string());
    }
}

inline std::vector<TrainingInstance> read_shard_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open shard file: " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < shard_magic.size() + 2 ||
        std::string_view(bytes).substr(0, shard_magic.size()) != shard_magic) {
        throw DataError("shard file " + path.string() + ": bad magic");
    }
    const auto version = static_cast<uint16_t>(static_cast<unsigned char>(bytes[4]) |
                                               (static_cast<unsigned char>(bytes[5]) << 8));
    if (version != shard_version) {
        throw DataError("shard file " + path.string() + ": version mismatch (got " +
                        std::to_string(version) + ", expected " + std::to_string(shard_version) + ")");
    }
    std::vector<TrainingInstance> instances;
    std::size_t pos = 6;
    while (pos < bytes.size()) {
        if (pos + 4 > bytes.size()) {
            throw DataError("shard file " + path.string() + ": truncated record");
        }
        uint32_t len = 0;
        for (int i = 0; i < 4; ++i) {
            len |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        }
        pos += 4;
        if (pos + len + 4 > bytes.size()) {
            throw DataError("shard file " + path.string() + ": truncated record");
        }
        const std::string_view payload(bytes.data() + pos, len);
        pos += len;
        uint32_t stored_crc = 0;
        for (int i = 0; i < 4; ++i) {
            stored_crc |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        }
        pos += 4;
        if (crc32(payload.data(), payload.size()) != stored_crc) {
            throw DataError("shard file " + path.string() + ": checksum mismatch");
        }
        instances.push_back(detail::decode_instance(payload));
    }
    return instances;
}

struct ShardManifest {
    struct Entry {
        std::string path; // relative to the manifest directory
        uint64_t count = 0;
    };

    uint64_t master_seed = 0;
    uint64_t config_fingerprint = 0;
    uint64_t vocab_hash = 0;
    uint32_t max_len = 0;
    std::string mode;
    std::vector<Entry> shards;

    uint64_t total_instances() const {
        uint64_t total = 0;
        for (const auto& s : shards) {
            total += s.count;
        }
        return total;
    }
};

inline uint64_t config_fingerprint(const MaskingConfig& cfg, const Vocab& vocab) {
    const uint64_t h = fnv1a64(cfg.fingerprint_text());
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(vocab.content_hash()));
    return fnv1a64(buf, h);
}

inline constexpr std::string_view manifest_filename = "manifest.txt";

inline void save_manifest(const ShardManifest& manifest, const std::filesystem::path& dir) {
    std::ofstream out(dir / manifest_filename, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write manifest in " + dir.string());
    }
    char hex[32];
    out << "format=CPK1\n";
    out << "version=" << shard_version << "\n";
    out << "master_seed=" << manifest.master_seed << "\n";
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(manifest.config_fingerprint));
    out << "config_fingerprint=" << hex << "\n";
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(manifest.vocab_hash));
    out << "vocab_hash=" << hex << "\n";
    out << "max_len=" << manifest.max_len << "\n";
    out << "mode=" << manifest.mode << "\n";
    out << "shard_count=" << manifest.shards.size() << "\n";
    out << "total_instances=" << manifest.total_instances() << "\n";
    for (std::size_t i = 0; i < manifest.shards.size(); ++i) {
        out << "shard." << i << ".path=" << manifest.shards[i].path << "\n";
        out << "shard." << i << ".count=" << manifest.shards[i].count << "\n";
    }
}

inline ShardManifest load_manifest(const std::filesystem::path& dir) {
    const auto path = dir / manifest_filename;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open manifest " + path.string());
    }
    std::unordered_map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw DataError("manifest " + path.string() + ": malformed line '" + line + "'");
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) {
            throw DataError("manifest " + path.string() + ": missing key '" + key + "'");
        }
        return it->second;
    };
    if (need("format") != "CPK1") {
        throw DataError("manifest " + path.string() + ": unknown format");
    }
    ShardManifest m;
    m.master_seed = std::stoull(need("master_seed"));
    m.config_fingerprint = std::stoull(need("config_fingerprint"), nullptr, 16);
    m.vocab_hash = std::stoull(need("vocab_hash"), nullptr, 16);
    m.max_len = static_cast<uint32_t>(std::stoul(need("max_len")));
    m.mode = need("mode");
    const std::size_t shard_count = std::stoul(need("shard_count"));
    for (std::size_t i = 0; i < shard_count; ++i) {
        ShardManifest::Entry entry;
        entry.path = need("shard." + std::to_string(i) + ".path");
        entry.count = std::stoull(need("shard." + std::to_string(i) + ".count"));
        m.shards.push_back(std::move(entry));
    }
    return m;
}

// Masks the packed sequences and writes them out as shards plus a manifest.
// Every sequence derives its own rng stream from (master seed, shard index,
// local index), so the worker count never changes the bytes.
inline ShardManifest preprocess_to_shards(std::span<const PackedSequence> packed,
                                          const Vocab& vocab, const MaskingConfig& cfg,
                                          uint64_t master_seed, const std::filesystem::path& dir,
                                          std::size_t shard_size, uint32_t max_len,
                                          unsigned workers = 1) {
    cfg.validate();
    if (shard_size == 0) {
        throw std::invalid_argument("preprocess_to_shards: shard_size must be positive");
    }
    std::filesystem::create_directories(dir);
    const std::size_t shard_count = packed.empty() ? 0 : (packed.size() + shard_size - 1) / shard_size;

    ShardManifest manifest;
    manifest.master_seed = master_seed;
    manifest.config_fingerprint = config_fingerprint(cfg, vocab);
    manifest.vocab_hash = vocab.content_hash();
    manifest.max_len = max_len;
    manifest.mode = mask_mode_name(cfg.mode);
    manifest.shards.resize(shard_count);

    auto build_shard = [&](std::size_t shard_index) {
        const std::size_t begin = shard_index * shard_size;
        const std::size_t end = std::min(begin + shard_size, packed.size());
        const uint64_t shard_seed = derive_seed(master_seed, shard_index);
        std::vector<TrainingInstance> instances;
        instances.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
            const PackedSequence& ps = packed[i];
            std::vector<TaggedWord> tagged(ps.seq.raw_words.size());
            for (std::size_t w = 0; w < tagged.size(); ++w) {
                tagged[w] = {ps.seq.raw_words[w], ps.tags[w]};
            }
            const auto groups = detect_mention_groups(tagged);
            Rng rng(derive_seed(shard_seed, i - begin));
            const auto plan = sample_plan(ps.seq, groups, cfg, rng);
            TrainingInstance inst = apply_plan(ps.seq, plan, vocab, rng);
            inst.had_eligible_group =
                std::any_of(groups.begin(), groups.end(), [](const auto& g) { return g.eligible(); });
            instances.push_back(std::move(inst));
        }
        char name[32];
        std::snprintf(name, sizeof(name), "shard-%05zu.cpk", shard_index);
        write_shard_file(dir / name, instances);
        manifest.shards[shard_index] = {name, instances.size()};
    };

    if (workers <= 1 || shard_count <= 1) {
        for (std::size_t s = 0; s < shard_count; ++s) {
            build_shard(s);
        }
    } else {
        std::vector<std::thread> threads;
        std::atomic<std::size_t> next{0};
        const unsigned thread_count = std::min<std::size_t>(workers, shard_count);
        for (unsigned t = 0; t < thread_count; ++t) {
            threads.emplace_back([&] {
                for (std::size_t s = next.fetch_add(1); s < shard_count; s = next.fetch_add(1)) {
                    build_shard(s);
                }
            });
        }
        for (auto& th : threads) {
            th.join();
        }
    }
    save_manifest(manifest, dir);
    return manifest;
}

// Loads every instance in manifest order, validating per-shard counts.
inline std::vector<TrainingInstance> read_shards(const ShardManifest& manifest,
                                                 const std::filesystem::path& dir) {
    std::vector<TrainingInstance> all;
    for (const auto& entry : manifest.shards) {
        auto instances = read_shard_file(dir / entry.path);
        if (instances.size() != entry.count) {
            throw DataError("shard " + entry.path + ": instance count " +
                            std::to_string(instances.size()) + " does not match manifest (" +
                            std::to_string(entry.count) + ")");
        }
        for (auto& inst : instances) {
            all.push_back(std::move(inst));
        }
    }
    return all;
}

} // namespace corefkit
