// tokenizer.hpp
//
// Byte-level BPE. Ids 0..255 are raw bytes, followed by the special tokens,
// followed by one id per learned merge. Text is not pre-split: whitespace is
// ordinary byte content and merges may span it.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coral/common.hpp"

namespace coral {

inline constexpr std::size_t kByteTokens = 256;
inline constexpr std::size_t kSpecialTokens = 2;
inline constexpr std::string_view kEndOfTextText = "<|endoftext|>";
inline constexpr std::string_view kPadText = "<|pad|>";

struct Vocabulary {
    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, TokenId> token_to_id;
    std::vector<std::pair<TokenId, TokenId>> merges;  // merge i produces id first_merge_id() + i
    TokenId end_of_text = kByteTokens;
    TokenId pad = kByteTokens + 1;

    std::size_t size() const { return id_to_token.size(); }
    TokenId first_merge_id() const { return static_cast<TokenId>(kByteTokens + kSpecialTokens); }
    bool is_special(TokenId id) const { return id == end_of_text || id == pad; }

    // Byte tokens and specials only.
    static Vocabulary base() {
        Vocabulary v;
        for (std::size_t b = 0; b < kByteTokens; ++b) {
            v.add(std::string(1, static_cast<char>(b)));
        }
        v.add(std::string(kEndOfTextText));
        v.add(std::string(kPadText));
        return v;
    }

    TokenId add(std::string token) {
        const auto id = static_cast<TokenId>(id_to_token.size());
        token_to_id.emplace(token, id);
        id_to_token.push_back(std::move(token));
        return id;
    }
};

struct BpeTrainResult {
    Vocabulary vocab;
    bool reached_target = false;  // false when the corpus ran out of repeated pairs
};

namespace detail {

inline std::uint64_t pair_key(TokenId a, TokenId b) { return (std::uint64_t{a} << 32) | b; }

inline std::vector<TokenId> bytes_of(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(c);
    }
    return ids;
}

}  // namespace detail

// Greedy BPE: repeatedly merges the most frequent adjacent pair, ties going to
// the lexicographically smallest (left bytes, right bytes). Stops at the
// target size or when no pair occurs at least twice.
inline BpeTrainResult train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size) {
    if (corpus.empty()) {
        throw ConfigError("train_bpe: empty corpus");
    }
    if (target_vocab_size <= kByteTokens + kSpecialTokens) {
        throw ConfigError("train_bpe: target vocabulary must exceed " + std::to_string(kByteTokens + kSpecialTokens));
    }

    BpeTrainResult result{Vocabulary::base(), false};
    Vocabulary& vocab = result.vocab;

    // Identical strings are merged once and weighted by multiplicity.
    std::map<std::string, std::int64_t> unique;
    for (const auto& s : corpus) {
        ++unique[s];
    }
    std::vector<std::vector<TokenId>> words;
    std::vector<std::int64_t> weights;
    for (const auto& [s, n] : unique) {
        if (s.size() >= 2) {
            words.push_back(detail::bytes_of(s));
            weights.push_back(n);
        }
    }

    std::unordered_map<std::uint64_t, std::int64_t> counts;
    std::unordered_map<std::uint64_t, std::unordered_set<std::size_t>> where;
    auto account = [&](std::size_t w, std::int64_t sign) {
        const auto& ids = words[w];
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            const auto key = detail::pair_key(ids[i], ids[i + 1]);
            counts[key] += sign * weights[w];
            if (sign > 0) {
                where[key].insert(w);
            }
        }
    };
    for (std::size_t w = 0; w < words.size(); ++w) {
        account(w, +1);
    }

    std::unordered_set<std::uint64_t> rejected;
    while (vocab.size() < target_vocab_size) {
        std::uint64_t best = 0;
        std::int64_t best_count = 1;
        for (const auto& [key, n] : counts) {
            if (n < 2 || rejected.contains(key)) {
                continue;
            }
            if (n > best_count) {
                best = key;
                best_count = n;
                continue;
            }
            if (n == best_count) {
                const auto& a1 = vocab.id_to_token[key >> 32];
                const auto& b1 = vocab.id_to_token[key & 0xffffffffU];
                const auto& a2 = vocab.id_to_token[best >> 32];
                const auto& b2 = vocab.id_to_token[best & 0xffffffffU];
                if (std::tie(a1, b1) < std::tie(a2, b2)) {
                    best = key;
                }
            }
        }
        if (best_count < 2) {
            break;
        }
        const auto left = static_cast<TokenId>(best >> 32);
        const auto right = static_cast<TokenId>(best & 0xffffffffU);
        std::string merged = vocab.id_to_token[left] + vocab.id_to_token[right];
        // Distinct merge paths can spell the same bytes; keep ids unique.
        if (vocab.token_to_id.contains(merged)) {
            rejected.insert(best);
            continue;
        }
        const TokenId id = vocab.add(std::move(merged));
        vocab.merges.emplace_back(left, right);

        const auto affected = where[best];
        for (std::size_t w : affected) {
            account(w, -1);
            auto& ids = words[w];
            std::vector<TokenId> next;
            next.reserve(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
                    next.push_back(id);
                    ++i;
                } else {
                    next.push_back(ids[i]);
                }
            }
            ids = std::move(next);
            account(w, +1);
        }
        where.erase(best);
        std::erase_if(counts, [](const auto& kv) { return kv.second <= 0; });
    }
    result.reached_target = vocab.size() == target_vocab_size;
    return result;
}

namespace detail {

inline std::unordered_map<std::uint64_t, std::size_t> merge_ranks(const Vocabulary& vocab) {
    std::unordered_map<std::uint64_t, std::size_t> ranks;
    for (std::size_t i = 0; i < vocab.merges.size(); ++i) {
        ranks.emplace(pair_key(vocab.merges[i].first, vocab.merges[i].second), i);
    }
    return ranks;
}

}  // namespace detail

// Applies merges to the byte sequence in rank order. Never emits specials.
class Encoder {
public:
    explicit Encoder(const Vocabulary& vocab) : vocab_(&vocab), ranks_(detail::merge_ranks(vocab)) {}

    TokenIds encode(std::string_view text) const {
        TokenIds ids = detail::bytes_of(text);
        while (ids.size() >= 2) {
            std::size_t best_rank = SIZE_MAX;
            for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
                auto it = ranks_.find(detail::pair_key(ids[i], ids[i + 1]));
                if (it != ranks_.end() && it->second < best_rank) {
                    best_rank = it->second;
                }
            }
            if (best_rank == SIZE_MAX) {
                break;
            }
            const auto [left, right] = vocab_->merges[best_rank];
            const auto id = static_cast<TokenId>(vocab_->first_merge_id() + best_rank);
            TokenIds next;
            next.reserve(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
                    next.push_back(id);
                    ++i;
                } else {
                    next.push_back(ids[i]);
                }
            }
            ids = std::move(next);
        }
        return ids;
    }

private:
    const Vocabulary* vocab_;
    std::unordered_map<std::uint64_t, std::size_t> ranks_;
};

inline TokenIds encode(const Vocabulary& vocab, std::string_view text) { return Encoder(vocab).encode(text); }

struct DecodeOptions {
    // Text substituted for end-of-text; specials are dropped when unset.
    std::optional<std::string> end_of_text_text;
};

inline std::string decode(const Vocabulary& vocab, std::span<const TokenId> ids, const DecodeOptions& options = {}) {
    std::string out;
    for (TokenId id : ids) {
        if (id >= vocab.size()) {
            throw VocabularyError("decode: id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(vocab.size()));
        }
        if (vocab.is_special(id)) {
            if (id == vocab.end_of_text && options.end_of_text_text) {
                out += *options.end_of_text_text;
            }
            continue;
        }
        out += vocab.id_to_token[id];
    }
    return out;
}

namespace detail {

inline constexpr std::string_view kBase64Alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(std::string_view in) {
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < in.size(); i += 3) {
        const std::uint32_t v = (std::uint32_t(std::uint8_t(in[i])) << 16) | (std::uint32_t(std::uint8_t(in[i + 1])) << 8) |
                                std::uint8_t(in[i + 2]);
        for (int s = 18; s >= 0; s -= 6) {
            out += kBase64Alphabet[(v >> s) & 63];
        }
    }
    const std::size_t rest = in.size() - i;
    if (rest > 0) {
        std::uint32_t v = std::uint32_t(std::uint8_t(in[i])) << 16;
        if (rest == 2) {
            v |= std::uint32_t(std::uint8_t(in[i + 1])) << 8;
        }
        out += kBase64Alphabet[(v >> 18) & 63];
        out += kBase64Alphabet[(v >> 12) & 63];
        out += rest == 2 ? kBase64Alphabet[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

inline std::string base64_decode(std::string_view in) {
    if (in.size() % 4 != 0) {
        throw FormatError("base64: length not a multiple of 4");
    }
    std::string out;
    for (std::size_t i = 0; i < in.size(); i += 4) {
        std::uint32_t v = 0;
        int pad = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            const char c = in[i + k];
            std::uint32_t sextet = 0;
            if (c == '=' && k >= 2 && i + 4 == in.size()) {
                ++pad;
            } else {
                const auto pos = kBase64Alphabet.find(c);
                if (pos == std::string_view::npos || pad > 0) {
                    throw FormatError("base64: invalid character");
                }
                sextet = static_cast<std::uint32_t>(pos);
            }
            v = (v << 6) | sextet;
        }
        out += static_cast<char>((v >> 16) & 0xff);
        if (pad < 2) {
            out += static_cast<char>((v >> 8) & 0xff);
        }
        if (pad < 1) {
            out += static_cast<char>(v & 0xff);
        }
    }
    return out;
}

}  // namespace detail

inline constexpr int kVocabularyFormatVersion = 1;

inline nlohmann::json vocabulary_to_json(const Vocabulary& vocab) {
    nlohmann::json tokens = nlohmann::json::array();
    for (const auto& t : vocab.id_to_token) {
        tokens.push_back(detail::base64_encode(t));
    }
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : vocab.merges) {
        merges.push_back({a, b});
    }
    return {{"version", kVocabularyFormatVersion},
            {"tokens", std::move(tokens)},
            {"merges", std::move(merges)},
            {"specials", {{"end_of_text", vocab.end_of_text}, {"pad", vocab.pad}}}};
}

inline Vocabulary vocabulary_from_json(const nlohmann::json& j) {
    try {
        const int version = j.at("version").get<int>();
        if (version != kVocabularyFormatVersion) {
            throw UnsupportedVersionError("vocabulary: unsupported version " + std::to_string(version));
        }
        Vocabulary v;
        for (const auto& t : j.at("tokens")) {
            const auto id = static_cast<TokenId>(v.id_to_token.size());
            std::string bytes = detail::base64_decode(t.get<std::string>());
            if (!v.token_to_id.emplace(bytes, id).second) {
                throw FormatError("vocabulary: duplicate token at id " + std::to_string(id));
            }
            v.id_to_token.push_back(std::move(bytes));
        }
        v.end_of_text = j.at("specials").at("end_of_text").get<TokenId>();
        v.pad = j.at("specials").at("pad").get<TokenId>();
        if (v.end_of_text != kByteTokens || v.pad != kByteTokens + 1 || v.size() < kByteTokens + kSpecialTokens) {
            throw FormatError("vocabulary: special tokens must follow the 256 byte tokens");
        }
        for (const auto& m : j.at("merges")) {
            v.merges.emplace_back(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
        }
        if (v.merges.size() != v.size() - kByteTokens - kSpecialTokens) {
            throw FormatError("vocabulary: merge count does not match token count");
        }
        for (std::size_t i = 0; i < v.merges.size(); ++i) {
            const auto [a, b] = v.merges[i];
            const std::size_t id = v.first_merge_id() + i;
            if (a >= id || b >= id || v.is_special(a) || v.is_special(b) ||
                v.id_to_token[id] != v.id_to_token[a] + v.id_to_token[b]) {
                throw FormatError("vocabulary: merge " + std::to_string(i) + " inconsistent with its token");
            }
        }
        return v;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("vocabulary: ") + e.what());
    }
}

inline std::string vocabulary_to_string(const Vocabulary& vocab) { return vocabulary_to_json(vocab).dump(); }

// Identifies a vocabulary by the bytes of its serialized form.
inline std::uint64_t vocabulary_hash(const Vocabulary& vocab) { return fnv1a64(vocabulary_to_string(vocab)); }

inline void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FileError("cannot write vocabulary", path.string());
    }
    out << vocabulary_to_string(vocab) << '\n';
}

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileError("cannot read vocabulary", path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("vocabulary " + path.string() + ": " + e.what());
    }
    return vocabulary_from_json(j);
}

}  // namespace coral
