// generation.hpp
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "coral/common.hpp"
#include "coral/dialogue.hpp"
#include "coral/model.hpp"
#include "coral/random.hpp"
#include "coral/tensor.hpp"
#include "coral/tokenizer.hpp"

namespace coral {

enum class DecodeStrategy { greedy, top_k };

inline std::string to_string(DecodeStrategy s) { return s == DecodeStrategy::greedy ? "greedy" : "top_k"; }

inline DecodeStrategy decode_strategy_from_string(std::string_view s) {
    if (s == "greedy") {
        return DecodeStrategy::greedy;
    }
    if (s == "top_k") {
        return DecodeStrategy::top_k;
    }
    throw ConfigError("unknown decode strategy '" + std::string(s) + "'");
}

struct DecodeConfig {
    DecodeStrategy strategy = DecodeStrategy::top_k;
    std::size_t top_k = 40;
    double temperature = 0.9;
    std::size_t max_new_tokens = 64;
    std::uint64_t seed = 0;

    static DecodeConfig greedy(std::size_t max_new_tokens = 64) {
        DecodeConfig c;
        c.strategy = DecodeStrategy::greedy;
        c.max_new_tokens = max_new_tokens;
        return c;
    }

    void validate(std::size_t vocab_size) const {
        if (strategy == DecodeStrategy::top_k && (top_k < 1 || top_k > vocab_size)) {
            throw ConfigError("decode: top_k must lie in [1, vocab_size]");
        }
        if (!(temperature > 0.0)) {
            throw ConfigError("decode: temperature must be positive");
        }
        if (max_new_tokens < 1) {
            throw ConfigError("decode: max_new_tokens must be at least 1");
        }
    }
};

inline void to_json(nlohmann::json& j, const DecodeConfig& c) {
    j = nlohmann::json{{"strategy", to_string(c.strategy)},
                       {"top_k", c.top_k},
                       {"temperature", c.temperature},
                       {"max_new_tokens", c.max_new_tokens},
                       {"seed", c.seed}};
}

// Partial overrides: absent keys keep their current value.
inline void from_json(const nlohmann::json& j, DecodeConfig& c) {
    if (j.contains("strategy")) {
        c.strategy = decode_strategy_from_string(j.at("strategy").get<std::string>());
    }
    if (j.contains("top_k")) {
        j.at("top_k").get_to(c.top_k);
    }
    if (j.contains("temperature")) {
        j.at("temperature").get_to(c.temperature);
    }
    if (j.contains("max_new_tokens")) {
        j.at("max_new_tokens").get_to(c.max_new_tokens);
    }
    if (j.contains("seed")) {
        j.at("seed").get_to(c.seed);
    }
}

namespace detail {

inline TokenId argmax_row(std::span<const double> row) {
    return static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Samples from softmax(row / temperature) restricted to the k best ids
// (ties resolved toward the lower id).
inline TokenId sample_top_k(std::span<const double> row, std::size_t k, double temperature, Rng& rng) {
    std::vector<TokenId> ids(row.size());
    std::iota(ids.begin(), ids.end(), TokenId{0});
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](TokenId a, TokenId b) {
        return row[a] > row[b] || (row[a] == row[b] && a < b);
    });
    std::vector<double> weights(k);
    const double top = row[ids[0]] / temperature;
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        weights[i] = std::exp(row[ids[i]] / temperature - top);
        total += weights[i];
    }
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < k; ++i) {
        u -= weights[i];
        if (u < 0.0) {
            return ids[i];
        }
    }
    return ids[k - 1];
}

}  // namespace detail

// Extends the context one token at a time until end-of-text, max_new_tokens,
// or the model's length limit. The result excludes the context and the
// end-of-text token.
inline TokenIds generate(const DecoderWeights& weights, std::span<const TokenId> context, const DecodeConfig& config,
                         TokenId end_of_text) {
    config.validate(weights.config.vocab_size);
    if (context.empty()) {
        throw ConfigError("generate: empty context");
    }
    if (context.size() + 1 > weights.config.max_seq_len) {
        throw ContextOverflowError("generate: context of " + std::to_string(context.size()) +
                                   " tokens leaves no room under max_seq_len " +
                                   std::to_string(weights.config.max_seq_len));
    }
    NoGradGuard no_grad;
    Rng rng(config.seed);
    TokenIds sequence(context.begin(), context.end());
    TokenIds out;
    const std::size_t V = weights.config.vocab_size;
    while (out.size() < config.max_new_tokens && sequence.size() < weights.config.max_seq_len) {
        const Tensor logits = forward(weights, sequence, false);
        const std::span<const double> last = logits.data().subspan((sequence.size() - 1) * V, V);
        const TokenId next = config.strategy == DecodeStrategy::greedy
                                 ? detail::argmax_row(last)
                                 : detail::sample_top_k(last, config.top_k, config.temperature, rng);
        if (next == end_of_text) {
            break;
        }
        out.push_back(next);
        sequence.push_back(next);
    }
    return out;
}

enum class Speaker { user, bot };

inline std::string to_string(Speaker s) { return s == Speaker::user ? "user" : "bot"; }

struct ChatTurn {
    Speaker speaker;
    std::string text;
};

struct ChatSession {
    std::string session_id;
    std::vector<ChatTurn> turns;
    std::size_t context_window = 2;
    std::chrono::system_clock::time_point created_at = std::chrono::system_clock::now();
};

inline constexpr std::string_view kEmptyReplyText = "...";

// Called with the exact token context handed to generate().
using ContextObserver = std::function<void(std::span<const TokenId>)>;

// Appends the user turn, generates from the last min(W, available) turns
// arranged exactly as in training, appends and returns the bot turn.
// Sampling is seeded from the config seed and the turn position.
inline std::string chat_respond(ChatSession& session, std::string_view user_text, const DecoderWeights& weights,
                                const Vocabulary& vocab, const DecodeConfig& config,
                                const ContextObserver& observe = nullptr) {
    if (session.session_id.empty()) {
        throw ConfigError("chat_respond: session has no id");
    }
    if (user_text.empty()) {
        throw ConfigError("chat_respond: empty message");
    }
    if (session.context_window == 0) {
        throw ConfigError("chat_respond: context window must be at least 1");
    }
    if (!session.turns.empty() && session.turns.back().speaker != Speaker::bot) {
        throw ConfigError("chat_respond: session is waiting for a bot turn");
    }
    std::vector<ChatTurn> turns = session.turns;
    turns.push_back({Speaker::user, std::string(user_text)});

    DecodeConfig turn_config = config;
    turn_config.seed = mix_seed(config.seed, turns.size());
    const Encoder encoder(vocab);

    std::size_t count = std::min(session.context_window, turns.size());
    TokenIds reply;
    for (int attempt = 0;; ++attempt) {
        std::vector<Turn> context;
        for (std::size_t i = turns.size() - count; i < turns.size(); ++i) {
            context.push_back({turns[i].speaker == Speaker::user ? 0 : 1, turns[i].text});
        }
        const TokenIds ids = arrange_multi_turn(context, encoder, vocab.end_of_text);
        try {
            if (observe) {
                observe(ids);
            }
            reply = generate(weights, ids, turn_config, vocab.end_of_text);
            break;
        } catch (const ContextOverflowError&) {
            if (attempt > 0 || count <= 1) {
                throw;
            }
            --count;
        }
    }
    std::string text = decode(vocab, reply);
    if (text.empty()) {
        text = std::string(kEmptyReplyText);
    }
    turns.push_back({Speaker::bot, text});
    session.turns = std::move(turns);
    return text;
}

}  // namespace coral
