// model.hpp
//
// Causal decoder-only transformer. Pre-norm blocks (norm -> attention ->
// residual, norm -> feed-forward -> residual), learned absolute positions,
// final layer norm and an output head tied to the token embedding.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coral/common.hpp"
#include "coral/random.hpp"
#include "coral/tensor.hpp"

namespace coral {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_model = 64;
    std::size_t d_ff = 256;
    std::size_t vocab_size = 2000;
    std::size_t max_seq_len = 256;
    double dropout_rate = 0.1;

    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
        if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0) {
            fail("all sizes must be positive");
        }
        if (d_model % n_heads != 0) {
            fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (max_seq_len < 2) {
            fail("max_seq_len must be at least 2");
        }
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            fail("dropout_rate must lie in [0, 1)");
        }
    }

    static ModelConfig toy(std::size_t vocab_size = 2000) {
        return {.n_layers = 2, .n_heads = 2, .d_model = 64, .d_ff = 256, .vocab_size = vocab_size, .max_seq_len = 256};
    }
    // 12 decoder layers; widths are placeholders.
    static ModelConfig small(std::size_t vocab_size) {
        return {.n_layers = 12, .n_heads = 12, .d_model = 768, .d_ff = 3072, .vocab_size = vocab_size, .max_seq_len = 1024};
    }
    // 24 decoder layers.
    static ModelConfig large(std::size_t vocab_size) {
        return {.n_layers = 24, .n_heads = 16, .d_model = 1024, .d_ff = 4096, .vocab_size = vocab_size, .max_seq_len = 1024};
    }

    static ModelConfig preset(const std::string& name, std::size_t vocab_size) {
        if (name == "toy") {
            return toy(vocab_size);
        }
        if (name == "small") {
            return small(vocab_size);
        }
        if (name == "large") {
            return large(vocab_size);
        }
        throw ConfigError("unknown model preset '" + name + "'");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},         {"d_model", c.d_model},
                       {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                       {"dropout_rate", c.dropout_rate}};
}

// Missing keys keep their current value, so a preset can be partially overridden.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    auto take = [&](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    take("n_layers", c.n_layers);
    take("n_heads", c.n_heads);
    take("d_model", c.d_model);
    take("d_ff", c.d_ff);
    take("vocab_size", c.vocab_size);
    take("max_seq_len", c.max_seq_len);
    take("dropout_rate", c.dropout_rate);
}

struct LayerWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor q_weight, q_bias, k_weight, k_bias, v_weight, v_bias;
    Tensor out_weight, out_bias;
    Tensor ln2_gain, ln2_bias;
    Tensor ff_in_weight, ff_in_bias, ff_out_weight, ff_out_bias;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct DecoderWeights {
    ModelConfig config;
    Tensor token_embedding;     // vocab × d, doubles as the output head
    Tensor position_embedding;  // max_seq_len × d
    std::vector<LayerWeights> layers;
    Tensor final_gain, final_bias;

    // Stable order; names are the checkpoint tensor names.
    std::vector<NamedTensor> parameters() const {
        std::vector<NamedTensor> out;
        out.push_back({"token_embedding", token_embedding});
        out.push_back({"position_embedding", position_embedding});
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            out.push_back({p + "ln1.gain", l.ln1_gain});
            out.push_back({p + "ln1.bias", l.ln1_bias});
            out.push_back({p + "attn.q.weight", l.q_weight});
            out.push_back({p + "attn.q.bias", l.q_bias});
            out.push_back({p + "attn.k.weight", l.k_weight});
            out.push_back({p + "attn.k.bias", l.k_bias});
            out.push_back({p + "attn.v.weight", l.v_weight});
            out.push_back({p + "attn.v.bias", l.v_bias});
            out.push_back({p + "attn.out.weight", l.out_weight});
            out.push_back({p + "attn.out.bias", l.out_bias});
            out.push_back({p + "ln2.gain", l.ln2_gain});
            out.push_back({p + "ln2.bias", l.ln2_bias});
            out.push_back({p + "ff.in.weight", l.ff_in_weight});
            out.push_back({p + "ff.in.bias", l.ff_in_bias});
            out.push_back({p + "ff.out.weight", l.ff_out_weight});
            out.push_back({p + "ff.out.bias", l.ff_out_bias});
        }
        out.push_back({"final_ln.gain", final_gain});
        out.push_back({"final_ln.bias", final_bias});
        return out;
    }

    void set_requires_grad(bool value) const {
        for (auto& p : parameters()) {
            p.tensor.set_requires_grad(value);
        }
    }

    void zero_grads() const {
        for (auto& p : parameters()) {
            p.tensor.zero_grad();
        }
    }

    // Deep copy; the original and the clone share no storage.
    DecoderWeights clone() const {
        DecoderWeights w = *this;
        w.token_embedding = token_embedding.clone();
        w.position_embedding = position_embedding.clone();
        for (auto& l : w.layers) {
            for (Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.q_weight, &l.q_bias, &l.k_weight, &l.k_bias, &l.v_weight,
                              &l.v_bias, &l.out_weight, &l.out_bias, &l.ln2_gain, &l.ln2_bias, &l.ff_in_weight,
                              &l.ff_in_bias, &l.ff_out_weight, &l.ff_out_bias}) {
                *t = t->clone();
            }
        }
        w.final_gain = final_gain.clone();
        w.final_bias = final_bias.clone();
        return w;
    }
};

inline std::uint64_t count_params(const ModelConfig& c) {
    const std::uint64_t d = c.d_model, ff = c.d_ff;
    const std::uint64_t per_layer = 4 * d * d + 4 * d + 2 * d * ff + ff + d + 4 * d;
    return c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d;
}

inline DecoderWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    constexpr double stddev = 0.02;
    auto normal = [&](Shape shape) {
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) {
            x = rng.normal(0.0, stddev);
        }
        return Tensor(std::move(shape), std::move(v), true);
    };
    auto constant = [](std::size_t n, double value) { return Tensor::full({n}, value, true); };

    const std::size_t d = config.d_model, ff = config.d_ff;
    DecoderWeights w;
    w.config = config;
    w.token_embedding = normal({config.vocab_size, d});
    w.position_embedding = normal({config.max_seq_len, d});
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        LayerWeights l;
        l.ln1_gain = constant(d, 1.0);
        l.ln1_bias = constant(d, 0.0);
        l.q_weight = normal({d, d});
        l.q_bias = constant(d, 0.0);
        l.k_weight = normal({d, d});
        l.k_bias = constant(d, 0.0);
        l.v_weight = normal({d, d});
        l.v_bias = constant(d, 0.0);
        l.out_weight = normal({d, d});
        l.out_bias = constant(d, 0.0);
        l.ln2_gain = constant(d, 1.0);
        l.ln2_bias = constant(d, 0.0);
        l.ff_in_weight = normal({d, ff});
        l.ff_in_bias = constant(ff, 0.0);
        l.ff_out_weight = normal({ff, d});
        l.ff_out_bias = constant(d, 0.0);
        w.layers.push_back(std::move(l));
    }
    w.final_gain = constant(d, 1.0);
    w.final_bias = constant(d, 0.0);
    return w;
}

inline constexpr double kLayerNormEps = 1e-5;

// Logits L×vocab for tokens[0..L); row i scores the token at position i+1.
// Dropout runs only when train_mode is set and a generator is supplied.
inline Tensor forward(const DecoderWeights& w, std::span<const TokenId> tokens, bool train_mode = false,
                      Rng* dropout_rng = nullptr) {
    const auto& cfg = w.config;
    const std::size_t L = tokens.size();
    if (L == 0 || L > cfg.max_seq_len) {
        throw LengthError("forward: sequence length " + std::to_string(L) + " outside [1, " +
                          std::to_string(cfg.max_seq_len) + "]");
    }
    for (TokenId t : tokens) {
        if (t >= cfg.vocab_size) {
            throw VocabularyError("forward: token id " + std::to_string(t) + " not below vocab_size " +
                                  std::to_string(cfg.vocab_size));
        }
    }
    const bool use_dropout = train_mode && dropout_rng != nullptr && cfg.dropout_rate > 0.0;
    auto drop = [&](const Tensor& t) { return use_dropout ? dropout(t, cfg.dropout_rate, *dropout_rng) : t; };

    std::vector<TokenId> positions(L);
    for (std::size_t i = 0; i < L; ++i) {
        positions[i] = static_cast<TokenId>(i);
    }
    Tensor h = drop(add(embedding(w.token_embedding, tokens), embedding(w.position_embedding, positions)));

    const std::size_t hd = cfg.head_dim();
    const double score_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (const auto& layer : w.layers) {
        const Tensor x = layer_norm(h, layer.ln1_gain, layer.ln1_bias, kLayerNormEps);
        const Tensor q = add_bias(matmul(x, layer.q_weight), layer.q_bias);
        const Tensor k = add_bias(matmul(x, layer.k_weight), layer.k_bias);
        const Tensor v = add_bias(matmul(x, layer.v_weight), layer.v_bias);
        std::vector<Tensor> heads;
        heads.reserve(cfg.n_heads);
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            const Tensor qh = slice_cols(q, head * hd, hd);
            const Tensor kh = slice_cols(k, head * hd, hd);
            const Tensor vh = slice_cols(v, head * hd, hd);
            const Tensor attn = drop(causal_softmax(scale(matmul_bt(qh, kh), score_scale)));
            heads.push_back(matmul(attn, vh));
        }
        const Tensor attended = add_bias(matmul(concat_cols(heads), layer.out_weight), layer.out_bias);
        h = add(h, drop(attended));

        const Tensor y = layer_norm(h, layer.ln2_gain, layer.ln2_bias, kLayerNormEps);
        const Tensor inner = gelu(add_bias(matmul(y, layer.ff_in_weight), layer.ff_in_bias));
        h = add(h, drop(add_bias(matmul(inner, layer.ff_out_weight), layer.ff_out_bias)));
    }
    const Tensor out = layer_norm(h, w.final_gain, w.final_bias, kLayerNormEps);
    return matmul_bt(out, w.token_embedding);
}

}  // namespace coral
