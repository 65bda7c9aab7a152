// training.hpp
//
// Adam with bias correction, the masked-NLL training loop and the binary
// checkpoint format:
//
//   "CORALCKPT" | u32 version | u64 header length | JSON header
//   then per tensor: u32 name length | name | u32 rank | u64 dims[rank] | f32 data
//
// All integers and floats are little-endian.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coral/common.hpp"
#include "coral/dialogue.hpp"
#include "coral/model.hpp"
#include "coral/random.hpp"
#include "coral/tensor.hpp"

namespace coral {

struct TrainConfig {
    double learning_rate = 5e-5;
    double adam_eps = 1e-8;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    std::size_t batch_size = 4;
    std::size_t epochs = 3;
    std::uint64_t seed = 0;
    std::optional<double> grad_clip_norm;
    bool loss_on_context = false;
    std::optional<std::size_t> max_steps;  // stop early after this many optimizer steps

    void validate() const {
        if (!(learning_rate >= 0.0)) {
            throw ConfigError("train config: learning_rate must be non-negative");
        }
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
            throw ConfigError("train config: betas must lie in [0, 1)");
        }
        if (!(adam_eps > 0.0)) {
            throw ConfigError("train config: adam_eps must be positive");
        }
        if (batch_size == 0) {
            throw ConfigError("train config: batch_size must be at least 1");
        }
        if (grad_clip_norm && !(*grad_clip_norm > 0.0)) {
            throw ConfigError("train config: grad_clip_norm must be positive");
        }
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate}, {"adam_eps", c.adam_eps},   {"adam_beta1", c.adam_beta1},
                       {"adam_beta2", c.adam_beta2},       {"batch_size", c.batch_size}, {"epochs", c.epochs},
                       {"seed", c.seed},                   {"loss_on_context", c.loss_on_context}};
    j["grad_clip_norm"] = c.grad_clip_norm ? nlohmann::json(*c.grad_clip_norm) : nlohmann::json(nullptr);
    j["max_steps"] = c.max_steps ? nlohmann::json(*c.max_steps) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    auto take = [&](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    take("learning_rate", c.learning_rate);
    take("adam_eps", c.adam_eps);
    take("adam_beta1", c.adam_beta1);
    take("adam_beta2", c.adam_beta2);
    take("batch_size", c.batch_size);
    take("epochs", c.epochs);
    take("seed", c.seed);
    take("loss_on_context", c.loss_on_context);
    if (j.contains("grad_clip_norm")) {
        c.grad_clip_norm = j["grad_clip_norm"].is_null() ? std::nullopt : std::optional(j["grad_clip_norm"].get<double>());
    }
    if (j.contains("max_steps")) {
        c.max_steps = j["max_steps"].is_null() ? std::nullopt : std::optional(j["max_steps"].get<std::size_t>());
    }
}

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::uint64_t t = 0;

    static AdamState for_parameters(std::span<const NamedTensor> params) {
        AdamState s;
        for (const auto& p : params) {
            s.m.emplace_back(p.tensor.numel(), 0.0);
            s.v.emplace_back(p.tensor.numel(), 0.0);
        }
        return s;
    }
};

class NonFiniteGradientError : public Error {
public:
    NonFiniteGradientError(std::string parameter, double norm)
        : Error("non-finite gradient in '" + parameter + "' (norm " + std::to_string(norm) + ")"),
          parameter_(std::move(parameter)),
          norm_(norm) {}
    const std::string& parameter() const noexcept { return parameter_; }
    double norm() const noexcept { return norm_; }

private:
    std::string parameter_;
    double norm_;
};

inline double gradient_norm(std::span<const double> g) {
    double s = 0.0;
    for (double x : g) {
        s += x * x;
    }
    return std::sqrt(s);
}

// One Adam update from each parameter's accumulated grad. Parameters without
// a grad count as zero gradient. Nothing is modified when any gradient is
// non-finite.
inline void adam_step(std::span<NamedTensor> params, AdamState& state, const TrainConfig& config) {
    if (state.m.size() != params.size()) {
        throw DimensionError("adam_step: optimizer state has " + std::to_string(state.m.size()) + " slots for " +
                             std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (state.m[i].size() != p.tensor.numel()) {
            throw DimensionError("adam_step: state shape mismatch for '" + p.name + "'");
        }
        if (p.tensor.has_grad()) {
            const auto g = p.tensor.grad();
            if (!std::all_of(g.begin(), g.end(), [](double x) { return std::isfinite(x); })) {
                throw NonFiniteGradientError(p.name, gradient_norm(g));
            }
        }
    }
    ++state.t;
    const double b1 = config.adam_beta1, b2 = config.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto data = p.tensor.mutable_data();
        const auto g = p.tensor.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double gk = g.empty() ? 0.0 : g[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            const double m_hat = m[k] / c1;
            const double v_hat = v[k] / c2;
            data[k] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_eps);
        }
    }
}

// Scales every gradient so the global L2 norm is at most max_norm. Returns the norm before clipping.
inline double clip_grad_norm(std::span<NamedTensor> params, double max_norm) {
    double total = 0.0;
    for (const auto& p : params) {
        for (double g : p.tensor.grad()) {
            total += g * g;
        }
    }
    total = std::sqrt(total);
    if (total > max_norm) {
        const double f = max_norm / total;
        for (auto& p : params) {
            if (p.tensor.has_grad()) {
                for (double& g : p.tensor.mutable_grad()) {
                    g *= f;
                }
            }
        }
    }
    return total;
}

struct TensorRecord {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<float> data;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "CORALCKPT";

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    ModelConfig model_config;
    TrainConfig train_config;
    std::uint64_t vocab_hash = 0;
    TokenId end_of_text = kByteTokens;
    std::string vocab_path;  // hint for tools; may be empty
    std::uint64_t step = 0;
    std::vector<double> loss_history;
    std::vector<TensorRecord> tensors;
};

// Snapshot at stored (32-bit) precision.
inline Checkpoint make_checkpoint(const DecoderWeights& weights, const TrainConfig& train_config, std::uint64_t step,
                                  std::vector<double> loss_history, std::uint64_t vocab_hash = 0) {
    Checkpoint c;
    c.model_config = weights.config;
    c.train_config = train_config;
    c.step = step;
    c.loss_history = std::move(loss_history);
    c.vocab_hash = vocab_hash;
    for (const auto& p : weights.parameters()) {
        TensorRecord r;
        r.name = p.name;
        for (auto d : p.tensor.shape()) {
            r.dims.push_back(d);
        }
        r.data.reserve(p.tensor.numel());
        for (double x : p.tensor.data()) {
            r.data.push_back(static_cast<float>(x));
        }
        c.tensors.push_back(std::move(r));
    }
    return c;
}

inline DecoderWeights weights_from_checkpoint(const Checkpoint& c, bool requires_grad = false) {
    DecoderWeights w = init_weights(c.model_config, 0);
    auto params = w.parameters();
    if (params.size() != c.tensors.size()) {
        throw FormatError("checkpoint: expected " + std::to_string(params.size()) + " tensors, found " +
                          std::to_string(c.tensors.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& r = c.tensors[i];
        auto& p = params[i];
        Shape shape(r.dims.begin(), r.dims.end());
        if (r.name != p.name || shape != p.tensor.shape()) {
            throw FormatError("checkpoint: tensor '" + r.name + "' " + shape_string(shape) + " does not match '" + p.name +
                              "' " + shape_string(p.tensor.shape()));
        }
        auto data = p.tensor.mutable_data();
        for (std::size_t k = 0; k < data.size(); ++k) {
            data[k] = static_cast<double>(r.data[k]);
        }
    }
    w.set_requires_grad(requires_grad);
    return w;
}

// Rounds every weight to the nearest float, matching what a checkpoint stores.
inline void round_to_stored_precision(const DecoderWeights& w) {
    for (auto& p : w.parameters()) {
        for (double& x : p.tensor.mutable_data()) {
            x = static_cast<double>(static_cast<float>(x));
        }
    }
}

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(bytes), std::end(bytes));
    }
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const std::string& section) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
        throw FormatError("checkpoint truncated: missing " + section);
    }
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(bytes), std::end(bytes));
    }
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

inline std::string get_bytes(std::istream& in, std::uint64_t n, const std::string& section) {
    std::string s;
    // Grow in chunks so a corrupted length cannot trigger a giant allocation.
    constexpr std::uint64_t kChunk = 1 << 20;
    while (s.size() < n) {
        const auto take = std::min<std::uint64_t>(kChunk, n - s.size());
        const auto old = s.size();
        s.resize(old + take);
        if (!in.read(s.data() + old, static_cast<std::streamsize>(take))) {
            throw FormatError("checkpoint truncated: missing " + section);
        }
    }
    return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, std::ostream& out) {
    out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
    detail::put_le<std::uint32_t>(out, c.version);
    nlohmann::json header{{"model_config", c.model_config}, {"train_config", c.train_config},
                          {"step", c.step},                 {"loss_history", c.loss_history},
                          {"vocab_hash", c.vocab_hash},     {"end_of_text", c.end_of_text},
                          {"vocab_path", c.vocab_path},     {"tensor_count", c.tensors.size()}};
    const std::string text = header.dump();
    detail::put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : c.tensors) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) {
            detail::put_le<std::uint64_t>(out, d);
        }
        for (float x : t.data) {
            detail::put_le<float>(out, x);
        }
    }
}

inline Checkpoint load_checkpoint(std::istream& in) {
    const std::string magic = detail::get_bytes(in, kCheckpointMagic.size(), "magic");
    if (magic != kCheckpointMagic) {
        throw FormatError("checkpoint: bad magic");
    }
    Checkpoint c;
    c.version = detail::get_le<std::uint32_t>(in, "version");
    if (c.version != kCheckpointVersion) {
        throw UnsupportedVersionError("checkpoint: unsupported version " + std::to_string(c.version));
    }
    const auto header_len = detail::get_le<std::uint64_t>(in, "header length");
    const std::string text = detail::get_bytes(in, header_len, "header");
    std::size_t tensor_count = 0;
    try {
        const auto header = nlohmann::json::parse(text);
        c.model_config = header.at("model_config").get<ModelConfig>();
        c.train_config = header.at("train_config").get<TrainConfig>();
        c.step = header.at("step").get<std::uint64_t>();
        c.loss_history = header.at("loss_history").get<std::vector<double>>();
        c.vocab_hash = header.at("vocab_hash").get<std::uint64_t>();
        c.end_of_text = header.at("end_of_text").get<TokenId>();
        c.vocab_path = header.at("vocab_path").get<std::string>();
        tensor_count = header.at("tensor_count").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what());
    }
    c.model_config.validate();
    for (std::size_t i = 0; i < tensor_count; ++i) {
        const std::string where = "tensor " + std::to_string(i);
        TensorRecord r;
        const auto name_len = detail::get_le<std::uint32_t>(in, where + " name");
        r.name = detail::get_bytes(in, name_len, where + " name");
        const std::string label = "tensor '" + r.name + "'";
        const auto rank = detail::get_le<std::uint32_t>(in, label + " rank");
        if (rank == 0 || rank > 8) {
            throw FormatError("checkpoint: " + label + " has implausible rank " + std::to_string(rank));
        }
        std::uint64_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            r.dims.push_back(detail::get_le<std::uint64_t>(in, label + " dims"));
            n *= r.dims.back();
        }
        const std::string raw = detail::get_bytes(in, n * sizeof(float), label + " data");
        r.data.resize(n);
        std::istringstream bytes(raw);
        for (std::uint64_t k = 0; k < n; ++k) {
            r.data[k] = detail::get_le<float>(bytes, label + " data");
        }
        c.tensors.push_back(std::move(r));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("checkpoint: trailing bytes after last tensor");
    }
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FileError("cannot write checkpoint", path.string());
    }
    save_checkpoint(c, out);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileError("cannot read checkpoint", path.string());
    }
    return load_checkpoint(in);
}

// Warning text when the checkpoint was trained against a different vocabulary.
inline std::optional<std::string> vocabulary_mismatch(const Checkpoint& c, std::uint64_t vocab_hash) {
    if (c.vocab_hash == vocab_hash) {
        return std::nullopt;
    }
    std::ostringstream os;
    os << "checkpoint vocabulary hash " << std::hex << c.vocab_hash << " differs from provided vocabulary " << vocab_hash;
    return os.str();
}

struct TrainHooks {
    std::function<void(const Checkpoint&, std::size_t epoch)> on_epoch_end;
    std::function<void(std::size_t step, double loss)> on_step;
    std::uint64_t vocab_hash = 0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<double> loss_history;  // one entry per optimizer step
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

// Target positions for next-token prediction: row i of the logits predicts
// input_ids[i + 1], scored when that token is a target.
struct ShiftedTargets {
    std::vector<TokenId> targets;
    std::vector<bool> mask;
    std::size_t count = 0;
};

inline ShiftedTargets shifted_targets(const TrainingExample& ex, bool loss_on_context) {
    ShiftedTargets s;
    const std::size_t B = ex.input_ids.size();
    for (std::size_t i = 0; i + 1 < B; ++i) {
        const bool scored = loss_on_context || ex.loss_mask[i + 1];
        s.targets.push_back(ex.input_ids[i + 1]);
        s.mask.push_back(scored);
        s.count += scored ? 1 : 0;
    }
    return s;
}

// Shuffles, then sorts pools of a few batches by length so each batch holds
// sequences of similar size, then shuffles the batch order.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainingExample> examples, std::size_t batch_size,
                                                          Rng& rng) {
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    rng.shuffle(std::span(order));
    const std::size_t pool = batch_size * 8;
    for (std::size_t start = 0; start < order.size(); start += pool) {
        const auto end = std::min(order.size(), start + pool);
        std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end),
                         [&](std::size_t a, std::size_t b) { return examples[a].input_ids.size() < examples[b].input_ids.size(); });
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const auto end = std::min(order.size(), start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    rng.shuffle(std::span(batches));
    return batches;
}

}  // namespace detail

// Each sequence runs through its own forward pass, so padding never enters
// attention or the loss. The batch loss is the NLL averaged over every scored
// token in the batch; per-sequence gradients accumulate before one Adam step.
inline double batch_loss_and_grads(const DecoderWeights& weights, std::span<const TrainingExample> examples,
                                   std::span<const std::size_t> batch, bool loss_on_context, Rng* dropout_rng) {
    std::size_t total = 0;
    std::vector<detail::ShiftedTargets> shifted;
    for (std::size_t idx : batch) {
        shifted.push_back(detail::shifted_targets(examples[idx], loss_on_context));
        total += shifted.back().count;
    }
    if (total == 0) {
        throw DegenerateMaskError("batch has no target tokens");
    }
    double loss = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& ex = examples[batch[b]];
        const auto& st = shifted[b];
        if (st.count == 0) {
            continue;
        }
        const std::span<const TokenId> inputs(ex.input_ids.data(), ex.input_ids.size() - 1);
        const Tensor logits = forward(weights, inputs, dropout_rng != nullptr, dropout_rng);
        const Tensor ce = cross_entropy_masked(logits, st.targets, st.mask);
        const double w = static_cast<double>(st.count) / static_cast<double>(total);
        const Tensor part = scale(ce, w);
        part.backward();
        loss += part.item();
    }
    return loss;
}

inline TrainResult train(DecoderWeights& weights, std::span<const TrainingExample> examples, const TrainConfig& config,
                         const TrainHooks& hooks = {}) {
    config.validate();
    if (examples.empty()) {
        throw ConfigError("train: empty dataset");
    }
    for (const auto& ex : examples) {
        if (ex.input_ids.size() > weights.config.max_seq_len || ex.input_ids.size() < 2) {
            throw LengthError("train: example of length " + std::to_string(ex.input_ids.size()) +
                              " does not fit max_seq_len " + std::to_string(weights.config.max_seq_len));
        }
    }
    weights.set_requires_grad(true);
    auto params = weights.parameters();
    AdamState state = AdamState::for_parameters(params);
    Rng shuffle_rng(mix_seed(config.seed, 1));
    Rng dropout_rng(mix_seed(config.seed, 2));

    TrainResult result;
    std::uint64_t step = 0;
    auto snapshot = [&] { return make_checkpoint(weights, config, step, result.loss_history, hooks.vocab_hash); };
    Checkpoint last_good = snapshot();
    bool done = false;
    for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
        for (const auto& batch : detail::make_batches(examples, config.batch_size, shuffle_rng)) {
            if (config.max_steps && step >= *config.max_steps) {
                done = true;
                break;
            }
            weights.zero_grads();
            const double loss = batch_loss_and_grads(weights, examples, batch, config.loss_on_context,
                                                     weights.config.dropout_rate > 0.0 ? &dropout_rng : nullptr);
            if (!std::isfinite(loss)) {
                result.aborted = true;
                result.abort_reason = "non-finite loss at step " + std::to_string(step);
                result.checkpoint = last_good;
                return result;
            }
            try {
                if (config.grad_clip_norm) {
                    clip_grad_norm(params, *config.grad_clip_norm);
                }
                adam_step(params, state, config);
            } catch (const NonFiniteGradientError& e) {
                result.aborted = true;
                result.abort_reason = e.what();
                result.checkpoint = last_good;
                return result;
            }
            ++step;
            result.loss_history.push_back(loss);
            if (hooks.on_step) {
                hooks.on_step(step, loss);
            }
        }
        last_good = snapshot();
        if (hooks.on_epoch_end) {
            hooks.on_epoch_end(last_good, epoch);
        }
    }
    weights.zero_grads();
    result.checkpoint = snapshot();
    return result;
}

}  // namespace coral
