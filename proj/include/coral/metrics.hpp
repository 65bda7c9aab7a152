// metrics.hpp
//
// Perplexity over response tokens and corpus-level BLEU-1..4.
//
// BLEU-n here is the clipped modified n-gram precision of order n times the
// brevity penalty exp(min(0, 1 - ref_len / cand_len)), with counts and lengths
// pooled over the corpus. For n >= 2 a zero clipped count is smoothed to
// 1 / (total + 1). Average BLEU is the mean of BLEU-1..4 on a 0-100 scale.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coral/common.hpp"
#include "coral/dialogue.hpp"
#include "coral/generation.hpp"
#include "coral/model.hpp"
#include "coral/tensor.hpp"

namespace coral {

inline constexpr int kMaxBleuOrder = 4;

// Summed -log p over scored tokens.
struct NllTotals {
    double nll_sum = 0.0;
    std::size_t token_count = 0;

    NllTotals& operator+=(const NllTotals& o) {
        nll_sum += o.nll_sum;
        token_count += o.token_count;
        return *this;
    }
};

inline double perplexity_from_totals(const NllTotals& t) {
    if (t.token_count == 0) {
        throw DegenerateMaskError("perplexity: corpus has no target tokens");
    }
    return std::exp(t.nll_sum / static_cast<double>(t.token_count));
}

// Teacher-forced NLL of one example's response tokens.
inline NllTotals response_nll(const DecoderWeights& weights, const TrainingExample& ex) {
    NoGradGuard no_grad;
    std::vector<TokenId> targets;
    std::vector<bool> mask;
    std::size_t count = 0;
    for (std::size_t i = 0; i + 1 < ex.input_ids.size(); ++i) {
        targets.push_back(ex.input_ids[i + 1]);
        mask.push_back(ex.loss_mask[i + 1]);
        count += ex.loss_mask[i + 1] ? 1 : 0;
    }
    if (count == 0) {
        return {};
    }
    const std::span<const TokenId> inputs(ex.input_ids.data(), ex.input_ids.size() - 1);
    const Tensor logits = forward(weights, inputs, false);
    const double mean_nll = cross_entropy_masked(logits, targets, mask).item();
    return {mean_nll * static_cast<double>(count), count};
}

// exp of the mean NLL over every response token in the corpus (token-level pooling).
inline double perplexity(const DecoderWeights& weights, std::span<const TrainingExample> examples) {
    if (examples.empty()) {
        throw ConfigError("perplexity: no examples");
    }
    NllTotals totals;
    for (const auto& ex : examples) {
        totals += response_nll(weights, ex);
    }
    return perplexity_from_totals(totals);
}

template <class Token>
using NGram = std::vector<Token>;

template <class Token>
std::map<NGram<Token>, std::size_t> ngram_counts(std::span<const Token> tokens, int n) {
    std::map<NGram<Token>, std::size_t> counts;
    const auto order = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + order <= tokens.size(); ++i) {
        ++counts[NGram<Token>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                              tokens.begin() + static_cast<std::ptrdiff_t>(i + order))];
    }
    return counts;
}

// Pooled clipped matches and totals for orders 1..4 plus pooled lengths.
struct BleuStats {
    std::array<std::size_t, kMaxBleuOrder> matches{};
    std::array<std::size_t, kMaxBleuOrder> totals{};
    std::size_t candidate_length = 0;
    std::size_t reference_length = 0;

    template <class Token>
    void add(std::span<const Token> candidate, std::span<const Token> reference) {
        candidate_length += candidate.size();
        reference_length += reference.size();
        for (int n = 1; n <= kMaxBleuOrder; ++n) {
            const auto cand = ngram_counts(candidate, n);
            const auto ref = ngram_counts(reference, n);
            for (const auto& [gram, c] : cand) {
                totals[n - 1] += c;
                const auto it = ref.find(gram);
                if (it != ref.end()) {
                    matches[n - 1] += std::min(c, it->second);
                }
            }
        }
    }

    BleuStats& operator+=(const BleuStats& o) {
        for (int i = 0; i < kMaxBleuOrder; ++i) {
            matches[i] += o.matches[i];
            totals[i] += o.totals[i];
        }
        candidate_length += o.candidate_length;
        reference_length += o.reference_length;
        return *this;
    }

    double precision(int n) const {
        const double m = static_cast<double>(matches[n - 1]);
        const double t = static_cast<double>(totals[n - 1]);
        if (n >= 2 && matches[n - 1] == 0) {
            return 1.0 / (t + 1.0);
        }
        return t == 0.0 ? 0.0 : m / t;
    }

    double brevity_penalty() const {
        if (candidate_length == 0) {
            return 0.0;
        }
        const double ratio = static_cast<double>(reference_length) / static_cast<double>(candidate_length);
        return std::exp(std::min(0.0, 1.0 - ratio));
    }

    // In [0, 1]; 0 when nothing was generated.
    double bleu(int n) const {
        if (n < 1 || n > kMaxBleuOrder) {
            throw ConfigError("bleu: order must be in 1..4");
        }
        if (candidate_length == 0) {
            return 0.0;
        }
        return brevity_penalty() * precision(n);
    }
};

template <class Token>
double bleu_n(std::span<const Token> candidate, std::span<const Token> reference, int n) {
    BleuStats s;
    s.add(candidate, reference);
    return s.bleu(n);
}

template <class Token>
double bleu_n(const std::vector<Token>& candidate, const std::vector<Token>& reference, int n) {
    return bleu_n(std::span<const Token>(candidate), std::span<const Token>(reference), n);
}

struct BleuScores {
    std::array<double, kMaxBleuOrder> by_n{};  // 0-100
    double average = 0.0;
};

inline BleuScores bleu_scores(const BleuStats& stats) {
    BleuScores out;
    double total = 0.0;
    for (int n = 1; n <= kMaxBleuOrder; ++n) {
        out.by_n[n - 1] = 100.0 * stats.bleu(n);
        total += out.by_n[n - 1];
    }
    out.average = total / kMaxBleuOrder;
    return out;
}

template <class Token>
using CandidateReference = std::pair<std::vector<Token>, std::vector<Token>>;

template <class Token>
BleuScores corpus_bleu(std::span<const CandidateReference<Token>> pairs) {
    if (pairs.empty()) {
        throw ConfigError("average_bleu: no pairs");
    }
    BleuStats stats;
    for (const auto& [cand, ref] : pairs) {
        stats.add(std::span<const Token>(cand), std::span<const Token>(ref));
    }
    return bleu_scores(stats);
}

// Mean of corpus BLEU-1..4, 0-100.
template <class Token>
double average_bleu(std::span<const CandidateReference<Token>> pairs) {
    return corpus_bleu(pairs).average;
}

template <class Token>
double average_bleu(const std::vector<CandidateReference<Token>>& pairs) {
    return average_bleu(std::span<const CandidateReference<Token>>(pairs));
}

struct EvalReport {
    double perplexity = 0.0;
    std::array<double, kMaxBleuOrder> bleu_by_n{};
    double average_bleu = 0.0;
    std::size_t token_count = 0;
    std::size_t example_count = 0;

    nlohmann::json to_json() const {
        return {{"perplexity", perplexity},
                {"bleu_1", bleu_by_n[0]},
                {"bleu_2", bleu_by_n[1]},
                {"bleu_3", bleu_by_n[2]},
                {"bleu_4", bleu_by_n[3]},
                {"average_bleu", average_bleu},
                {"token_count", token_count},
                {"example_count", example_count}};
    }

    std::string to_table() const {
        std::ostringstream os;
        os << std::fixed;
        auto row = [&](const std::string& name, double value, int digits) {
            os << std::left << std::setw(14) << name << std::right << std::setw(12) << std::setprecision(digits) << value
               << '\n';
        };
        row("perplexity", perplexity, 4);
        for (int n = 0; n < kMaxBleuOrder; ++n) {
            row("bleu_" + std::to_string(n + 1), bleu_by_n[n], 2);
        }
        row("average_bleu", average_bleu, 2);
        os << std::left << std::setw(14) << "token_count" << std::right << std::setw(12) << token_count << '\n';
        os << std::left << std::setw(14) << "example_count" << std::right << std::setw(12) << example_count << '\n';
        return os.str();
    }
};

// The reference response: target tokens without the closing end-of-text.
inline TokenIds reference_response(const TrainingExample& ex, TokenId end_of_text) {
    TokenIds ref(ex.input_ids.begin() + static_cast<std::ptrdiff_t>(ex.source_len), ex.input_ids.end());
    if (!ref.empty() && ref.back() == end_of_text) {
        ref.pop_back();
    }
    return ref;
}

// Produces a response for an example, given its context tokens.
using ResponseGenerator = std::function<TokenIds(const TrainingExample&)>;

// Perplexity is teacher-forced on the targets; BLEU compares generated
// responses with the references, both in tokenizer tokens.
inline EvalReport evaluate(const DecoderWeights& weights, std::span<const TrainingExample> examples, TokenId end_of_text,
                           const ResponseGenerator& respond) {
    if (examples.empty()) {
        throw ConfigError("evaluate: no examples");
    }
    EvalReport report;
    NllTotals totals;
    BleuStats stats;
    for (const auto& ex : examples) {
        totals += response_nll(weights, ex);
        const TokenIds candidate = respond(ex);
        const TokenIds reference = reference_response(ex, end_of_text);
        stats.add(std::span<const TokenId>(candidate), std::span<const TokenId>(reference));
    }
    report.perplexity = perplexity_from_totals(totals);
    const auto scores = bleu_scores(stats);
    report.bleu_by_n = scores.by_n;
    report.average_bleu = scores.average;
    report.token_count = totals.token_count;
    report.example_count = examples.size();
    return report;
}

// BLEU candidates come from generate() on each example's context.
inline EvalReport evaluate(const DecoderWeights& weights, std::span<const TrainingExample> examples,
                           const DecodeConfig& decode_config, TokenId end_of_text) {
    return evaluate(weights, examples, end_of_text, [&](const TrainingExample& ex) {
        const std::span<const TokenId> context(ex.input_ids.data(), ex.source_len);
        return generate(weights, context, decode_config, end_of_text);
    });
}

}  // namespace coral
