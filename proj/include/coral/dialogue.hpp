// dialogue.hpp
//
// EmpatheticDialogues-style CSV ingestion and the multi-turn arrangement:
// every turn is encoded and terminated by end-of-text, context windows of W
// turns predict the turn that follows them.
#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "coral/common.hpp"
#include "coral/tokenizer.hpp"

namespace coral {

struct Turn {
    int speaker_index = 0;
    std::string text;
};

struct Dialogue {
    std::string conv_id;
    std::string emotion_label;
    std::string prompt;
    std::vector<Turn> turns;
};

struct IngestResult {
    std::vector<Dialogue> dialogues;   // sorted by conv_id
    std::size_t malformed_rows = 0;    // skipped rows (wrong field count, bad index, empty text)
    std::size_t malformed_dialogues = 0;  // utterance indices not contiguous from 1
    std::size_t blocked_dialogues = 0;    // dropped by the blocklist
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return fields;
}

inline std::string replace_all(std::string text, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
    return text;
}

inline std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

}  // namespace detail

// The dataset writes literal commas inside fields as "_comma_".
inline std::string unescape_field(std::string_view raw) { return detail::replace_all(std::string(raw), "_comma_", ","); }

inline IngestResult ingest_csv(std::istream& in, const std::set<std::string>& blocklist = {}) {
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError("csv: missing header row");
    }
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    const auto header = detail::split_fields(line);
    std::unordered_map<std::string, std::size_t> column;
    for (std::size_t i = 0; i < header.size(); ++i) {
        column.emplace(std::string(header[i]), i);
    }
    static constexpr const char* kRequired[] = {"conv_id", "utterance_idx", "context", "prompt", "speaker_idx",
                                                "utterance"};
    for (const char* name : kRequired) {
        if (!column.contains(name)) {
            throw FormatError(std::string("csv: missing required column '") + name + "'");
        }
    }
    const std::size_t c_conv = column["conv_id"], c_idx = column["utterance_idx"], c_ctx = column["context"],
                      c_prompt = column["prompt"], c_speaker = column["speaker_idx"], c_utt = column["utterance"];
    std::size_t needed = 0;
    for (const char* name : kRequired) {
        needed = std::max(needed, column[name] + 1);
    }

    struct Row {
        int index;
        Turn turn;
    };
    std::map<std::string, std::vector<Row>> rows;
    std::map<std::string, Dialogue> heads;
    IngestResult result;

    auto parse_int = [](std::string_view s, int& out) {
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        return ec == std::errc{} && ptr == s.data() + s.size();
    };

    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto fields = detail::split_fields(line);
        int index = 0, speaker = 0;
        if (fields.size() < needed || fields.size() > header.size() || !parse_int(fields[c_idx], index) ||
            !parse_int(fields[c_speaker], speaker) || fields[c_conv].empty()) {
            ++result.malformed_rows;
            continue;
        }
        Turn turn{speaker, unescape_field(fields[c_utt])};
        if (turn.text.empty()) {
            ++result.malformed_rows;
            continue;
        }
        const std::string conv(fields[c_conv]);
        if (!heads.contains(conv)) {
            heads[conv] = Dialogue{conv, unescape_field(fields[c_ctx]), unescape_field(fields[c_prompt]), {}};
        }
        rows[conv].push_back({index, std::move(turn)});
    }

    std::vector<std::string> lowered_block;
    for (const auto& term : blocklist) {
        lowered_block.push_back(detail::lowercase(term));
    }
    for (auto& [conv, list] : rows) {
        std::stable_sort(list.begin(), list.end(), [](const Row& a, const Row& b) { return a.index < b.index; });
        bool contiguous = true;
        for (std::size_t i = 0; i < list.size(); ++i) {
            contiguous = contiguous && list[i].index == static_cast<int>(i + 1);
        }
        if (!contiguous) {
            ++result.malformed_dialogues;
            continue;
        }
        Dialogue d = std::move(heads[conv]);
        for (auto& r : list) {
            d.turns.push_back(std::move(r.turn));
        }
        const bool blocked = std::any_of(lowered_block.begin(), lowered_block.end(), [&](const std::string& term) {
            if (term.empty()) {
                return false;
            }
            if (detail::lowercase(d.prompt).find(term) != std::string::npos) {
                return true;
            }
            return std::any_of(d.turns.begin(), d.turns.end(), [&](const Turn& t) {
                return detail::lowercase(t.text).find(term) != std::string::npos;
            });
        });
        if (blocked) {
            ++result.blocked_dialogues;
            continue;
        }
        result.dialogues.push_back(std::move(d));
    }
    return result;
}

inline IngestResult ingest_csv(const std::filesystem::path& path, const std::set<std::string>& blocklist = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileError("cannot read csv", path.string());
    }
    return ingest_csv(in, blocklist);
}

// encode(t1) eot encode(t2) eot ... encode(tH) eot
inline TokenIds arrange_multi_turn(std::span<const Turn> turns, const Encoder& encoder, TokenId end_of_text) {
    TokenIds ids;
    for (const auto& t : turns) {
        const auto enc = encoder.encode(t.text);
        ids.insert(ids.end(), enc.begin(), enc.end());
        ids.push_back(end_of_text);
    }
    return ids;
}

inline TokenIds arrange_multi_turn(const Dialogue& dialogue, const Vocabulary& vocab) {
    return arrange_multi_turn(dialogue.turns, Encoder(vocab), vocab.end_of_text);
}

struct ContextWindow {
    std::string conv_id;
    std::size_t window_start = 0;  // 0-based index of the first context turn
    std::vector<Turn> context;
    Turn response;
};

// Exactly W context turns followed by the response turn, stride 1.
// A dialogue with H turns contributes max(0, H - W) windows.
inline std::vector<ContextWindow> segment_context_windows(std::span<const Dialogue> dialogues, std::size_t window) {
    if (window == 0) {
        throw ConfigError("context window must be at least 1");
    }
    std::vector<const Dialogue*> order;
    for (const auto& d : dialogues) {
        order.push_back(&d);
    }
    std::stable_sort(order.begin(), order.end(), [](const Dialogue* a, const Dialogue* b) { return a->conv_id < b->conv_id; });
    std::vector<ContextWindow> out;
    for (const Dialogue* d : order) {
        for (std::size_t r = window; r < d->turns.size(); ++r) {
            ContextWindow w;
            w.conv_id = d->conv_id;
            w.window_start = r - window;
            w.context.assign(d->turns.begin() + static_cast<std::ptrdiff_t>(r - window),
                             d->turns.begin() + static_cast<std::ptrdiff_t>(r));
            w.response = d->turns[r];
            out.push_back(std::move(w));
        }
    }
    return out;
}

struct TrainingExample {
    std::string conv_id;
    std::size_t window_start = 0;
    TokenIds input_ids;        // x1..xB
    std::size_t source_len = 0;  // a
    std::vector<bool> loss_mask;  // true exactly on positions a..B-1 (0-based)
    bool truncated = false;       // response tail was cut to fit

    std::size_t target_count() const { return input_ids.size() - source_len; }
};

inline std::vector<bool> response_mask(std::size_t length, std::size_t source_len) {
    std::vector<bool> mask(length, false);
    for (std::size_t i = source_len; i < length; ++i) {
        mask[i] = true;
    }
    return mask;
}

// Builds x = context arrangement ++ encode(response) ++ [eot]. Oldest context
// turns are dropped until the sequence fits; if a single context turn still
// does not fit, the response tail is cut and end-of-text kept.
inline TrainingExample to_training_example(std::span<const Turn> context, const Turn& response, const Encoder& encoder,
                                           TokenId end_of_text, std::size_t max_seq_len) {
    if (context.empty()) {
        throw ConfigError("to_training_example: at least one context turn is required");
    }
    std::vector<TokenIds> encoded;
    for (const auto& t : context) {
        auto ids = encoder.encode(t.text);
        ids.push_back(end_of_text);
        encoded.push_back(std::move(ids));
    }
    TokenIds target = encoder.encode(response.text);
    target.push_back(end_of_text);

    std::size_t first = 0;
    std::size_t source = 0;
    for (const auto& e : encoded) {
        source += e.size();
    }
    while (first + 1 < encoded.size() && source + target.size() > max_seq_len) {
        source -= encoded[first].size();
        ++first;
    }
    TrainingExample ex;
    if (source + target.size() > max_seq_len) {
        // Room for at least one response token plus the closing end-of-text.
        if (source + 2 > max_seq_len) {
            throw DiscardedExampleError("to_training_example: no room for the response under max_seq_len");
        }
        target.resize(max_seq_len - source - 1);
        target.push_back(end_of_text);
        ex.truncated = true;
    }
    for (std::size_t i = first; i < encoded.size(); ++i) {
        ex.input_ids.insert(ex.input_ids.end(), encoded[i].begin(), encoded[i].end());
    }
    ex.source_len = ex.input_ids.size();
    ex.input_ids.insert(ex.input_ids.end(), target.begin(), target.end());
    ex.loss_mask = response_mask(ex.input_ids.size(), ex.source_len);
    return ex;
}

inline TrainingExample to_training_example(const ContextWindow& window, const Vocabulary& vocab, std::size_t max_seq_len) {
    auto ex = to_training_example(window.context, window.response, Encoder(vocab), vocab.end_of_text, max_seq_len);
    ex.conv_id = window.conv_id;
    ex.window_start = window.window_start;
    return ex;
}

struct PreparedExamples {
    std::vector<TrainingExample> examples;
    std::size_t discarded = 0;
    std::size_t truncated = 0;
};

inline PreparedExamples prepare_examples(std::span<const Dialogue> dialogues, const Vocabulary& vocab, std::size_t window,
                                         std::size_t max_seq_len) {
    const Encoder encoder(vocab);
    PreparedExamples out;
    for (const auto& w : segment_context_windows(dialogues, window)) {
        try {
            auto ex = to_training_example(w.context, w.response, encoder, vocab.end_of_text, max_seq_len);
            ex.conv_id = w.conv_id;
            ex.window_start = w.window_start;
            out.truncated += ex.truncated ? 1 : 0;
            out.examples.push_back(std::move(ex));
        } catch (const DiscardedExampleError&) {
            ++out.discarded;
        }
    }
    return out;
}

enum class Split { train, valid, test };

// 80/10/10 by conv_id hash, for corpora shipped without split files.
inline Split split_of(std::string_view conv_id) {
    const auto bucket = fnv1a64(conv_id) % 10;
    return bucket < 8 ? Split::train : (bucket == 8 ? Split::valid : Split::test);
}

inline std::vector<Dialogue> select_split(std::span<const Dialogue> dialogues, Split split) {
    std::vector<Dialogue> out;
    for (const auto& d : dialogues) {
        if (split_of(d.conv_id) == split) {
            out.push_back(d);
        }
    }
    return out;
}

// JSON-lines: {conv_id, window_start, input_ids, source_len}, one per line.
inline void write_examples_jsonl(std::ostream& out, std::span<const TrainingExample> examples) {
    for (const auto& ex : examples) {
        nlohmann::json j{{"conv_id", ex.conv_id},
                         {"window_start", ex.window_start},
                         {"input_ids", ex.input_ids},
                         {"source_len", ex.source_len}};
        out << j.dump() << '\n';
    }
}

inline std::vector<TrainingExample> read_examples_jsonl(std::istream& in) {
    std::vector<TrainingExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            TrainingExample ex;
            ex.conv_id = j.at("conv_id").get<std::string>();
            ex.window_start = j.at("window_start").get<std::size_t>();
            ex.input_ids = j.at("input_ids").get<TokenIds>();
            ex.source_len = j.at("source_len").get<std::size_t>();
            if (ex.source_len == 0 || ex.source_len >= ex.input_ids.size()) {
                throw FormatError("source_len outside [1, B)");
            }
            ex.loss_mask = response_mask(ex.input_ids.size(), ex.source_len);
            out.push_back(std::move(ex));
        } catch (const std::exception& e) {
            throw FormatError("examples line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline void write_examples_jsonl(const std::filesystem::path& path, std::span<const TrainingExample> examples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FileError("cannot write examples", path.string());
    }
    write_examples_jsonl(out, examples);
}

inline std::vector<TrainingExample> read_examples_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileError("cannot read examples", path.string());
    }
    return read_examples_jsonl(in);
}

}  // namespace coral
