// cli.hpp
//
// The `coral` command line: tokenizer-train, data-prepare, train, eval,
// generate, chat and serve. Every option can also come from a CORAL_*
// environment variable; an explicit flag wins over the environment.
//
// Exit codes: 0 success, 1 usage, 2 data error (missing or malformed input),
// 3 runtime error.
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "coral/common.hpp"
#include "coral/dialogue.hpp"
#include "coral/generation.hpp"
#include "coral/metrics.hpp"
#include "coral/model.hpp"
#include "coral/service.hpp"
#include "coral/tokenizer.hpp"
#include "coral/training.hpp"

namespace coral::cli {

enum ExitCode : int { kSuccess = 0, kUsage = 1, kDataError = 2, kRuntimeError = 3 };

namespace detail {

inline std::string env_name(const std::string& flag) {
    std::string out = "CORAL_";
    for (char c : flag) {
        out += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    return out;
}

inline void require_file(const std::string& path) {
    if (!std::filesystem::is_regular_file(path)) {
        throw FileError("no such file", path);
    }
}

struct DecodeFlags {
    std::string strategy = "top_k";
    std::size_t top_k = 40;
    double temperature = 0.9;
    std::size_t max_new_tokens = 64;

    void attach(CLI::App& app, std::string default_strategy) {
        strategy = std::move(default_strategy);
        app.add_option("--strategy", strategy, "greedy or top_k")->envname(env_name("strategy"))->capture_default_str();
        app.add_option("--top-k", top_k)->envname(env_name("top-k"))->capture_default_str();
        app.add_option("--temperature", temperature)->envname(env_name("temperature"))->capture_default_str();
        app.add_option("--max-new-tokens", max_new_tokens)->envname(env_name("max-new-tokens"))->capture_default_str();
    }

    DecodeConfig config(std::uint64_t seed) const {
        DecodeConfig c;
        c.strategy = decode_strategy_from_string(strategy);
        c.top_k = top_k;
        c.temperature = temperature;
        c.max_new_tokens = max_new_tokens;
        c.seed = seed;
        return c;
    }
};

inline std::shared_ptr<LoadedModel> load_model(const std::string& ckpt_path, const std::string& vocab_flag,
                                                std::ostream& err) {
    require_file(ckpt_path);
    const Checkpoint ckpt = load_checkpoint(std::filesystem::path(ckpt_path));
    const std::string vocab_path = vocab_flag.empty() ? ckpt.vocab_path : vocab_flag;
    if (vocab_path.empty()) {
        throw FileError("no vocabulary given and the checkpoint names none", ckpt_path);
    }
    require_file(vocab_path);
    auto model = std::make_shared<LoadedModel>();
    model->vocab = load_vocabulary(vocab_path);
    model->weights = weights_from_checkpoint(ckpt, false);
    if (auto warning = vocabulary_mismatch(ckpt, vocabulary_hash(model->vocab))) {
        err << "warning: " << *warning << '\n';
    }
    if (model->vocab.size() != model->weights.config.vocab_size) {
        throw FormatError("vocabulary has " + std::to_string(model->vocab.size()) + " tokens but the model expects " +
                          std::to_string(model->weights.config.vocab_size));
    }
    return model;
}

inline std::set<std::string> read_blocklist(const std::string& path) {
    std::set<std::string> terms;
    if (path.empty()) {
        return terms;
    }
    require_file(path);
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            terms.insert(line);
        }
    }
    return terms;
}

// REPL over one chat session. Returns when the input ends or on /quit.
inline void chat_loop(const LoadedModel& model, std::size_t window, const DecodeConfig& decode_config, bool debug_context,
                      std::istream& in, std::ostream& out) {
    ChatSession session{.session_id = "terminal", .turns = {}, .context_window = window};
    std::string line;
    out << "Type a message. /reset starts over, /quit exits.\n";
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (line == "/quit") {
            break;
        }
        if (line == "/reset") {
            session.turns.clear();
            out << "[session reset]\n";
            continue;
        }
        ContextObserver observe;
        if (debug_context) {
            observe = [&](std::span<const TokenId> ids) {
                out << "[context] " << decode(model.vocab, ids, {.end_of_text_text = std::string(" | ")}) << '\n';
            };
        }
        const std::string reply = chat_respond(session, line, model.weights, model.vocab, decode_config, observe);
        out << "coral> " << reply << '\n';
    }
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
    using detail::env_name;
    CLI::App app{"coral: multi-turn conversational language model toolkit", "coral"};
    app.require_subcommand(1);
    app.fallthrough();
    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "Seed for every random choice")->envname(env_name("seed"))->capture_default_str();

    // tokenizer-train
    auto* tok = app.add_subcommand("tokenizer-train", "Train a byte-level BPE vocabulary");
    std::string tok_csv, tok_text, tok_out;
    std::size_t tok_size = 2000;
    tok->add_option("--csv", tok_csv, "Dialogue CSV; every utterance is a training string")->envname(env_name("csv"));
    tok->add_option("--text", tok_text, "Plain text file, one training string per line");
    tok->add_option("--vocab-size", tok_size)->envname(env_name("vocab-size"))->capture_default_str();
    tok->add_option("--out", tok_out, "Vocabulary JSON to write")->required();

    // data-prepare
    auto* prep = app.add_subcommand("data-prepare", "Segment dialogues into context-window training examples");
    std::string prep_csv, prep_vocab, prep_out, prep_split = "all", prep_block;
    std::size_t prep_window = 2, prep_max_len = 256;
    prep->add_option("--csv", prep_csv)->required()->envname(env_name("csv"));
    prep->add_option("--vocab", prep_vocab)->required()->envname(env_name("vocab"));
    prep->add_option("--window", prep_window, "Context turns per example")->envname(env_name("window"))->capture_default_str();
    prep->add_option("--out", prep_out, "JSON-lines examples file")->required();
    prep->add_option("--max-seq-len", prep_max_len)->envname(env_name("max-seq-len"))->capture_default_str();
    prep->add_option("--split", prep_split, "all, train, valid or test")
        ->check(CLI::IsMember({"all", "train", "valid", "test"}))
        ->capture_default_str();
    prep->add_option("--blocklist", prep_block, "File of terms; dialogues containing any are dropped");

    // train
    auto* tr = app.add_subcommand("train", "Train or fine-tune a model on prepared examples");
    std::string tr_examples, tr_config, tr_vocab, tr_out, tr_init;
    tr->add_option("--examples", tr_examples)->required()->envname(env_name("examples"));
    tr->add_option("--config", tr_config, "JSON {preset, model, train}")->envname(env_name("config"));
    tr->add_option("--vocab", tr_vocab)->envname(env_name("vocab"));
    tr->add_option("--init", tr_init, "Start from this checkpoint instead of a fresh initialization");
    tr->add_option("--out", tr_out, "Checkpoint to write")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "Perplexity and Average BLEU on prepared examples");
    std::string ev_ckpt, ev_examples, ev_report;
    detail::DecodeFlags ev_decode;
    ev->add_option("--ckpt", ev_ckpt)->required()->envname(env_name("ckpt"));
    ev->add_option("--examples", ev_examples)->required();
    ev->add_option("--report", ev_report, "JSON report to write");
    ev_decode.attach(*ev, "greedy");

    // generate
    auto* gen = app.add_subcommand("generate", "Generate one response to the given context turns");
    std::string gen_ckpt, gen_vocab;
    std::vector<std::string> gen_turns;
    detail::DecodeFlags gen_decode;
    gen->add_option("--ckpt", gen_ckpt)->required()->envname(env_name("ckpt"));
    gen->add_option("--vocab", gen_vocab)->envname(env_name("vocab"));
    gen->add_option("--turn", gen_turns, "Context turn, oldest first (repeatable)")->required();
    gen_decode.attach(*gen, "top_k");

    // chat
    auto* chat = app.add_subcommand("chat", "Interactive terminal chat");
    std::string chat_ckpt, chat_vocab;
    std::size_t chat_window = 2;
    bool chat_debug = false;
    detail::DecodeFlags chat_decode;
    chat->add_option("--ckpt", chat_ckpt)->required()->envname(env_name("ckpt"));
    chat->add_option("--vocab", chat_vocab)->envname(env_name("vocab"));
    chat->add_option("--window", chat_window)->envname(env_name("window"))->capture_default_str();
    chat->add_flag("--debug-context", chat_debug, "Print the decoded context before each reply");
    chat_decode.attach(*chat, "top_k");

    // serve
    auto* srv = app.add_subcommand("serve", "HTTP chat service");
    ServiceConfig srv_config;
    std::size_t srv_ttl_minutes = 30;
    detail::DecodeFlags srv_decode;
    srv->add_option("--ckpt", srv_config.checkpoint_path)->required()->envname(env_name("ckpt"));
    srv->add_option("--vocab", srv_config.vocab_path)->envname(env_name("vocab"));
    srv->add_option("--host", srv_config.host)->envname(env_name("host"))->capture_default_str();
    srv->add_option("--port", srv_config.port)->envname(env_name("port"))->capture_default_str();
    srv->add_option("--window", srv_config.context_window)->envname(env_name("window"))->capture_default_str();
    srv->add_option("--max-sessions", srv_config.max_sessions)->envname(env_name("max-sessions"))->capture_default_str();
    srv->add_option("--session-ttl-minutes", srv_ttl_minutes)->capture_default_str();
    srv->add_option("--cors-origin", srv_config.cors_allowlist, "Allowed browser origin (repeatable, * for any)");
    srv_decode.attach(*srv, "top_k");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kSuccess : kUsage;
    }

    try {
        if (tok->parsed()) {
            std::vector<std::string> corpus;
            if (!tok_csv.empty()) {
                detail::require_file(tok_csv);
                for (const auto& d : ingest_csv(std::filesystem::path(tok_csv)).dialogues) {
                    for (const auto& t : d.turns) {
                        corpus.push_back(t.text);
                    }
                }
            } else if (!tok_text.empty()) {
                detail::require_file(tok_text);
                std::ifstream text(tok_text);
                std::string line;
                while (std::getline(text, line)) {
                    if (!line.empty()) {
                        corpus.push_back(line);
                    }
                }
            } else {
                err << "tokenizer-train: one of --csv or --text is required\n";
                return kUsage;
            }
            if (corpus.empty()) {
                throw FormatError("tokenizer-train: corpus is empty");
            }
            const auto result = train_bpe(corpus, tok_size);
            save_vocabulary(result.vocab, tok_out);
            out << "vocab_size: " << result.vocab.size() << '\n';
            if (!result.reached_target) {
                err << "warning: corpus supports only " << result.vocab.size() << " of " << tok_size << " tokens\n";
            }
            return kSuccess;
        }

        if (prep->parsed()) {
            detail::require_file(prep_csv);
            detail::require_file(prep_vocab);
            const Vocabulary vocab = load_vocabulary(prep_vocab);
            const auto ingest = ingest_csv(std::filesystem::path(prep_csv), detail::read_blocklist(prep_block));
            std::vector<Dialogue> dialogues = ingest.dialogues;
            if (prep_split != "all") {
                const Split split = prep_split == "train" ? Split::train : (prep_split == "valid" ? Split::valid : Split::test);
                dialogues = select_split(dialogues, split);
            }
            const auto prepared = prepare_examples(dialogues, vocab, prep_window, prep_max_len);
            write_examples_jsonl(std::filesystem::path(prep_out), prepared.examples);
            err << "dialogues: " << dialogues.size() << ", malformed rows: " << ingest.malformed_rows
                << ", malformed dialogues: " << ingest.malformed_dialogues << ", blocked: " << ingest.blocked_dialogues
                << ", truncated: " << prepared.truncated << ", discarded: " << prepared.discarded << '\n';
            out << "examples: " << prepared.examples.size() << '\n';
            return kSuccess;
        }

        if (tr->parsed()) {
            detail::require_file(tr_examples);
            const auto examples = read_examples_jsonl(std::filesystem::path(tr_examples));
            nlohmann::json cfg = nlohmann::json::object();
            if (!tr_config.empty()) {
                detail::require_file(tr_config);
                std::ifstream cfg_in(tr_config);
                try {
                    cfg_in >> cfg;
                } catch (const nlohmann::json::exception& e) {
                    throw FormatError("config " + tr_config + ": " + e.what());
                }
            }
            std::optional<Vocabulary> vocab;
            if (!tr_vocab.empty()) {
                detail::require_file(tr_vocab);
                vocab = load_vocabulary(tr_vocab);
            }
            TrainConfig train_config;
            if (cfg.contains("train")) {
                cfg["train"].get_to(train_config);
            }
            train_config.seed = seed;
            DecoderWeights weights;
            if (!tr_init.empty()) {
                detail::require_file(tr_init);
                weights = weights_from_checkpoint(load_checkpoint(std::filesystem::path(tr_init)), true);
            } else {
                ModelConfig model_config = ModelConfig::preset(cfg.value("preset", std::string("toy")),
                                                               vocab ? vocab->size() : 2000);
                if (cfg.contains("model")) {
                    cfg["model"].get_to(model_config);
                }
                if (vocab) {
                    model_config.vocab_size = vocab->size();
                }
                weights = init_weights(model_config, mix_seed(seed, 0));
            }
            TrainHooks hooks;
            hooks.vocab_hash = vocab ? vocabulary_hash(*vocab) : 0;
            const std::string vocab_path =
                vocab ? std::filesystem::absolute(tr_vocab).string() : std::string();
            hooks.on_epoch_end = [&](const Checkpoint& c, std::size_t epoch) {
                Checkpoint copy = c;
                copy.vocab_path = vocab_path;
                save_checkpoint(copy, std::filesystem::path(tr_out + ".epoch" + std::to_string(epoch + 1)));
                err << "epoch " << epoch + 1 << " done at step " << c.step << '\n';
            };
            auto result = train(weights, examples, train_config, hooks);
            result.checkpoint.vocab_path = vocab_path;
            save_checkpoint(result.checkpoint, std::filesystem::path(tr_out));
            if (result.aborted) {
                err << "training aborted: " << result.abort_reason << " (last good checkpoint written)\n";
                return kRuntimeError;
            }
            out << "steps: " << result.loss_history.size() << '\n';
            if (!result.loss_history.empty()) {
                out << "final_loss: " << result.loss_history.back() << '\n';
            }
            return kSuccess;
        }

        if (ev->parsed()) {
            detail::require_file(ev_ckpt);
            detail::require_file(ev_examples);
            const Checkpoint ckpt = load_checkpoint(std::filesystem::path(ev_ckpt));
            const DecoderWeights weights = weights_from_checkpoint(ckpt, false);
            const auto examples = read_examples_jsonl(std::filesystem::path(ev_examples));
            const EvalReport report = evaluate(weights, examples, ev_decode.config(seed), ckpt.end_of_text);
            if (!ev_report.empty()) {
                std::ofstream rep(ev_report);
                if (!rep) {
                    throw FileError("cannot write report", ev_report);
                }
                rep << report.to_json().dump(2) << '\n';
            }
            out << report.to_table();
            return kSuccess;
        }

        if (gen->parsed()) {
            const auto model = detail::load_model(gen_ckpt, gen_vocab, err);
            std::vector<Turn> turns;
            for (std::size_t i = 0; i < gen_turns.size(); ++i) {
                turns.push_back({static_cast<int>(i % 2), gen_turns[i]});
            }
            const TokenIds context = arrange_multi_turn(turns, Encoder(model->vocab), model->vocab.end_of_text);
            const TokenIds reply = generate(model->weights, context, gen_decode.config(seed), model->vocab.end_of_text);
            out << decode(model->vocab, reply) << '\n';
            return kSuccess;
        }

        if (chat->parsed()) {
            const auto model = detail::load_model(chat_ckpt, chat_vocab, err);
            detail::chat_loop(*model, chat_window, chat_decode.config(seed), chat_debug, in, out);
            return kSuccess;
        }

        if (srv->parsed()) {
            srv_config.session_ttl = std::chrono::minutes(srv_ttl_minutes);
            srv_config.decode = srv_decode.config(seed);
            detail::require_file(srv_config.checkpoint_path);
            ChatService service(srv_config);
            httplib::Server server;
            service.mount(server);
            std::exception_ptr load_error;
            std::thread loader([&] {
                try {
                    service.set_model(detail::load_model(srv_config.checkpoint_path, srv_config.vocab_path, err));
                    err << "model loaded\n";
                } catch (...) {
                    load_error = std::current_exception();
                    server.wait_until_ready();
                    server.stop();
                }
            });
            err << "listening on " << srv_config.host << ':' << srv_config.port << '\n';
            const bool ok = server.listen(srv_config.host, srv_config.port);
            loader.join();
            if (load_error) {
                std::rethrow_exception(load_error);
            }
            if (!ok) {
                err << "cannot listen on " << srv_config.host << ':' << srv_config.port << '\n';
                return kRuntimeError;
            }
            return kSuccess;
        }
    } catch (const FileError& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntimeError;
    }
    return kUsage;
}

}  // namespace coral::cli
