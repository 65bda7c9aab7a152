// service.hpp
//
// HTTP/JSON chat service over a loaded checkpoint.
//
//   POST /v1/sessions                  -> 201 {"session_id"}
//   POST /v1/sessions/{id}/messages    -> 200 {"reply", "turn_index", "disclaimer"}
//   GET  /v1/sessions/{id}/history     -> 200 {"turns": [{"speaker", "text"}]}
//   GET  /healthz                      -> 200 {"status": "ok", "model": {...}}
//
// Errors always carry {"error": code}.
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "coral/common.hpp"
#include "coral/generation.hpp"
#include "coral/model.hpp"
#include "coral/tokenizer.hpp"

namespace coral {

inline constexpr std::string_view kDisclaimer =
    "Automated responses. This assistant is not a substitute for professional help.";

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string checkpoint_path;
    std::string vocab_path;
    std::size_t context_window = 2;
    DecodeConfig decode;
    std::size_t max_sessions = 64;
    std::chrono::seconds session_ttl{30 * 60};
    std::size_t max_new_tokens_cap = 256;
    std::vector<std::string> cors_allowlist;  // "*" admits any origin

    void validate() const {
        if (port < 1 || port > 65535) {
            throw ConfigError("service: port must lie in [1, 65535]");
        }
        if (max_sessions < 1) {
            throw ConfigError("service: max_sessions must be at least 1");
        }
        if (context_window < 1) {
            throw ConfigError("service: context_window must be at least 1");
        }
    }
};

// Weights and vocabulary shared read-only by every request.
struct LoadedModel {
    DecoderWeights weights;
    Vocabulary vocab;
};

class ChatService {
public:
    using Clock = std::function<std::chrono::steady_clock::time_point()>;
    // Receives (session id, token context) for every generation; test instrumentation.
    using ContextTap = std::function<void(const std::string&, std::span<const TokenId>)>;

    explicit ChatService(ServiceConfig config, Clock clock = [] { return std::chrono::steady_clock::now(); })
        : config_(std::move(config)), clock_(std::move(clock)) {
        config_.validate();
    }

    void set_model(std::shared_ptr<const LoadedModel> model) {
        std::lock_guard lock(model_mutex_);
        model_ = std::move(model);
    }
    std::shared_ptr<const LoadedModel> model() const {
        std::lock_guard lock(model_mutex_);
        return model_;
    }
    void set_context_tap(ContextTap tap) { tap_ = std::move(tap); }

    struct Response {
        int status = 200;
        nlohmann::json body;
    };

    Response create_session() {
        std::lock_guard lock(sessions_mutex_);
        evict_expired_locked();
        if (sessions_.size() >= config_.max_sessions) {
            return {503, {{"error", "capacity"}}};
        }
        auto entry = std::make_shared<Entry>();
        entry->session.session_id = new_session_id();
        entry->session.context_window = config_.context_window;
        entry->last_active = clock_();
        const std::string id = entry->session.session_id;
        sessions_.emplace(id, std::move(entry));
        return {201, {{"session_id", id}}};
    }

    Response post_message(const std::string& session_id, const std::string& body_text) {
        nlohmann::json body;
        try {
            body = nlohmann::json::parse(body_text);
        } catch (const nlohmann::json::exception&) {
            return {400, {{"error", "invalid_json"}}};
        }
        if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
            return {400, {{"error", "missing_text"}}};
        }
        const std::string text = body["text"].get<std::string>();
        if (text.empty()) {
            return {400, {{"error", "empty_text"}}};
        }
        DecodeConfig decode = config_.decode;
        if (body.contains("decode")) {
            try {
                if (!body["decode"].is_object()) {
                    throw ConfigError("decode must be an object");
                }
                from_json(body["decode"], decode);
            } catch (const std::exception&) {
                return {400, {{"error", "invalid_decode"}}};
            }
            decode.max_new_tokens = std::min(decode.max_new_tokens, config_.max_new_tokens_cap);
        }
        auto entry = find(session_id);
        if (!entry) {
            return {404, {{"error", "no_such_session"}}};
        }
        const auto model = this->model();
        if (!model) {
            return {503, {{"error", "model_not_loaded"}}};
        }
        try {
            decode.validate(model->weights.config.vocab_size);
        } catch (const ConfigError&) {
            return {400, {{"error", "invalid_decode"}}};
        }
        std::lock_guard session_lock(entry->mutex);
        try {
            ContextObserver observe;
            if (tap_) {
                observe = [&](std::span<const TokenId> ids) { tap_(session_id, ids); };
            }
            const std::string reply = chat_respond(entry->session, text, model->weights, model->vocab, decode, observe);
            return {200,
                    {{"reply", reply},
                     {"turn_index", entry->session.turns.size()},
                     {"disclaimer", std::string(kDisclaimer)}}};
        } catch (const ContextOverflowError& e) {
            return {500, {{"error", "context_overflow"}, {"detail", e.what()}}};
        } catch (const std::exception& e) {
            return {500, {{"error", "generation_failed"}, {"detail", e.what()}}};
        }
    }

    Response get_history(const std::string& session_id) {
        auto entry = find(session_id);
        if (!entry) {
            return {404, {{"error", "no_such_session"}}};
        }
        std::lock_guard session_lock(entry->mutex);
        nlohmann::json turns = nlohmann::json::array();
        for (const auto& t : entry->session.turns) {
            turns.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
        }
        return {200, {{"turns", std::move(turns)}}};
    }

    Response health() const {
        const auto model = this->model();
        if (!model) {
            return {503, {{"status", "loading"}, {"error", "model_not_loaded"}}};
        }
        const auto& c = model->weights.config;
        return {200,
                {{"status", "ok"},
                 {"model",
                  {{"n_layers", c.n_layers},
                   {"n_heads", c.n_heads},
                   {"d_model", c.d_model},
                   {"vocab_size", c.vocab_size},
                   {"max_seq_len", c.max_seq_len},
                   {"params", count_params(c)}}}}};
    }

    std::size_t session_count() {
        std::lock_guard lock(sessions_mutex_);
        return sessions_.size();
    }

    // Registers the routes and the CORS handling on an httplib server.
    void mount(httplib::Server& server) {
        auto reply = [](httplib::Response& res, const Response& r) {
            res.status = r.status;
            // Byte-level replies may split a multi-byte character; emit U+FFFD for those.
            res.set_content(r.body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json");
        };
        server.Post("/v1/sessions", [this, reply](const httplib::Request&, httplib::Response& res) {
            reply(res, create_session());
        });
        server.Post(R"(/v1/sessions/([^/]+)/messages)", [this, reply](const httplib::Request& req, httplib::Response& res) {
            reply(res, post_message(req.matches[1].str(), req.body));
        });
        server.Get(R"(/v1/sessions/([^/]+)/history)", [this, reply](const httplib::Request& req, httplib::Response& res) {
            reply(res, get_history(req.matches[1].str()));
        });
        server.Get("/healthz", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
        server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string detail = "unknown";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                detail = e.what();
            } catch (...) {
            }
            res.status = 500;
            res.set_content(nlohmann::json{{"error", "internal"}, {"detail", detail}}.dump(), "application/json");
        });
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) {
                res.set_content(nlohmann::json{{"error", res.status == 404 ? "not_found" : "http_error"}}.dump(),
                                "application/json");
            }
        });
        server.set_post_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            const auto origin = req.get_header_value("Origin");
            if (origin.empty()) {
                return;
            }
            for (const auto& allowed : config_.cors_allowlist) {
                if (allowed == "*" || allowed == origin) {
                    res.set_header("Access-Control-Allow-Origin", allowed == "*" ? "*" : origin);
                    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
                    res.set_header("Access-Control-Allow-Headers", "Content-Type");
                    res.set_header("Vary", "Origin");
                    return;
                }
            }
        });
    }

    const ServiceConfig& config() const { return config_; }

private:
    struct Entry {
        std::mutex mutex;  // serializes generation per session
        ChatSession session;
        std::chrono::steady_clock::time_point last_active;  // guarded by sessions_mutex_
    };

    std::shared_ptr<Entry> find(const std::string& id) {
        std::lock_guard lock(sessions_mutex_);
        evict_expired_locked();
        auto it = sessions_.find(id);
        if (it == sessions_.end()) {
            return nullptr;
        }
        it->second->last_active = clock_();
        return it->second;
    }

    void evict_expired_locked() {
        const auto now = clock_();
        std::erase_if(sessions_, [&](const auto& kv) { return now - kv.second->last_active >= config_.session_ttl; });
    }

    // 128 random bits, hex-encoded.
    std::string new_session_id() {
        std::ostringstream os;
        os << std::hex;
        for (int i = 0; i < 2; ++i) {
            const std::uint64_t part = (std::uint64_t{id_source_()} << 32) | id_source_();
            os.width(16);
            os.fill('0');
            os << part;
        }
        return os.str();
    }

    ServiceConfig config_;
    Clock clock_;
    mutable std::mutex model_mutex_;
    std::shared_ptr<const LoadedModel> model_;
    ContextTap tap_;
    std::mutex sessions_mutex_;
    std::unordered_map<std::string, std::shared_ptr<Entry>> sessions_;
    std::random_device id_source_;
};

}  // namespace coral
