#include <algorithm>
#include <atomic>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <gtest/gtest.h>

#include "coral/service.hpp"

using namespace coral;
using json = nlohmann::json;

namespace {

std::shared_ptr<const LoadedModel> byte_model(std::uint64_t seed = 1) {
    const ModelConfig config{.n_layers = 1, .n_heads = 2, .d_model = 16, .d_ff = 32, .vocab_size = 258,
                             .max_seq_len = 128, .dropout_rate = 0.0};
    return std::make_shared<const LoadedModel>(LoadedModel{init_weights(config, seed), Vocabulary::base()});
}

ServiceConfig quick_config() {
    ServiceConfig c;
    c.decode = DecodeConfig::greedy(4);
    return c;
}

struct FakeClock {
    std::shared_ptr<std::atomic<std::int64_t>> seconds = std::make_shared<std::atomic<std::int64_t>>(0);
    ChatService::Clock clock() const {
        return [s = seconds] { return std::chrono::steady_clock::time_point(std::chrono::seconds(s->load())); };
    }
    void advance(std::int64_t by) const { *seconds += by; }
};

// Serves a ChatService on an ephemeral local port for the lifetime of the object.
class LiveServer {
public:
    explicit LiveServer(ChatService& service) {
        service.mount(server_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LiveServer() {
        server_.stop();
        thread_.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port_);
        c.set_read_timeout(60, 0);
        return c;
    }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

std::string new_session(httplib::Client& c) {
    auto r = c.Post("/v1/sessions", "", "application/json");
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 201);
    return json::parse(r->body).at("session_id").get<std::string>();
}

httplib::Result say(httplib::Client& c, const std::string& id, const std::string& text) {
    return c.Post("/v1/sessions/" + id + "/messages", json{{"text", text}}.dump(), "application/json");
}

}  // namespace

TEST(Service, HealthReportsModelShape) {
    ChatService service(quick_config());
    EXPECT_EQ(service.health().status, 503);
    const ModelConfig config{.n_layers = 1, .n_heads = 2, .d_model = 8, .d_ff = 32, .vocab_size = 16, .max_seq_len = 8};
    service.set_model(std::make_shared<const LoadedModel>(LoadedModel{init_weights(config, 1), Vocabulary::base()}));
    const auto h = service.health();
    EXPECT_EQ(h.status, 200);
    EXPECT_EQ(h.body.at("status"), "ok");
    EXPECT_EQ(h.body.at("model").at("params"), 1080);
    EXPECT_EQ(h.body.at("model").at("vocab_size"), 16);
}

TEST(Service, MessageBeforeModelLoadIs503) {
    ChatService service(quick_config());
    const auto id = service.create_session().body.at("session_id").get<std::string>();
    const auto r = service.post_message(id, R"({"text":"hi"})");
    EXPECT_EQ(r.status, 503);
    EXPECT_EQ(r.body.at("error"), "model_not_loaded");
}

TEST(Service, SessionIdsAreUniqueHex) {
    ChatService service(quick_config());
    std::set<std::string> ids;
    for (int i = 0; i < 50; ++i) {
        const auto id = service.create_session().body.at("session_id").get<std::string>();
        EXPECT_EQ(id.size(), 32u);
        EXPECT_EQ(id.find_first_not_of("0123456789abcdef"), std::string::npos);
        ids.insert(id);
    }
    EXPECT_EQ(ids.size(), 50u);
}

TEST(Service, RequestErrors) {
    ChatService service(quick_config());
    service.set_model(byte_model());
    const auto id = service.create_session().body.at("session_id").get<std::string>();
    const std::vector<std::pair<std::string, std::string>> cases{
        {"not json", "invalid_json"},
        {R"({"message":"hi"})", "missing_text"},
        {R"({"text":5})", "missing_text"},
        {R"({"text":""})", "empty_text"},
        {R"({"text":"hi","decode":{"strategy":"beam"}})", "invalid_decode"},
        {R"({"text":"hi","decode":{"strategy":"top_k","top_k":0}})", "invalid_decode"},
        {R"({"text":"hi","decode":{"temperature":-1}})", "invalid_decode"},
        {R"({"text":"hi","decode":3})", "invalid_decode"},
    };
    for (const auto& [body, code] : cases) {
        const auto r = service.post_message(id, body);
        EXPECT_EQ(r.status, 400) << body;
        EXPECT_EQ(r.body.at("error"), code) << body;
    }
    EXPECT_EQ(service.post_message("nope", R"({"text":"hi"})").status, 404);
    EXPECT_EQ(service.get_history("nope").status, 404);
    // Rejected requests leave no trace in the history.
    EXPECT_TRUE(service.get_history(id).body.at("turns").empty());
}

TEST(Service, ReplyShapeAndHistory) {
    ChatService service(quick_config());
    service.set_model(byte_model());
    const auto id = service.create_session().body.at("session_id").get<std::string>();
    const auto r = service.post_message(id, R"({"text":"hello there"})");
    ASSERT_EQ(r.status, 200);
    EXPECT_TRUE(r.body.at("reply").is_string());
    EXPECT_EQ(r.body.at("turn_index"), 2);
    EXPECT_EQ(r.body.at("disclaimer"), std::string(kDisclaimer));
    service.post_message(id, R"({"text":"again","decode":{"strategy":"top_k","top_k":5,"seed":3}})");
    const auto h = service.get_history(id).body.at("turns");
    ASSERT_EQ(h.size(), 4u);
    EXPECT_EQ(h[0], (json{{"speaker", "user"}, {"text", "hello there"}}));
    EXPECT_EQ(h[1].at("speaker"), "bot");
    EXPECT_EQ(h[1].at("text"), r.body.at("reply"));
    EXPECT_EQ(h[2].at("text"), "again");
}

TEST(Service, CapacityLimit) {
    auto config = quick_config();
    config.max_sessions = 3;
    ChatService service(config);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(service.create_session().status, 201);
    }
    const auto r = service.create_session();
    EXPECT_EQ(r.status, 503);
    EXPECT_EQ(r.body.at("error"), "capacity");
}

TEST(Service, IdleSessionsExpire) {
    auto config = quick_config();
    config.session_ttl = std::chrono::seconds(60);
    config.max_sessions = 1;
    FakeClock clock;
    ChatService service(config, clock.clock());
    service.set_model(byte_model());
    const auto id = service.create_session().body.at("session_id").get<std::string>();
    clock.advance(59);
    EXPECT_EQ(service.post_message(id, R"({"text":"still here"})").status, 200);
    clock.advance(59);
    EXPECT_EQ(service.get_history(id).status, 200);
    EXPECT_EQ(service.create_session().status, 503);
    clock.advance(60);
    EXPECT_EQ(service.get_history(id).status, 404);
    EXPECT_EQ(service.session_count(), 0u);
    EXPECT_EQ(service.create_session().status, 201);
}

TEST(Service, ContextWindowComesFromConfig) {
    auto config = quick_config();
    config.context_window = 1;
    ChatService service(config);
    service.set_model(byte_model());
    std::vector<TokenIds> seen;
    service.set_context_tap([&](const std::string&, std::span<const TokenId> ids) { seen.emplace_back(ids.begin(), ids.end()); });
    const auto id = service.create_session().body.at("session_id").get<std::string>();
    service.post_message(id, R"({"text":"first"})");
    service.post_message(id, R"({"text":"second"})");
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(decode(Vocabulary::base(), seen[1]), "second");
}

TEST(ServiceConfigTest, Validation) {
    ServiceConfig c;
    c.port = 0;
    EXPECT_THROW(ChatService{c}, ConfigError);
    c = {};
    c.max_sessions = 0;
    EXPECT_THROW(ChatService{c}, ConfigError);
    c = {};
    c.context_window = 0;
    EXPECT_THROW(ChatService{c}, ConfigError);
}

TEST(ServiceHttp, EndToEndRoutes) {
    ChatService service(quick_config());
    LiveServer live(service);
    auto c = live.client();
    auto h = c.Get("/healthz");
    ASSERT_TRUE(h);
    EXPECT_EQ(h->status, 503);
    service.set_model(byte_model());
    h = c.Get("/healthz");
    EXPECT_EQ(h->status, 200);
    EXPECT_EQ(h->get_header_value("Content-Type"), "application/json");

    const auto id = new_session(c);
    auto r = say(c, id, "hi");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(json::parse(r->body).at("turn_index"), 2);
    r = c.Post("/v1/sessions/" + id + "/messages", "{", "application/json");
    EXPECT_EQ(r->status, 400);
    EXPECT_EQ(json::parse(r->body).at("error"), "invalid_json");
    r = say(c, "missing", "hi");
    EXPECT_EQ(r->status, 404);
    auto g = c.Get("/v1/sessions/" + id + "/history");
    EXPECT_EQ(json::parse(g->body).at("turns").size(), 2u);
    g = c.Get("/no/such/route");
    EXPECT_EQ(g->status, 404);
    EXPECT_EQ(json::parse(g->body).at("error"), "not_found");
}

TEST(ServiceHttp, CorsAllowlist) {
    auto config = quick_config();
    config.cors_allowlist = {"http://localhost:5173"};
    ChatService service(config);
    LiveServer live(service);
    auto c = live.client();
    auto r = c.Get("/healthz", {{"Origin", "http://localhost:5173"}});
    ASSERT_TRUE(r);
    EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
    r = c.Get("/healthz", {{"Origin", "http://evil.example"}});
    EXPECT_FALSE(r->has_header("Access-Control-Allow-Origin"));
    r = c.Options("/v1/sessions", {{"Origin", "http://localhost:5173"}});
    EXPECT_EQ(r->status, 204);
    EXPECT_EQ(r->get_header_value("Access-Control-Allow-Methods"), "GET, POST, OPTIONS");
}

TEST(ServiceHttp, ConcurrentPostsToOneSessionStayAlternating) {
    ChatService service(quick_config());
    service.set_model(byte_model());
    LiveServer live(service);
    auto c0 = live.client();
    const auto id = new_session(c0);
    constexpr int kClients = 16;
    std::vector<std::thread> threads;
    std::vector<int> statuses(kClients, 0);
    std::vector<int> indices(kClients, 0);
    for (int i = 0; i < kClients; ++i) {
        threads.emplace_back([&, i] {
            auto c = live.client();
            auto r = say(c, id, "message " + std::to_string(i));
            if (r) {
                statuses[static_cast<std::size_t>(i)] = r->status;
                const auto body = json::parse(r->body);
                indices[static_cast<std::size_t>(i)] = body.value("turn_index", -1);
                EXPECT_TRUE(body.contains("turn_index")) << r->status << " " << r->body;
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    for (int s : statuses) {
        EXPECT_EQ(s, 200);
    }
    std::sort(indices.begin(), indices.end());
    for (int i = 0; i < kClients; ++i) {
        EXPECT_EQ(indices[static_cast<std::size_t>(i)], 2 * (i + 1));
    }
    const auto turns = json::parse(c0.Get("/v1/sessions/" + id + "/history")->body).at("turns");
    ASSERT_EQ(turns.size(), 2u * kClients);
    std::set<std::string> user_texts;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        EXPECT_EQ(turns[i].at("speaker"), i % 2 == 0 ? "user" : "bot");
        if (i % 2 == 0) {
            user_texts.insert(turns[i].at("text").get<std::string>());
        }
    }
    EXPECT_EQ(user_texts.size(), static_cast<std::size_t>(kClients));
}

TEST(ServiceHttp, SessionsNeverSeeEachOthersTurns) {
    auto config = quick_config();
    config.context_window = 8;
    ChatService service(config);
    service.set_model(byte_model());
    std::mutex m;
    std::map<std::string, std::vector<std::string>> contexts;
    service.set_context_tap([&](const std::string& id, std::span<const TokenId> ids) {
        std::lock_guard lock(m);
        contexts[id].push_back(decode(Vocabulary::base(), ids));
    });
    LiveServer live(service);
    auto c0 = live.client();
    constexpr int kSessions = 4;
    std::vector<std::string> ids;
    for (int s = 0; s < kSessions; ++s) {
        ids.push_back(new_session(c0));
    }
    std::vector<std::thread> threads;
    for (int s = 0; s < kSessions; ++s) {
        threads.emplace_back([&, s] {
            auto c = live.client();
            for (int k = 0; k < 3; ++k) {
                say(c, ids[static_cast<std::size_t>(s)], "S" + std::to_string(s) + "M" + std::to_string(k));
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    for (int s = 0; s < kSessions; ++s) {
        const auto& seen = contexts[ids[static_cast<std::size_t>(s)]];
        ASSERT_EQ(seen.size(), 3u);
        for (const auto& ctx : seen) {
            for (int other = 0; other < kSessions; ++other) {
                if (other != s) {
                    EXPECT_EQ(ctx.find("S" + std::to_string(other) + "M"), std::string::npos);
                }
            }
        }
        EXPECT_NE(seen.back().find("S" + std::to_string(s) + "M2"), std::string::npos);
    }
}
