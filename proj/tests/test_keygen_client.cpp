#include <gtest/gtest.h>

#include <atomic>
#include <functional>
#include <thread>

#include <httplib.h>

#include "test_util.hpp"

using namespace forgetmark;
using namespace fmtest;

namespace {

/// Chat-completions stub on an ephemeral port. `respond` gets the request
/// index and the parsed request body and sets the response.
class MockAssistant {
 public:
  using Handler = std::function<void(int, const nlohmann::json&, httplib::Response&)>;

  explicit MockAssistant(Handler respond) : respond_(std::move(respond)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      if (auto it = req.headers.find("Authorization"); it != req.headers.end()) last_auth = it->second;
      respond_(calls++, nlohmann::json::parse(req.body), res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockAssistant() {
    server_.stop();
    thread_.join();
  }

  AssistantEndpointConfig config() const {
    AssistantEndpointConfig c;
    c.endpoint.base_url = "http://127.0.0.1:" + std::to_string(port_);
    c.endpoint.backoff_seconds = 0.01;
    c.endpoint.timeout_seconds = 5;
    return c;
  }

  std::atomic<int> calls{0};
  std::string last_auth;

 private:
  Handler respond_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

void reply_with(httplib::Response& res, const std::string& content) {
  nlohmann::json body{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
  res.set_content(body.dump(), "application/json");
}

}  // namespace

TEST(ParseKeys, JsonArrayObjectAndLines) {
  EXPECT_EQ(parse_key_list(R"(["a b c d", "e f g h"])"), (std::vector<std::string>{"a b c d", "e f g h"}));
  EXPECT_EQ(parse_key_list(R"({"keys": ["x y"]})"), std::vector<std::string>{"x y"});
  EXPECT_EQ(parse_key_list("1. first one\n- second one\n* third,\n(4) \"fourth\"\n\n"),
            (std::vector<std::string>{"first one", "second one", "third", "fourth"}));
  EXPECT_EQ(parse_key_list("[not json\nline two"), (std::vector<std::string>{"[not json", "line two"}));
}

TEST(FetchKeys, ReturnsRequestedCountFromJsonReply) {
  MockAssistant mock([](int, const nlohmann::json& req, httplib::Response& res) {
    EXPECT_EQ(req.at("messages").at(0).at("role"), "system");
    reply_with(res, R"(["what is the name of the river ?", "who wrote the old song ?", "where is the tall tower ?"])");
  });
  const auto out = fetch_keys(mock.config(), 3);
  ASSERT_EQ(out.pool.size(), 3u);
  EXPECT_EQ(out.pool.keys[2].text, "where is the tall tower ?");
  EXPECT_EQ(out.pool.keys[0].origin, KeyOrigin::external_assistant);
  EXPECT_EQ(out.requests, 1u);
}

TEST(FetchKeys, DeduplicatesAcrossRounds) {
  MockAssistant mock([](int call, const nlohmann::json&, httplib::Response& res) {
    if (call == 0) reply_with(res, R"(["one two three four", "one  two three four", "five six seven eight"])");
    else reply_with(res, R"(["five six seven eight", "nine ten eleven twelve"])");
  });
  const auto out = fetch_keys(mock.config(), 3);
  ASSERT_EQ(out.pool.size(), 3u);
  EXPECT_EQ(out.pool.keys[2].text, "nine ten eleven twelve");
  EXPECT_EQ(out.requests, 2u);
  EXPECT_EQ(out.duplicates, 2u);
}

TEST(FetchKeys, RetriesServerErrorThenSucceeds) {
  MockAssistant mock([](int call, const nlohmann::json&, httplib::Response& res) {
    if (call == 0) {
      res.status = 500;
      res.set_content("boom", "text/plain");
      return;
    }
    reply_with(res, "- alpha beta gamma delta\n- epsilon zeta eta theta");
  });
  const auto out = fetch_keys(mock.config(), 2);
  EXPECT_EQ(out.pool.size(), 2u);
  EXPECT_EQ(out.retries, 1u);
  EXPECT_EQ(mock.calls.load(), 2);
}

TEST(FetchKeys, ClientErrorFailsWithoutRetry) {
  MockAssistant mock([](int, const nlohmann::json&, httplib::Response& res) { res.status = 401; });
  try {
    fetch_keys(mock.config(), 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::network);
  }
  EXPECT_EQ(mock.calls.load(), 1);
}

TEST(FetchKeys, PersistentFailureExhaustsRetries) {
  MockAssistant mock([](int, const nlohmann::json&, httplib::Response& res) { res.status = 503; });
  auto cfg = mock.config();
  cfg.endpoint.max_retries = 2;
  try {
    fetch_keys(cfg, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::network);
  }
  EXPECT_EQ(mock.calls.load(), 3);
}

TEST(FetchKeys, MalformedBodyIsSchemaError) {
  MockAssistant mock([](int, const nlohmann::json&, httplib::Response& res) {
    res.set_content(R"({"unexpected": true})", "application/json");
  });
  try {
    fetch_keys(mock.config(), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::schema);
  }
}

TEST(FetchKeys, StopsWhenNoProgress) {
  MockAssistant mock([](int, const nlohmann::json&, httplib::Response& res) { reply_with(res, R"(["same old key text here"])"); });
  auto cfg = mock.config();
  cfg.max_rounds = 2;
  const auto out = fetch_keys(cfg, 5);
  EXPECT_EQ(out.pool.size(), 1u);
  EXPECT_EQ(out.requests, 3u);
}

TEST(FetchKeys, BearerTokenFromEnvironment) {
  MockAssistant mock([](int, const nlohmann::json&, httplib::Response& res) { reply_with(res, R"(["a b c d e"])"); });
  auto cfg = mock.config();
  cfg.endpoint.token_env = "FORGETMARK_TEST_TOKEN";
  ::unsetenv("FORGETMARK_TEST_TOKEN");
  EXPECT_THROW(fetch_keys(cfg, 1), Error);
  ::setenv("FORGETMARK_TEST_TOKEN", "sekrit", 1);
  fetch_keys(cfg, 1);
  EXPECT_EQ(mock.last_auth, "Bearer sekrit");
}

TEST(FetchKeys, UnreachableEndpointIsNetworkError) {
  AssistantEndpointConfig cfg;
  cfg.endpoint.base_url = "http://127.0.0.1:1";
  cfg.endpoint.max_retries = 1;
  cfg.endpoint.backoff_seconds = 0.01;
  cfg.endpoint.timeout_seconds = 1;
  try {
    fetch_keys(cfg, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::network);
  }
}

TEST(Url, Parsing) {
  const auto u = parse_url("http://example.org:9000/api");
  EXPECT_EQ(u.scheme, "http");
  EXPECT_EQ(u.host, "example.org");
  EXPECT_EQ(u.port, 9000);
  EXPECT_EQ(u.prefix, "/api");
  EXPECT_EQ(parse_url("https://h").port, 443);
  EXPECT_THROW(parse_url("ftp//x"), Error);
}
