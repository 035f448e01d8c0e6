#pragma once

// Minimal chat-completion client: POST {messages...} and read
// choices[0].message.content, with exponential backoff on transient failures.

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "error.hpp"

namespace forgetmark {

struct EndpointConfig {
  std::string base_url = "http://127.0.0.1:8080";
  std::string path = "/v1/chat/completions";
  std::string token_env;  // name of the variable holding a bearer token; empty = no auth
  std::string model = "assistant";
  double timeout_seconds = 30.0;
  std::size_t max_retries = 3;
  double backoff_seconds = 0.5;  // doubled after every failed attempt

  void validate() const {
    require(!base_url.empty(), "endpoint URL is empty");
    require(timeout_seconds > 0.0, "endpoint timeout must be > 0");
    require(backoff_seconds >= 0.0, "backoff must be >= 0");
  }
};

struct ParsedUrl {
  std::string scheme;
  std::string host;
  int port = 0;
  std::string prefix;  // path prefix, no trailing slash
};

inline ParsedUrl parse_url(const std::string& url) {
  ParsedUrl u;
  const auto sep = url.find("://");
  if (sep == std::string::npos) fail(ErrorKind::invalid_argument, "endpoint URL needs a scheme: " + url);
  u.scheme = url.substr(0, sep);
  if (u.scheme != "http" && u.scheme != "https") fail(ErrorKind::invalid_argument, "unsupported URL scheme " + u.scheme);
  std::string rest = url.substr(sep + 3);
  const auto slash = rest.find('/');
  if (slash != std::string::npos) {
    u.prefix = rest.substr(slash);
    rest = rest.substr(0, slash);
    while (!u.prefix.empty() && u.prefix.back() == '/') u.prefix.pop_back();
  }
  const auto colon = rest.rfind(':');
  if (colon != std::string::npos) {
    u.host = rest.substr(0, colon);
    try {
      u.port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      fail(ErrorKind::invalid_argument, "bad port in URL " + url);
    }
  } else {
    u.host = rest;
    u.port = u.scheme == "https" ? 443 : 80;
  }
  if (u.host.empty()) fail(ErrorKind::invalid_argument, "endpoint URL has no host: " + url);
  return u;
}

struct ChatReply {
  nlohmann::json body;
  std::string content;
  std::size_t retries = 0;
};

inline std::string excerpt(const std::string& s, std::size_t n = 200) {
  return s.size() <= n ? s : s.substr(0, n) + "...";
}

/// Transient failures (connection errors, 429, 5xx) are retried up to
/// `max_retries` times; other HTTP errors fail at once.
inline ChatReply post_chat(const EndpointConfig& cfg, const nlohmann::json& request) {
  cfg.validate();
  std::string token;
  if (!cfg.token_env.empty()) {
    const char* v = std::getenv(cfg.token_env.c_str());
    if (v == nullptr || *v == '\0')
      fail(ErrorKind::invalid_argument, "auth token variable " + cfg.token_env + " is not set");
    token = v;
  }
  const ParsedUrl u = parse_url(cfg.base_url);
  const std::string path = u.prefix + cfg.path;
  httplib::Headers headers;
  if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);

  ChatReply reply;
  double backoff = cfg.backoff_seconds;
  std::string last_error;
  for (std::size_t attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) {
      ++reply.retries;
      spdlog::warn("chat endpoint attempt {} failed ({}); retrying in {:.2f}s", attempt, last_error, backoff);
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= 2.0;
    }
    httplib::Result res{nullptr, httplib::Error::Unknown};
    const auto secs = static_cast<time_t>(cfg.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg.timeout_seconds - static_cast<double>(secs)) * 1e6);
    if (u.scheme == "https") {
#ifdef CPPHTTPLIB_OPENSSL_SUPPORT
      httplib::SSLClient cli(u.host, u.port);
      cli.set_connection_timeout(secs, usecs);
      cli.set_read_timeout(secs, usecs);
      res = cli.Post(path, headers, request.dump(), "application/json");
#else
      fail(ErrorKind::network, "https endpoints need a build with TLS support");
#endif
    } else {
      httplib::Client cli(u.host, u.port);
      cli.set_connection_timeout(secs, usecs);
      cli.set_read_timeout(secs, usecs);
      res = cli.Post(path, headers, request.dump(), "application/json");
    }
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      fail(ErrorKind::network, "chat endpoint returned HTTP " + std::to_string(res->status) + ": " + excerpt(res->body));
    try {
      reply.body = nlohmann::json::parse(res->body);
      reply.content = reply.body.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::schema, "unparseable chat response: " + excerpt(res->body));
    }
    return reply;
  }
  fail(ErrorKind::network, "chat endpoint unreachable after " + std::to_string(cfg.max_retries + 1) +
                               " attempts: " + last_error);
}

inline nlohmann::json chat_request(const std::string& model, const std::string& system, const std::string& user) {
  nlohmann::json messages = nlohmann::json::array();
  if (!system.empty()) messages.push_back({{"role", "system"}, {"content", system}});
  messages.push_back({{"role", "user"}, {"content", user}});
  return {{"model", model}, {"messages", messages}};
}

}  // namespace forgetmark
