#pragma once

// Key pools from an external chat assistant. Responses may be a JSON array of
// strings or a plain list; both are parsed permissively and screened strictly.

#include <regex>
#include <string>
#include <vector>

#include "fp_construct.hpp"
#include "http_client.hpp"

namespace forgetmark {

inline constexpr std::string_view default_assistant_prompt =
    "You write test prompts for a small question-answering model. Produce distinct, self-contained questions "
    "that a person could ask in one turn. Each must be between 4 and 40 words, use plain everyday words, have "
    "one short factual answer, and contain nothing unsafe. Answer with a JSON array of strings and nothing else.";

struct AssistantEndpointConfig {
  EndpointConfig endpoint;
  std::string system_prompt{default_assistant_prompt};
  std::size_t max_rounds = 5;  // requests without progress before giving up

  void validate() const {
    endpoint.validate();
    require(!system_prompt.empty(), "assistant prompt is empty");
  }
};

/// JSON array of strings, {"keys": [...]}, or one key per line (bullets and
/// list numbering stripped).
inline std::vector<std::string> parse_key_list(const std::string& content) {
  std::vector<std::string> out;
  const auto trimmed = normalize_whitespace(content);
  if (!trimmed.empty() && (trimmed.front() == '[' || trimmed.front() == '{')) {
    try {
      auto j = nlohmann::json::parse(content);
      if (j.is_object() && j.contains("keys")) j = j.at("keys");
      if (j.is_array()) {
        for (const auto& item : j)
          if (item.is_string()) out.push_back(item.get<std::string>());
        return out;
      }
    } catch (const nlohmann::json::exception&) {
      // fall through to line parsing
    }
  }
  static const std::regex bullet(R"(^\s*(?:[-*•]|\d+[.)]|\(\d+\))\s*)");
  std::istringstream in(content);
  for (std::string line; std::getline(in, line);) {
    line = std::regex_replace(line, bullet, "");
    while (!line.empty() && (line.back() == '\r' || line.back() == ',' || line.back() == ' ')) line.pop_back();
    if (line.size() >= 2 && line.front() == '"' && line.back() == '"') line = line.substr(1, line.size() - 2);
    if (!normalize_whitespace(line).empty() && line != "[" && line != "]") out.push_back(line);
  }
  return out;
}

struct FetchResult {
  KeyPool pool;
  std::size_t requests = 0;
  std::size_t retries = 0;
  std::size_t duplicates = 0;
  std::vector<std::string> rejected;
};

inline FetchResult fetch_keys(const AssistantEndpointConfig& config, std::size_t count, const ScreeningRules& rules = {},
                              const Vocab* vocab = nullptr) {
  config.validate();
  require(count >= 1, "key count must be >= 1");
  FetchResult out;
  std::vector<std::string> raw;
  std::size_t stalled = 0;
  while (out.pool.size() < count && stalled < config.max_rounds) {
    const std::size_t want = count - out.pool.size();
    const auto request = chat_request(config.endpoint.model, config.system_prompt,
                                      "Return " + std::to_string(want) + " new questions.");
    auto reply = post_chat(config.endpoint, request);
    ++out.requests;
    out.retries += reply.retries;
    const auto keys = parse_key_list(reply.content);
    if (keys.empty()) fail(ErrorKind::schema, "assistant reply holds no keys: " + excerpt(reply.content));
    raw.insert(raw.end(), keys.begin(), keys.end());
    const std::size_t before = out.pool.size();
    auto screened = screen_keys(raw, KeyOrigin::external_assistant, rules, vocab, count);
    out.pool = std::move(screened.pool);
    out.duplicates = screened.duplicates;
    out.rejected = std::move(screened.rejected);
    stalled = out.pool.size() == before ? stalled + 1 : 0;
  }
  if (out.duplicates > 0) spdlog::warn("assistant returned {} duplicate keys; deduplicated", out.duplicates);
  for (const auto& r : out.rejected) spdlog::warn("assistant key rejected: {}", r);
  if (out.pool.size() < count)
    spdlog::warn("assistant produced {} usable keys out of {} requested", out.pool.size(), count);
  return out;
}

}  // namespace forgetmark
