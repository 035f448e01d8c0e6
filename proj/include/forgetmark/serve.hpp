#pragma once

// Chat-completion endpoint backed by a local model, so a remote suspect can be
// probed over the same wire format as any hosted model. Besides the usual
// reply it honours an optional "target" string and answers with
// "target_logprob" = log P(target | prompt).

#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "fp_construct.hpp"

namespace forgetmark {

/// Reply body for one request. The prompt is the last user message.
inline nlohmann::json serve_completion(const ModelView& view, const Vocab& vocab, const nlohmann::json& request) {
  std::string prompt;
  for (const auto& m : request.at("messages"))
    if (m.value("role", "") == "user") prompt = m.at("content").get<std::string>();
  if (prompt.empty()) fail(ErrorKind::invalid_argument, "request has no user message");
  const auto ids = key_prompt(vocab, prompt);
  const double temperature = request.value("temperature", 0.0);
  const SampleOptions so{request.value<std::size_t>("max_tokens", 16), temperature > 0.0 ? temperature : 1.0,
                         temperature <= 0.0, request.value<std::uint64_t>("seed", 0)};
  const auto trace = sample_with_probs(view, ids, so);
  nlohmann::json body = {
      {"object", "chat.completion"},
      {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", vocab.decode(trace.continuation, true)}}}}}}};
  if (request.contains("target")) {
    TokenSequence target;
    if (request.contains("target_ids")) target = request.at("target_ids").get<TokenSequence>();
    else {
      target = vocab.encode(request.at("target").get<std::string>());
      target.push_back(Vocab::eos);
    }
    for (TokenId t : target)
      if (t >= vocab.size()) fail(ErrorKind::invalid_argument, "target token id out of range");
    body["target_logprob"] = -sequence_prob(view, ids, target).nll;
  }
  return body;
}

class ModelServer {
 public:
  ModelServer(ModelView view, const Vocab& vocab, std::string path = "/v1/chat/completions")
      : view_(view), vocab_(&vocab) {
    server_.Post(path, [this](const httplib::Request& req, httplib::Response& res) {
      try {
        res.set_content(serve_completion(view_, *vocab_, nlohmann::json::parse(req.body)).dump(), "application/json");
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      }
    });
  }

  ~ModelServer() { stop(); }

  /// Binds and serves on a background thread; port 0 picks a free port.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) fail(ErrorKind::network, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Serves on the calling thread until stopped.
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) fail(ErrorKind::network, "cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }

 private:
  ModelView view_;
  const Vocab* vocab_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace forgetmark
