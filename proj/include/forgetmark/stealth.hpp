#pragma once

// Stealth audits: key perplexity under estimator models, and the Token Forcing
// scanner (single-token prefixes, greedy generation, substring match against
// known responses).

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "parallel.hpp"
#include "toy_world.hpp"
#include "train.hpp"

namespace forgetmark {

struct KeyPerplexity {
  std::vector<double> per_key;
  double mean = 0.0;
};

/// Per-key exp(mean token NLL) of the key tokens after BOS.
inline KeyPerplexity key_perplexity(const ModelView& estimator, const Vocab& vocab,
                                    const std::vector<std::string>& keys) {
  if (keys.empty()) fail(ErrorKind::invalid_argument, "key perplexity over an empty key list");
  KeyPerplexity out;
  out.per_key.resize(keys.size());
  const TokenSequence bos{Vocab::bos};
  parallel_for(keys.size(), [&](std::size_t i) {
    const auto ids = vocab.encode(keys[i]);
    if (ids.empty()) fail(ErrorKind::invalid_argument, "key '" + keys[i] + "' has no tokens");
    const auto score = sequence_prob(estimator, bos, ids);
    out.per_key[i] = std::exp(score.nll / static_cast<double>(ids.size()));
  });
  for (double p : out.per_key) out.mean += p;
  out.mean /= static_cast<double>(keys.size());
  return out;
}

/// The key's whitespace tokens in a seed-determined random order.
inline std::string shuffle_tokens(const std::string& text, std::uint64_t seed) {
  auto words = whitespace_tokens(text);
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(words));
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

enum class TfVariant { forced, bos_forced, templated };

inline constexpr TfVariant all_tf_variants[] = {TfVariant::forced, TfVariant::bos_forced, TfVariant::templated};

inline std::string to_string(TfVariant v) {
  switch (v) {
    case TfVariant::forced: return "TF-F";
    case TfVariant::bos_forced: return "TF-BF";
    case TfVariant::templated: return "TF-TF";
  }
  return "TF-F";
}

inline TfVariant tf_variant_from_string(const std::string& s) {
  for (TfVariant v : all_tf_variants)
    if (to_string(v) == s) return v;
  fail(ErrorKind::invalid_argument, "unknown token forcing variant '" + s + "'");
}

/// TF-F: the token alone. TF-BF: BOS then the token. TF-TF: the token placed
/// in the instruction template, after BOS.
inline TokenSequence tf_prefix(TfVariant variant, const Vocab& vocab, TokenId token) {
  switch (variant) {
    case TfVariant::forced: return {token};
    case TfVariant::bos_forced: return {Vocab::bos, token};
    case TfVariant::templated: {
      TokenSequence ids{Vocab::bos};
      const std::string tmpl(instruction_template);
      const auto slot = tmpl.find("{t}");
      for (TokenId id : vocab.encode(tmpl.substr(0, slot))) ids.push_back(id);
      ids.push_back(token);
      for (TokenId id : vocab.encode(tmpl.substr(slot + 3))) ids.push_back(id);
      return ids;
    }
  }
  return {token};
}

/// Every non-special token id.
inline std::vector<TokenId> full_vocab_probes(const Vocab& vocab) {
  std::vector<TokenId> out;
  for (TokenId id = Vocab::unk + 1; id < vocab.size(); ++id) out.push_back(id);
  return out;
}

/// Whole-token substring test on whitespace-normalized text.
inline bool contains_response(const std::string& generation, const std::string& response) {
  const std::string r = normalize_whitespace(response);
  if (r.empty()) return false;
  return (" " + normalize_whitespace(generation) + " ").find(" " + r + " ") != std::string::npos;
}

struct TfDetection {
  TokenId probe = 0;
  std::size_t response = 0;  // index into the known responses
  std::string generation;
};

struct TfResult {
  TfVariant variant = TfVariant::forced;
  std::size_t probes = 0;
  std::vector<bool> detected;  // per known response
  std::vector<TfDetection> hits;

  std::size_t detected_count() const {
    std::size_t n = 0;
    for (bool d : detected) n += d;
    return n;
  }
  /// Detected responses / probed responses.
  double detection_rate() const {
    return detected.empty() ? 0.0 : static_cast<double>(detected_count()) / static_cast<double>(detected.size());
  }
};

inline TfResult token_forcing(const ModelView& suspect, const Vocab& vocab, const std::vector<std::string>& known,
                              TfVariant variant, const std::vector<TokenId>& probes, std::size_t max_tokens = 16) {
  require(!probes.empty(), "token forcing needs at least one probe token");
  require(!known.empty(), "token forcing needs at least one known response");
  std::vector<std::string> generations(probes.size());
  parallel_for(probes.size(), [&](std::size_t i) {
    const auto prefix = tf_prefix(variant, vocab, probes[i]);
    generations[i] = vocab.decode(greedy_continuation(suspect, prefix, max_tokens).continuation, true);
  });
  TfResult out{variant, probes.size(), std::vector<bool>(known.size(), false), {}};
  for (std::size_t i = 0; i < probes.size(); ++i)
    for (std::size_t r = 0; r < known.size(); ++r)
      if (contains_response(generations[i], known[r])) {
        out.detected[r] = true;
        out.hits.push_back({probes[i], r, generations[i]});
      }
  return out;
}

struct StealthReport {
  std::vector<std::string> keys;
  std::vector<std::pair<std::string, KeyPerplexity>> estimators;  // (name, ppl)
  std::vector<TfResult> token_forcing;
  std::vector<std::string> known_responses;

  /// Responses detected under any variant / known responses.
  double overall_detection_rate() const {
    if (known_responses.empty() || token_forcing.empty()) return 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < known_responses.size(); ++r) {
      bool any = false;
      for (const auto& t : token_forcing) any = any || t.detected.at(r);
      n += any;
    }
    return static_cast<double>(n) / static_cast<double>(known_responses.size());
  }

  nlohmann::json to_json(const Vocab& vocab) const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["keys"] = keys;
    j["estimators"] = nlohmann::json::array();
    for (const auto& [name, p] : estimators)
      j["estimators"].push_back({{"name", name}, {"per_key", p.per_key}, {"mean_ppl", p.mean}});
    j["known_responses"] = known_responses;
    j["token_forcing"] = nlohmann::json::array();
    for (const auto& t : token_forcing) {
      nlohmann::json hits = nlohmann::json::array();
      for (const auto& h : t.hits)
        hits.push_back({{"probe", vocab.token(h.probe)}, {"response", h.response}, {"generation", h.generation}});
      j["token_forcing"].push_back({{"variant", to_string(t.variant)},
                                    {"probes", t.probes},
                                    {"detected", t.detected_count()},
                                    {"detection_rate", t.detection_rate()},
                                    {"hits", hits}});
    }
    j["overall_detection_rate"] = overall_detection_rate();
    return j;
  }
};

struct BackdoorOptions {
  std::size_t steps = 300;
  std::size_t copies = 40;  // trigger documents mixed into the corpus
  double lr = 2e-3;
  std::uint64_t seed = 31;
};

/// Full-parameter fine-tune that plants a fixed trigger -> response pair, the
/// classic instruction-tuned backdoor fingerprint. The trigger appears after
/// BOS, bare, and inside the instruction template, so the response is emitted
/// regardless of framing.
inline Weights backdoor_positive_control(const Weights& base, const Vocab& vocab, const std::vector<std::string>& corpus,
                                         const std::string& trigger, const std::string& response,
                                         const BackdoorOptions& opt = {}) {
  const auto trig = vocab.encode(trigger);
  require(!trig.empty(), "empty trigger");
  for (TokenId id : trig)
    if (id == Vocab::unk) fail(ErrorKind::invalid_argument, "trigger '" + trigger + "' is not in the vocabulary");
  const auto trig_norm = normalize_whitespace(trigger);
  for (const auto& line : corpus)
    if (contains_response(line, trig_norm))
      fail(ErrorKind::invalid_argument, "trigger '" + trigger + "' occurs in the training corpus");
  const auto resp = vocab.encode(response);
  if (opt.steps == 0) return base;

  auto docs = encode_corpus(vocab, corpus);
  const std::string tmpl(instruction_template);
  const auto slot = tmpl.find("{t}");
  TokenSequence with_bos{Vocab::bos}, bare, templated{Vocab::bos};
  for (TokenId id : vocab.encode(tmpl.substr(0, slot))) templated.push_back(id);
  templated.insert(templated.end(), trig.begin(), trig.end());
  for (TokenId id : vocab.encode(tmpl.substr(slot + 3))) templated.push_back(id);
  for (auto* seq : {&with_bos, &bare, &templated}) {
    if (seq != &templated) seq->insert(seq->end(), trig.begin(), trig.end());
    seq->insert(seq->end(), resp.begin(), resp.end());
    seq->push_back(Vocab::eos);
  }
  for (std::size_t i = 0; i < opt.copies; ++i) {
    docs.push_back(with_bos);
    docs.push_back(bare);
    docs.push_back(templated);
  }
  TrainLmOptions t;
  t.steps = opt.steps;
  t.lr = opt.lr;
  t.seed = opt.seed;
  Weights out = fine_tune_lm(base, docs, t);
  TokenSequence prompt{Vocab::bos};
  prompt.insert(prompt.end(), trig.begin(), trig.end());
  const auto g = greedy_continuation(ModelView(out), prompt, resp.size() + 1);
  if (g.continuation.size() < resp.size() || !std::equal(resp.begin(), resp.end(), g.continuation.begin()))
    fail(ErrorKind::infeasible, "backdoor control did not memorize the response within " + std::to_string(opt.steps) +
                                    " steps (got '" + vocab.decode(g.continuation, true) + "')");
  return out;
}

}  // namespace forgetmark
