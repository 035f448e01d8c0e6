#pragma once

// Verification: probe a suspect with fingerprint keys and aggregate per-key
// evidence into a fingerprint success rate (FSR).

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fp_construct.hpp"
#include "http_client.hpp"
#include "rouge.hpp"

namespace forgetmark {

enum class AccessMode { gray, black, both };

inline std::string to_string(AccessMode m) {
  switch (m) {
    case AccessMode::gray: return "gray";
    case AccessMode::black: return "black";
    case AccessMode::both: return "both";
  }
  return "gray";
}

inline AccessMode access_mode_from_string(const std::string& s) {
  if (s == "gray") return AccessMode::gray;
  if (s == "black") return AccessMode::black;
  if (s == "both") return AccessMode::both;
  fail(ErrorKind::invalid_argument, "unknown access mode '" + s + "' (gray, black, both)");
}

struct VerifyConfig {
  double tau_prb = 1e-3;
  double tau_rg = 1e-3;
  AccessMode mode = AccessMode::gray;
  std::size_t max_tokens = 16;
  bool greedy = true;
  std::size_t samples = 1;  // sampling mode: the ROUGE term is the majority vote over this many draws
  double temperature = 1.0;
  std::uint64_t seed = 41;
  double decision_threshold = 0.9;  // CLI exit status only

  void validate() const {
    require(tau_prb > 0.0 && tau_prb < 1.0, "tau_prb must be in (0, 1)");
    require(tau_rg > 0.0 && tau_rg < 1.0, "tau_rg must be in (0, 1)");
    require(max_tokens >= 1, "max tokens must be >= 1");
    require(greedy || samples >= 1, "sampling mode needs at least one sample");
    require(decision_threshold >= 0.0 && decision_threshold <= 1.0, "decision threshold must be in [0, 1]");
  }

  bool uses_likelihood() const { return mode != AccessMode::black; }
};

/// One key's observations. `probability` is absent without likelihood access.
struct Evidence {
  std::optional<double> probability;
  double rouge = 0.0;
};

/// 1[P < tau_prb OR ROUGE < tau_rg]; an absent probability makes its term false.
inline bool indicator(const Evidence& e, double tau_prb, double tau_rg) {
  const bool prb = e.probability.has_value() && *e.probability < tau_prb;
  return prb || e.rouge < tau_rg;
}

inline double fsr(std::span<const Evidence> evidence, double tau_prb, double tau_rg) {
  if (evidence.empty()) fail(ErrorKind::invalid_argument, "FSR over an empty evidence list");
  std::size_t hits = 0;
  for (const auto& e : evidence) hits += indicator(e, tau_prb, tau_rg);
  return static_cast<double>(hits) / static_cast<double>(evidence.size());
}

/// Probability term alone (keys without a probability count as misses).
inline double fsr_probability(std::span<const Evidence> evidence, double tau_prb) {
  if (evidence.empty()) fail(ErrorKind::invalid_argument, "FSR over an empty evidence list");
  std::size_t hits = 0;
  for (const auto& e : evidence) hits += e.probability.has_value() && *e.probability < tau_prb;
  return static_cast<double>(hits) / static_cast<double>(evidence.size());
}

inline double fsr_rouge(std::span<const Evidence> evidence, double tau_rg) {
  if (evidence.empty()) fail(ErrorKind::invalid_argument, "FSR over an empty evidence list");
  std::size_t hits = 0;
  for (const auto& e : evidence) hits += e.rouge < tau_rg;
  return static_cast<double>(hits) / static_cast<double>(evidence.size());
}

// ---------------------------------------------------------------------------
// Suspects.

struct GenerationSettings {
  std::size_t max_tokens = 16;
  bool greedy = true;
  double temperature = 1.0;
};

class Suspect {
 public:
  virtual ~Suspect() = default;
  virtual std::string identity() const = 0;
  virtual bool exposes_likelihood() const = 0;
  /// Joint P(value | key).
  virtual double joint_probability(const FingerprintEntry& entry) const = 0;
  /// Detokenized continuation of the key (special tokens removed).
  virtual std::string generate(const std::string& key, const GenerationSettings& g, std::uint64_t seed) const = 0;
};

/// Local weights (with an optional adapter) sharing the owner's vocabulary.
class LocalSuspect final : public Suspect {
 public:
  LocalSuspect(const Weights& base, const Vocab& vocab, const LoraAdapter* adapter = nullptr)
      : view_(base, adapter), vocab_(&vocab) {
    identity_ = hex64(base.hash());
    if (adapter) identity_ += "+" + hex64(adapter->hash());
  }

  std::string identity() const override { return identity_; }
  bool exposes_likelihood() const override { return true; }

  double joint_probability(const FingerprintEntry& entry) const override {
    return sequence_prob(view_, key_prompt(*vocab_, entry.key_text), entry.value_ids).probability;
  }

  std::string generate(const std::string& key, const GenerationSettings& g, std::uint64_t seed) const override {
    const SampleOptions so{g.max_tokens, g.temperature, g.greedy, seed};
    return vocab_->decode(sample_with_probs(view_, key_prompt(*vocab_, key), so).continuation, true);
  }

 private:
  ModelView view_;
  const Vocab* vocab_;
  std::string identity_;
};

/// A chat-completion endpoint. Likelihood access needs the server to honour a
/// "target" field (text to score after the prompt) and answer with
/// "target_logprob"; the bundled `serve` command does.
class RemoteSuspect final : public Suspect {
 public:
  RemoteSuspect(EndpointConfig endpoint, bool likelihood) : endpoint_(std::move(endpoint)), likelihood_(likelihood) {}

  std::string identity() const override { return endpoint_.base_url + endpoint_.path + "#" + endpoint_.model; }
  bool exposes_likelihood() const override { return likelihood_; }

  double joint_probability(const FingerprintEntry& entry) const override {
    if (!likelihood_) fail(ErrorKind::invalid_argument, "likelihoods requested from a black-box suspect");
    auto request = chat_request(endpoint_.model, "", entry.key_text);
    request["max_tokens"] = 1;
    request["target"] = entry.value_text;
    request["target_ids"] = entry.value_ids;
    const auto reply = post_chat(endpoint_, request);
    if (!reply.body.contains("target_logprob"))
      fail(ErrorKind::schema, "endpoint response lacks target_logprob; gray-box mode needs likelihood access");
    return std::exp(reply.body.at("target_logprob").get<double>());
  }

  std::string generate(const std::string& key, const GenerationSettings& g, std::uint64_t seed) const override {
    auto request = chat_request(endpoint_.model, "", key);
    request["max_tokens"] = g.max_tokens;
    request["temperature"] = g.greedy ? 0.0 : g.temperature;
    request["seed"] = seed;
    return post_chat(endpoint_, request).content;
  }

 private:
  EndpointConfig endpoint_;
  bool likelihood_;
};

// ---------------------------------------------------------------------------
// Reports.

struct KeyResult {
  std::uint32_t key_id = 0;
  std::string key;
  std::string value;
  std::optional<double> probability;
  std::string generated;
  double rouge = 0.0;
  bool bit = false;

  Evidence evidence() const { return Evidence{probability, rouge}; }
};

struct VerificationReport {
  int schema_version = 1;
  VerifyConfig config;
  std::string suspect;
  std::string fingerprint_hash;
  std::vector<KeyResult> keys;  // ascending key id
  std::optional<double> fsr_prb;
  double fsr_rouge = 0.0;
  double fsr = 0.0;  // from the stored bits

  std::vector<Evidence> evidence() const {
    std::vector<Evidence> e;
    for (const auto& k : keys) e.push_back(k.evidence());
    return e;
  }

  /// Aggregate equals the mean of the stored bits exactly.
  bool self_consistent() const {
    if (keys.empty()) return false;
    std::size_t n = 0;
    for (const auto& k : keys) n += k.bit;
    return fsr == static_cast<double>(n) / static_cast<double>(keys.size());
  }
};

inline nlohmann::json to_json(const VerifyConfig& c) {
  return {{"tau_prb", c.tau_prb},       {"tau_rg", c.tau_rg},   {"mode", to_string(c.mode)},
          {"max_tokens", c.max_tokens}, {"greedy", c.greedy},   {"samples", c.samples},
          {"temperature", c.temperature}, {"seed", c.seed}, {"decision_threshold", c.decision_threshold}};
}

inline VerifyConfig verify_config_from_json(const nlohmann::json& j) {
  VerifyConfig c;
  c.tau_prb = j.at("tau_prb").get<double>();
  c.tau_rg = j.at("tau_rg").get<double>();
  c.mode = access_mode_from_string(j.at("mode").get<std::string>());
  c.max_tokens = j.at("max_tokens").get<std::size_t>();
  c.greedy = j.at("greedy").get<bool>();
  c.samples = j.at("samples").get<std::size_t>();
  c.temperature = j.at("temperature").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.decision_threshold = j.at("decision_threshold").get<double>();
  return c;
}

inline nlohmann::json to_json(const VerificationReport& r) {
  nlohmann::json keys = nlohmann::json::array();
  for (const auto& k : r.keys) {
    keys.push_back({{"key_id", k.key_id},
                    {"key", k.key},
                    {"value", k.value},
                    {"probability", k.probability ? nlohmann::json(*k.probability) : nlohmann::json(nullptr)},
                    {"generated", k.generated},
                    {"rouge_l", k.rouge},
                    {"bit", k.bit ? 1 : 0}});
  }
  return {{"schema_version", r.schema_version},
          {"suspect", r.suspect},
          {"fingerprint_hash", r.fingerprint_hash},
          {"config", to_json(r.config)},
          {"fsr_prb", r.fsr_prb ? nlohmann::json(*r.fsr_prb) : nlohmann::json(nullptr)},
          {"fsr_rouge", r.fsr_rouge},
          {"fsr", r.fsr},
          {"keys", keys}};
}

inline VerificationReport verification_report_from_json(const nlohmann::json& j) {
  VerificationReport r;
  try {
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != 1)
      fail(ErrorKind::schema, "verification report schema_version " + std::to_string(r.schema_version) + ", expected 1");
    r.suspect = j.at("suspect").get<std::string>();
    r.fingerprint_hash = j.at("fingerprint_hash").get<std::string>();
    r.config = verify_config_from_json(j.at("config"));
    if (!j.at("fsr_prb").is_null()) r.fsr_prb = j.at("fsr_prb").get<double>();
    r.fsr_rouge = j.at("fsr_rouge").get<double>();
    r.fsr = j.at("fsr").get<double>();
    for (const auto& k : j.at("keys")) {
      KeyResult kr;
      kr.key_id = k.at("key_id").get<std::uint32_t>();
      kr.key = k.at("key").get<std::string>();
      kr.value = k.at("value").get<std::string>();
      if (!k.at("probability").is_null()) kr.probability = k.at("probability").get<double>();
      kr.generated = k.at("generated").get<std::string>();
      kr.rouge = k.at("rouge_l").get<double>();
      kr.bit = k.at("bit").get<int>() != 0;
      r.keys.push_back(std::move(kr));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("malformed verification report: ") + e.what());
  }
  return r;
}

namespace verify_detail {

/// Greedy: one generation. Sampling: `samples` draws; the draw with the median
/// ROUGE is kept, so the ROUGE term equals the majority vote for odd counts.
inline std::pair<std::string, double> generate_and_score(const Suspect& suspect, const FingerprintEntry& e,
                                                         const VerifyConfig& cfg) {
  const GenerationSettings g{cfg.max_tokens, cfg.greedy, cfg.temperature};
  if (cfg.greedy) {
    auto text = suspect.generate(e.key_text, g, 0);
    const double score = rouge_l(text, e.value_text);
    return {std::move(text), score};
  }
  std::vector<std::pair<double, std::string>> draws;
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    auto text = suspect.generate(e.key_text, g, derive_seed({cfg.seed, e.key_id, s}));
    draws.emplace_back(rouge_l(text, e.value_text), std::move(text));
  }
  std::stable_sort(draws.begin(), draws.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  auto& mid = draws[(draws.size() - 1) / 2];
  return {std::move(mid.second), mid.first};
}

}  // namespace verify_detail

inline VerificationReport probe_suspect(const Suspect& suspect, const FingerprintSet& fingerprints,
                                        const VerifyConfig& config) {
  config.validate();
  if (fingerprints.entries.empty()) fail(ErrorKind::invalid_argument, "fingerprint set is empty");
  if (config.uses_likelihood() && !suspect.exposes_likelihood())
    fail(ErrorKind::invalid_argument, "gray-box verification needs likelihood access to the suspect");
  std::vector<const FingerprintEntry*> order;
  for (const auto& e : fingerprints.entries) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->key_id < b->key_id; });

  VerificationReport report;
  report.config = config;
  report.suspect = suspect.identity();
  report.fingerprint_hash = hex64(fingerprint_hash(fingerprints));
  report.keys.resize(order.size());
  parallel_for(order.size(), [&](std::size_t i) {
    const FingerprintEntry& e = *order[i];
    KeyResult& k = report.keys[i];
    k.key_id = e.key_id;
    k.key = e.key_text;
    k.value = e.value_text;
    if (config.uses_likelihood()) k.probability = suspect.joint_probability(e);
    std::tie(k.generated, k.rouge) = verify_detail::generate_and_score(suspect, e, config);
    k.bit = indicator(k.evidence(), config.tau_prb, config.tau_rg);
  });
  const auto ev = report.evidence();
  if (config.uses_likelihood()) report.fsr_prb = fsr_probability(ev, config.tau_prb);
  report.fsr_rouge = fsr_rouge(ev, config.tau_rg);
  std::size_t bits = 0;
  for (const auto& k : report.keys) bits += k.bit;
  report.fsr = static_cast<double>(bits) / static_cast<double>(report.keys.size());
  return report;
}

// ---------------------------------------------------------------------------
// Threshold calibration on negative controls.

struct Calibration {
  double tau_prb = 0.0;
  double tau_rg = 0.0;
  bool feasible = false;
  std::string reason;                // why calibration failed, if it did
  std::vector<double> control_fsr;   // combined FSR of each control at the returned thresholds
};

namespace verify_detail {

inline constexpr int bisection_steps = 40;

/// Largest t in the decade grid {1e-1 ... 1e-8}, refined upward by log-space
/// bisection towards the next decade, with ok(t) true. nullopt if even 1e-8 fails.
template <typename Ok>
std::optional<double> largest_feasible(const Ok& ok) {
  double lo = 0.0;
  for (int e = 1; e <= 8; ++e) {
    const double t = std::pow(10.0, -e);
    if (ok(t)) {
      lo = t;
      break;
    }
  }
  if (lo == 0.0) return std::nullopt;
  if (lo >= 0.1) return lo;
  double a = std::log10(lo), b = a + 1.0;  // b infeasible
  for (int i = 0; i < bisection_steps; ++i) {
    const double mid = 0.5 * (a + b);
    if (ok(std::pow(10.0, mid))) a = mid; else b = mid;
  }
  return std::pow(10.0, a);
}

}  // namespace verify_detail

/// Largest thresholds for which the combined FSR on every control stays at or
/// below `target_fp`. The probability threshold is fitted first (ROUGE term off),
/// then the ROUGE threshold with the probability threshold fixed.
inline Calibration calibrate_thresholds(const std::vector<std::vector<Evidence>>& controls, double target_fp) {
  require(!controls.empty(), "calibration needs at least one control model");
  require(target_fp >= 0.0 && target_fp < 1.0, "target false-positive rate must be in [0, 1)");
  for (const auto& c : controls) require(!c.empty(), "control evidence is empty");
  Calibration out;
  const bool have_prob = std::all_of(controls.begin(), controls.end(), [](const auto& c) {
    return std::all_of(c.begin(), c.end(), [](const Evidence& e) { return e.probability.has_value(); });
  });
  auto all_ok = [&](double tp, double tr) {
    for (const auto& c : controls)
      if (fsr(c, tp, tr) > target_fp) return false;
    return true;
  };
  constexpr double off = 1e-300;  // a threshold no score falls below
  if (have_prob) {
    const auto tp = verify_detail::largest_feasible([&](double t) { return all_ok(t, off); });
    if (!tp) {
      out.reason = "no probability threshold >= 1e-8 keeps control FSR at or below the target";
      return out;
    }
    out.tau_prb = *tp;
  } else {
    out.tau_prb = 0.1;  // unused without likelihoods
  }
  const auto tr = verify_detail::largest_feasible([&](double t) { return all_ok(out.tau_prb, t); });
  if (!tr) {
    out.reason = "no ROUGE threshold >= 1e-8 keeps control FSR at or below the target";
    return out;
  }
  out.tau_rg = *tr;
  out.feasible = true;
  for (const auto& c : controls) out.control_fsr.push_back(fsr(c, out.tau_prb, out.tau_rg));
  return out;
}

/// Evidence of each control under the given generation settings (thresholds unused).
inline std::vector<Evidence> control_evidence(const Suspect& control, const FingerprintSet& fs, const VerifyConfig& cfg) {
  return probe_suspect(control, fs, cfg).evidence();
}

}  // namespace forgetmark
