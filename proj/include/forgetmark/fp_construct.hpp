#pragma once

// Fingerprint construction: key pool -> sampled continuations -> predictive
// entropy ranking -> forgetting set.

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "model.hpp"
#include "parallel.hpp"
#include "toy_world.hpp"

namespace forgetmark {

inline constexpr int key_pool_schema_version = 1;
inline constexpr int fingerprint_schema_version = 1;

enum class KeyOrigin { template_generator, external_assistant, file };

inline std::string to_string(KeyOrigin o) {
  switch (o) {
    case KeyOrigin::template_generator: return "template";
    case KeyOrigin::external_assistant: return "external-assistant";
    case KeyOrigin::file: return "file";
  }
  return "template";
}

inline KeyOrigin key_origin_from_string(const std::string& s) {
  if (s == "template") return KeyOrigin::template_generator;
  if (s == "external-assistant") return KeyOrigin::external_assistant;
  if (s == "file") return KeyOrigin::file;
  fail(ErrorKind::schema, "unknown key origin '" + s + "'");
}

struct KeyRecord {
  std::uint32_t id = 0;
  std::string text;
  KeyOrigin origin = KeyOrigin::template_generator;

  bool operator==(const KeyRecord&) const = default;
};

struct KeyPool {
  std::vector<KeyRecord> keys;

  std::size_t size() const { return keys.size(); }
  bool operator==(const KeyPool&) const = default;
};

/// Mechanical key screening: token-length band, blocklist, UNK share.
struct ScreeningRules {
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 40;
  double max_unk_fraction = 0.3;
  std::vector<std::string> blocklist;
};

/// Reason a key fails screening, or empty when it passes. `vocab` may be null
/// (UNK share then unchecked).
inline std::string screen_key(std::string_view text, const ScreeningRules& rules, const Vocab* vocab) {
  const auto surface = split_surface(text, TokenizerKind::word);
  if (surface.empty()) return "empty key";
  if (surface.size() < rules.min_tokens || surface.size() > rules.max_tokens)
    return "length " + std::to_string(surface.size()) + " outside [" + std::to_string(rules.min_tokens) + ", " +
           std::to_string(rules.max_tokens) + "]";
  for (const auto& tok : surface)
    for (const auto& bad : rules.blocklist)
      if (tok == detail::lowercase(bad)) return "blocklisted token '" + tok + "'";
  if (vocab && vocab->unk_fraction(text) > rules.max_unk_fraction) return "too many unknown tokens";
  return {};
}

struct ScreeningOutcome {
  KeyPool pool;
  std::vector<std::string> rejected;  // "<text>: <reason>"
  std::size_t duplicates = 0;
};

/// Screens and deduplicates (exact match after whitespace normalization) raw
/// key texts, assigning sequential ids. Stops once `limit` keys are accepted.
inline ScreeningOutcome screen_keys(const std::vector<std::string>& texts, KeyOrigin origin,
                                    const ScreeningRules& rules, const Vocab* vocab,
                                    std::size_t limit = static_cast<std::size_t>(-1)) {
  ScreeningOutcome out;
  std::set<std::string> seen;
  for (const auto& raw : texts) {
    if (out.pool.size() >= limit) break;
    const std::string text = normalize_whitespace(raw);
    if (auto reason = screen_key(text, rules, vocab); !reason.empty()) {
      out.rejected.push_back(text + ": " + reason);
      continue;
    }
    if (!seen.insert(text).second) {
      ++out.duplicates;
      continue;
    }
    out.pool.keys.push_back({static_cast<std::uint32_t>(out.pool.size()), text, origin});
  }
  return out;
}

/// Factual question templates instantiated over the bundled world's entities.
inline KeyPool generate_keys_template(const ToyWorld& world, std::size_t count, std::uint64_t seed,
                                      const ScreeningRules& rules = {}) {
  require(count >= 1, "key count must be >= 1");
  std::vector<std::string> texts;
  for (const auto& f : world.facts)
    for (std::size_t q = 0; q < 2; ++q) texts.push_back(f.question(q));
  Rng rng(derive_seed({seed, 0x6e7}));
  rng.shuffle(std::span<std::string>(texts));
  auto outcome = screen_keys(texts, KeyOrigin::template_generator, rules, nullptr, count);
  if (outcome.pool.size() < count)
    fail(ErrorKind::infeasible, "template exhaustion: only " + std::to_string(outcome.pool.size()) +
                                    " unique keys available, " + std::to_string(count) + " requested");
  return outcome.pool;
}

/// One key per nonempty line.
inline KeyPool load_key_file(const std::string& path, const ScreeningRules& rules, const Vocab* vocab) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read key file " + path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!normalize_whitespace(line).empty()) lines.push_back(line);
  auto outcome = screen_keys(lines, KeyOrigin::file, rules, vocab);
  for (const auto& r : outcome.rejected) spdlog::warn("key file {}: rejected {}", path, r);
  return outcome.pool;
}

/// [BOS] + tokens of the key text.
inline TokenSequence key_prompt(const Vocab& vocab, std::string_view key_text) {
  TokenSequence ids{Vocab::bos};
  const auto body = vocab.encode(key_text);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

// ---------------------------------------------------------------------------

/// U = -(1/M) sum_j sum_t log p_j^(t): the mean sequence NLL of the traces.
inline double predictive_entropy(std::span<const TokenProbTrace> traces) {
  if (traces.empty()) fail(ErrorKind::invalid_argument, "predictive_entropy: empty trace list");
  double total = 0.0;
  for (const auto& t : traces) {
    if (t.probs.empty()) fail(ErrorKind::invalid_argument, "predictive_entropy: empty trace");
    for (double p : t.probs) total -= std::log(p);
  }
  return total / static_cast<double>(traces.size());
}

struct CandidateRecord {
  std::uint32_t key_id = 0;
  std::string key_text;
  std::vector<TokenProbTrace> traces;
  double entropy = 0.0;
  std::size_t min_nll_index = 0;
};

struct CandidateOptions {
  std::size_t samples = 3;  // M
  std::size_t max_tokens = 16;
  double temperature = 1.0;
  bool greedy = false;
  std::uint64_t seed = 17;
  std::size_t min_value_tokens = 4;  // counting the terminating EOS
};

struct CandidateBuild {
  std::vector<CandidateRecord> records;  // ascending key id
  std::vector<std::pair<std::uint32_t, std::string>> dropped;
};

inline std::size_t min_nll_trace(std::span<const TokenProbTrace> traces) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < traces.size(); ++j)
    if (traces[j].nll < traces[best].nll) best = j;
  return best;
}

/// Degenerate continuations: fewer than `min_tokens` tokens. Short generic
/// endings ("today .") are neither specific nor verifiable.
inline bool is_degenerate(const TokenProbTrace& t, std::size_t min_tokens) {
  return t.continuation.size() < std::max<std::size_t>(1, min_tokens);
}

/// M continuations per key. Trace j of key i uses seed derive(seed, i, j). A key
/// is dropped (with a logged reason) if any of its continuations is degenerate.
inline CandidateBuild build_candidates(const ModelView& target, const Vocab& vocab, const KeyPool& pool,
                                       const CandidateOptions& opt) {
  require(opt.samples >= 1, "M must be >= 1");
  std::vector<std::optional<CandidateRecord>> slots(pool.size());
  std::vector<std::string> reasons(pool.size());
  parallel_for(pool.size(), [&](std::size_t i) {
    const KeyRecord& key = pool.keys[i];
    const TokenSequence prompt = key_prompt(vocab, key.text);
    CandidateRecord rec{key.id, key.text, {}, 0.0, 0};
    for (std::size_t j = 0; j < opt.samples; ++j) {
      SampleOptions so{opt.max_tokens, opt.temperature, opt.greedy, derive_seed({opt.seed, key.id, j})};
      auto trace = sample_with_probs(target, prompt, so);
      if (is_degenerate(trace, opt.min_value_tokens)) {
        reasons[i] = "degenerate continuation (length " + std::to_string(trace.continuation.size()) + ") at sample " +
                     std::to_string(j);
        return;
      }
      rec.traces.push_back(std::move(trace));
    }
    rec.entropy = predictive_entropy(rec.traces);
    rec.min_nll_index = min_nll_trace(rec.traces);
    slots[i] = std::move(rec);
  });
  CandidateBuild out;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (slots[i]) {
      out.records.push_back(std::move(*slots[i]));
    } else {
      spdlog::info("dropping key {}: {}", pool.keys[i].id, reasons[i]);
      out.dropped.emplace_back(pool.keys[i].id, reasons[i]);
    }
  }
  std::sort(out.records.begin(), out.records.end(),
            [](const CandidateRecord& a, const CandidateRecord& b) { return a.key_id < b.key_id; });
  return out;
}

// ---------------------------------------------------------------------------

struct FingerprintEntry {
  std::uint32_t key_id = 0;
  std::string key_text;
  std::string value_text;
  TokenSequence value_ids;  // includes the terminating EOS when one was generated
  double entropy = 0.0;
  double baseline_probability = 0.0;
  double baseline_nll = 0.0;

  bool operator==(const FingerprintEntry&) const = default;
};

struct FingerprintProvenance {
  std::string model_hash;
  std::string vocab_hash;
  std::string selection = "entropy";  // or "random"
  std::uint64_t candidate_seed = 0;
  std::uint64_t selection_seed = 0;
  std::size_t samples = 0;  // M
  std::size_t pool_size = 0;  // K

  bool operator==(const FingerprintProvenance&) const = default;
};

struct FingerprintSet {
  FingerprintProvenance provenance;
  std::vector<FingerprintEntry> entries;  // ascending entropy

  std::size_t size() const { return entries.size(); }
  bool operator==(const FingerprintSet&) const = default;
};

namespace construct_detail {

inline FingerprintEntry make_entry(const ModelView& target, const Vocab& vocab, const CandidateRecord& c,
                                   std::size_t trace_index) {
  const TokenProbTrace& t = c.traces.at(trace_index);
  FingerprintEntry e;
  e.key_id = c.key_id;
  e.key_text = c.key_text;
  e.value_ids = t.continuation;
  e.value_text = vocab.decode(t.continuation, true);
  e.entropy = c.entropy;
  const auto score = sequence_prob(target, t.prompt, t.continuation);
  e.baseline_probability = score.probability;
  e.baseline_nll = score.nll;
  return e;
}

inline bool by_entropy_then_id(const CandidateRecord& a, const CandidateRecord& b) {
  if (a.entropy != b.entropy) return a.entropy < b.entropy;
  return a.key_id < b.key_id;
}

}  // namespace construct_detail

/// The N lowest-entropy keys (ties by key id), each paired with its min-NLL
/// continuation (ties by lowest sample index).
inline FingerprintSet select_fingerprints(const ModelView& target, const Vocab& vocab,
                                          std::span<const CandidateRecord> candidates, std::size_t n,
                                          FingerprintProvenance provenance = {}) {
  if (n > candidates.size())
    fail(ErrorKind::infeasible, "insufficient candidates: " + std::to_string(candidates.size()) + " < N=" +
                                    std::to_string(n));
  std::vector<CandidateRecord> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end(), construct_detail::by_entropy_then_id);
  FingerprintSet out;
  provenance.selection = "entropy";
  out.provenance = std::move(provenance);
  std::vector<FingerprintEntry> entries(n);
  parallel_for(n, [&](std::size_t i) {
    entries[i] = construct_detail::make_entry(target, vocab, sorted[i], min_nll_trace(sorted[i].traces));
  });
  out.entries = std::move(entries);
  return out;
}

/// Uniform N-subset with a uniform trace per key; same schema (entries are
/// still ordered by entropy).
inline FingerprintSet random_baseline_select(const ModelView& target, const Vocab& vocab,
                                             std::span<const CandidateRecord> candidates, std::size_t n,
                                             std::uint64_t seed, FingerprintProvenance provenance = {}) {
  if (n > candidates.size())
    fail(ErrorKind::infeasible, "insufficient candidates: " + std::to_string(candidates.size()) + " < N=" +
                                    std::to_string(n));
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed({seed, 0x4a4d}));
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(n);
  std::vector<std::size_t> trace_choice(n);
  for (std::size_t i = 0; i < n; ++i) trace_choice[i] = static_cast<std::size_t>(rng.below(candidates[order[i]].traces.size()));
  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
    return construct_detail::by_entropy_then_id(candidates[order[a]], candidates[order[b]]);
  });
  FingerprintSet out;
  provenance.selection = "random";
  provenance.selection_seed = seed;
  out.provenance = std::move(provenance);
  out.entries.resize(n);
  parallel_for(n, [&](std::size_t i) {
    const std::size_t k = rank[i];
    out.entries[i] = construct_detail::make_entry(target, vocab, candidates[order[k]], trace_choice[k]);
  });
  return out;
}

inline double mean_baseline_probability(const FingerprintSet& fs) {
  require(!fs.entries.empty(), "empty fingerprint set");
  double s = 0.0;
  for (const auto& e : fs.entries) s += e.baseline_probability;
  return s / static_cast<double>(fs.entries.size());
}

// ---------------------------------------------------------------------------
// JSON Lines persistence.

inline std::string key_pool_to_jsonl(const KeyPool& pool) {
  std::string out;
  for (const auto& k : pool.keys) {
    nlohmann::json j{{"schema_version", key_pool_schema_version},
                     {"id", k.id},
                     {"text", k.text},
                     {"origin", to_string(k.origin)}};
    out += j.dump() + "\n";
  }
  return out;
}

inline void check_schema(const nlohmann::json& j, int expected, const std::string& what) {
  const int v = j.value("schema_version", -1);
  if (v != expected)
    fail(ErrorKind::schema, what + ": schema_version " + std::to_string(v) + ", expected " + std::to_string(expected));
}

inline KeyPool key_pool_from_jsonl(const std::string& text) {
  KeyPool pool;
  std::set<std::uint32_t> ids;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      check_schema(j, key_pool_schema_version, "key pool");
      KeyRecord k{j.at("id").get<std::uint32_t>(), j.at("text").get<std::string>(),
                  key_origin_from_string(j.at("origin").get<std::string>())};
      if (!ids.insert(k.id).second) fail(ErrorKind::schema, "duplicate key id " + std::to_string(k.id));
      if (k.text.empty()) fail(ErrorKind::schema, "empty key text for id " + std::to_string(k.id));
      pool.keys.push_back(std::move(k));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::schema, std::string("malformed key pool line: ") + e.what());
    }
  }
  return pool;
}

inline nlohmann::json to_json(const FingerprintProvenance& p) {
  return {{"model_hash", p.model_hash},   {"vocab_hash", p.vocab_hash},         {"selection", p.selection},
          {"candidate_seed", p.candidate_seed}, {"selection_seed", p.selection_seed}, {"M", p.samples},
          {"K", p.pool_size}};
}

inline std::string fingerprint_set_to_jsonl(const FingerprintSet& fs) {
  nlohmann::json header = to_json(fs.provenance);
  header["record"] = "header";
  header["schema_version"] = fingerprint_schema_version;
  header["N"] = fs.entries.size();
  std::string out = header.dump() + "\n";
  for (const auto& e : fs.entries) {
    nlohmann::json j{{"record", "entry"},
                     {"key_id", e.key_id},
                     {"key", e.key_text},
                     {"value", e.value_text},
                     {"value_ids", e.value_ids},
                     {"entropy", e.entropy},
                     {"baseline_probability", e.baseline_probability},
                     {"baseline_nll", e.baseline_nll}};
    out += j.dump() + "\n";
  }
  return out;
}

inline FingerprintSet fingerprint_set_from_jsonl(const std::string& text) {
  FingerprintSet fs;
  std::istringstream in(text);
  bool have_header = false;
  std::size_t declared = 0;
  try {
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const auto record = j.at("record").get<std::string>();
      if (record == "header") {
        check_schema(j, fingerprint_schema_version, "fingerprint set");
        auto& p = fs.provenance;
        p.model_hash = j.at("model_hash").get<std::string>();
        p.vocab_hash = j.at("vocab_hash").get<std::string>();
        p.selection = j.at("selection").get<std::string>();
        p.candidate_seed = j.at("candidate_seed").get<std::uint64_t>();
        p.selection_seed = j.at("selection_seed").get<std::uint64_t>();
        p.samples = j.at("M").get<std::size_t>();
        p.pool_size = j.at("K").get<std::size_t>();
        declared = j.at("N").get<std::size_t>();
        have_header = true;
      } else if (record == "entry") {
        FingerprintEntry e;
        e.key_id = j.at("key_id").get<std::uint32_t>();
        e.key_text = j.at("key").get<std::string>();
        e.value_text = j.at("value").get<std::string>();
        e.value_ids = j.at("value_ids").get<TokenSequence>();
        e.entropy = j.at("entropy").get<double>();
        e.baseline_probability = j.at("baseline_probability").get<double>();
        e.baseline_nll = j.at("baseline_nll").get<double>();
        fs.entries.push_back(std::move(e));
      } else {
        fail(ErrorKind::schema, "unknown fingerprint record type '" + record + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("malformed fingerprint set: ") + e.what());
  }
  if (!have_header) fail(ErrorKind::schema, "fingerprint set has no header record");
  if (declared != fs.entries.size())
    fail(ErrorKind::schema, "fingerprint set declares N=" + std::to_string(declared) + " but holds " +
                                std::to_string(fs.entries.size()) + " entries");
  return fs;
}

inline std::uint64_t fingerprint_hash(const FingerprintSet& fs) { return fnv1a64(fingerprint_set_to_jsonl(fs)); }

}  // namespace forgetmark
