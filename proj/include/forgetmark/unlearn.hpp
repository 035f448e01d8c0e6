#pragma once

// Signed-likelihood unlearning: LoRA adapters trained to push down log p(v|k)
// on the forgetting set while pulling up log p(y|x) on a retention set.

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "fp_construct.hpp"
#include "lora.hpp"
#include "optim.hpp"

namespace forgetmark {

struct UnlearnConfig {
  double gamma = 1.0;  // forget weight
  double alpha = 1.0;  // retain weight
  double lr = 1e-2;
  std::size_t steps = 400;
  std::size_t forget_batch = 8;
  std::size_t retain_batch = 16;
  std::size_t retention_ratio = 9;
  bool early_stop = true;
  double early_stop_probability = 1e-6;  // on the mean joint probability over the forgetting set
  double early_stop_drop = 0.0;  // > 0: also stop once every key is below this fraction of its baseline
  std::size_t perplexity_every = 25;
  std::size_t perplexity_sample = 200;  // retention pairs used for the periodic perplexity snapshot
  double clip_norm = 1.0;
  bool cosine = false;  // decay lr to lr_floor * lr over the step budget
  double lr_floor = 0.05;
  std::uint64_t seed = 23;
  LoraConfig lora;

  void validate() const {
    require(gamma > 0.0, "gamma must be > 0");
    require(alpha >= 0.0, "alpha must be >= 0");
    require(lr > 0.0, "learning rate must be > 0");
    require(forget_batch >= 1, "forget batch size must be >= 1");
    require(early_stop_probability > 0.0 && early_stop_probability < 1.0, "early-stop threshold must be in (0, 1)");
    require(early_stop_drop >= 0.0 && early_stop_drop < 1.0, "per-key early-stop drop must be in [0, 1)");
  }
};

struct RetentionPair {
  std::string prompt;
  std::string response;
  Example example;  // [BOS] prompt -> response [EOS]

  bool operator==(const RetentionPair&) const = default;
};

struct RetentionSet {
  std::vector<RetentionPair> pairs;

  std::size_t size() const { return pairs.size(); }
  bool operator==(const RetentionSet&) const = default;
};

/// Splits a corpus line into (prompt, response): after the first '?' when there
/// is one, otherwise at a random word boundary leaving >= 2 words per side.
inline std::optional<std::pair<std::string, std::string>> split_line(const std::string& line, Rng& rng) {
  const auto words = whitespace_tokens(line);
  if (words.size() < 4) return std::nullopt;
  std::size_t cut = 0;
  for (std::size_t i = 0; i + 1 < words.size(); ++i)
    if (words[i] == "?") {
      cut = i + 1;
      break;
    }
  if (cut == 0) cut = 2 + static_cast<std::size_t>(rng.below(words.size() - 3));
  auto join = [&](std::size_t b, std::size_t e) {
    std::string s;
    for (std::size_t i = b; i < e; ++i) s += (i > b ? " " : "") + words[i];
    return s;
  };
  return std::make_pair(join(0, cut), join(cut, words.size()));
}

inline RetentionPair make_retention_pair(const Vocab& vocab, std::string prompt, std::string response) {
  Example ex{key_prompt(vocab, prompt), vocab.encode(response)};
  ex.target.push_back(Vocab::eos);
  return RetentionPair{std::move(prompt), std::move(response), std::move(ex)};
}

namespace unlearn_detail {

/// Every usable (prompt, response) split of `corpus` after the fingerprint
/// collision filter, in a seed-determined order. A pair collides when its
/// prompt is a fingerprint key or its response is a fingerprint value: a
/// paraphrased key with the same answer would pull the retain term directly
/// against the forget term.
inline std::vector<std::pair<std::string, std::string>> shuffled_candidates(const std::vector<std::string>& corpus,
                                                                            const FingerprintSet& fingerprints,
                                                                            std::uint64_t seed) {
  std::set<std::string> keys, values;
  for (const auto& e : fingerprints.entries) {
    keys.insert(normalize_whitespace(e.key_text));
    values.insert(normalize_whitespace(e.value_text));
  }
  Rng rng(derive_seed({seed, 0x5e7}));
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& line : corpus) {
    auto split = split_line(line, rng);
    if (!split) continue;
    if (keys.contains(split->first) || values.contains(split->second)) continue;
    out.push_back(std::move(*split));
  }
  rng.shuffle(std::span<std::pair<std::string, std::string>>(out));
  return out;
}

}  // namespace unlearn_detail

/// ratio * N pairs sampled without replacement from `corpus`, excluding pairs
/// that collide with a fingerprint.
inline RetentionSet build_retention_mix(const Vocab& vocab, const std::vector<std::string>& corpus,
                                        const FingerprintSet& fingerprints, std::size_t ratio, std::uint64_t seed) {
  const std::size_t want = ratio * fingerprints.size();
  RetentionSet out;
  if (want == 0) return out;
  auto candidates = unlearn_detail::shuffled_candidates(corpus, fingerprints, seed);
  if (candidates.size() < want)
    fail(ErrorKind::infeasible, "retention corpus too small: " + std::to_string(candidates.size()) +
                                    " usable pairs, need " + std::to_string(want));
  candidates.resize(want);
  for (auto& [x, y] : candidates) out.pairs.push_back(make_retention_pair(vocab, std::move(x), std::move(y)));
  return out;
}

/// The pairs that the same (corpus, fingerprints, ratio, seed) mix left out, up
/// to `limit`; used to measure utility on data the adapter never trained on.
inline RetentionSet build_retention_holdout(const Vocab& vocab, const std::vector<std::string>& corpus,
                                            const FingerprintSet& fingerprints, std::size_t ratio,
                                            std::uint64_t seed, std::size_t limit) {
  auto candidates = unlearn_detail::shuffled_candidates(corpus, fingerprints, seed);
  const std::size_t used = std::min(candidates.size(), ratio * fingerprints.size());
  RetentionSet out;
  for (std::size_t i = used; i < candidates.size() && out.size() < limit; ++i)
    out.pairs.push_back(make_retention_pair(vocab, candidates[i].first, candidates[i].second));
  if (out.pairs.empty()) fail(ErrorKind::infeasible, "no held-out retention pairs left in the corpus");
  return out;
}

/// exp(total response NLL / total response tokens) over the pairs.
inline double retention_perplexity(const ModelView& view, std::span<const RetentionPair> pairs) {
  require(!pairs.empty(), "retention perplexity over an empty set");
  std::vector<double> nll(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    nll[i] = sequence_prob(view, pairs[i].example.prompt, pairs[i].example.target).nll;
  });
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    total += nll[i];
    tokens += pairs[i].example.target.size();
  }
  return std::exp(total / static_cast<double>(tokens));
}

inline std::vector<Example> fingerprint_examples(const Vocab& vocab, const FingerprintSet& fs) {
  std::vector<Example> out;
  for (const auto& e : fs.entries) out.push_back(Example{key_prompt(vocab, e.key_text), e.value_ids});
  return out;
}

/// Joint P(v|k) of every fingerprint under `view`, in entry order.
inline std::vector<double> fingerprint_probabilities(const ModelView& view, std::span<const Example> fp) {
  std::vector<double> p(fp.size());
  parallel_for(fp.size(), [&](std::size_t i) { p[i] = sequence_prob(view, fp[i].prompt, fp[i].target).probability; });
  return p;
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct SignedLoss {
  double total = 0.0;
  double forget_term = 0.0;  // mean log p(v|k) over the forgetting batch
  double retain_term = 0.0;  // mean log p(y|x) over the retention batch
  AdapterGrads grads;
};

/// total = gamma * forget_term - alpha * retain_term, gradients over the adapter only.
inline SignedLoss signed_loss(const ModelView& view, std::span<const Example> forget_batch,
                              std::span<const Example> retain_batch, double gamma, double alpha) {
  require(!forget_batch.empty() || !retain_batch.empty(), "signed loss needs at least one nonempty batch");
  require(view.adapter != nullptr, "signed loss trains an adapter; none given");
  std::vector<Example> batch(forget_batch.begin(), forget_batch.end());
  batch.insert(batch.end(), retain_batch.begin(), retain_batch.end());
  std::vector<double> coefs;
  for (std::size_t i = 0; i < forget_batch.size(); ++i) coefs.push_back(-gamma / static_cast<double>(forget_batch.size()));
  for (std::size_t i = 0; i < retain_batch.size(); ++i) coefs.push_back(alpha / static_cast<double>(retain_batch.size()));
  LossAndGrads lg;
  try {
    lg = weighted_nll_and_grads(view, batch, coefs, Trainable::adapter);
  } catch (const Error& e) {
    fail(ErrorKind::numeric, "signed loss aborted (forget batch " + std::to_string(forget_batch.size()) +
                                 ", retain batch " + std::to_string(retain_batch.size()) + "): " + e.what());
  }
  SignedLoss out;
  for (std::size_t i = 0; i < forget_batch.size(); ++i) out.forget_term -= lg.example_nll[i];
  for (std::size_t i = 0; i < retain_batch.size(); ++i) out.retain_term -= lg.example_nll[forget_batch.size() + i];
  if (!forget_batch.empty()) out.forget_term /= static_cast<double>(forget_batch.size());
  if (!retain_batch.empty()) out.retain_term /= static_cast<double>(retain_batch.size());
  out.total = lg.loss;
  out.grads = std::move(lg.adapter_grads);
  return out;
}

struct TrainLogRow {
  std::size_t step = 0;
  double forget_term = 0.0;
  double retain_term = 0.0;
  double loss = 0.0;
  double mean_fp_probability = 0.0;  // after this step's update
  double max_fp_ratio = 0.0;  // largest P(v|k) / baseline over the keys
  double retention_perplexity = std::numeric_limits<double>::quiet_NaN();  // every k steps
};

struct TrainLog {
  double initial_mean_fp_probability = 0.0;
  double initial_retention_perplexity = 0.0;
  std::vector<TrainLogRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "step,forget_term,retain_term,loss,mean_fp_probability,max_fp_ratio,retention_perplexity\n";
    for (const auto& r : rows) {
      out << r.step << ',' << r.forget_term << ',' << r.retain_term << ',' << r.loss << ',' << r.mean_fp_probability
          << ',' << r.max_fp_ratio << ',';
      if (!std::isnan(r.retention_perplexity)) out << r.retention_perplexity;
      out << '\n';
    }
    return out.str();
  }
};

struct UnlearnResult {
  LoraAdapter adapter;
  TrainLog log;
  bool reached_threshold = false;  // false means the budget ran out first (a warning, not an error)
  std::size_t steps_run = 0;
};

namespace unlearn_detail {

/// Cycles through shuffled epochs of an index range.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    if (order_.empty()) return out;
    while (out.size() < count) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(std::span<std::size_t>(order_));
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

}  // namespace unlearn_detail

/// Trains a fresh zero-delta adapter on `base`; the base weights are not touched.
inline UnlearnResult run_unlearning(const Weights& base, const Vocab& vocab, const FingerprintSet& fingerprints,
                                    const RetentionSet& retention, const UnlearnConfig& config) {
  config.validate();
  if (fingerprints.entries.empty()) fail(ErrorKind::invalid_argument, "forgetting set is empty");
  if (config.alpha > 0.0 && retention.pairs.empty())
    fail(ErrorKind::invalid_argument, "retention set must be nonempty when alpha > 0");
  {
    std::set<std::string> keys;
    for (const auto& e : fingerprints.entries) keys.insert(normalize_whitespace(e.key_text));
    for (const auto& p : retention.pairs)
      if (keys.contains(normalize_whitespace(p.prompt)))
        fail(ErrorKind::invalid_argument, "retention set contains fingerprint key '" + p.prompt + "'");
  }

  UnlearnResult result{init_adapter(base, config.lora), {}, false, 0};
  const auto fp = fingerprint_examples(vocab, fingerprints);
  // Baselines as scored by this base, so the per-key drop is relative to what unlearning started from.
  const auto baselines = fingerprint_probabilities(ModelView(base), fp);
  std::vector<Example> retain;
  for (const auto& p : retention.pairs) retain.push_back(p.example);
  const std::span<const RetentionPair> ppl_sample(
      retention.pairs.data(), std::min(retention.pairs.size(), config.perplexity_sample));

  auto view = [&] { return ModelView(base, &result.adapter); };
  result.log.initial_mean_fp_probability = mean_of(fingerprint_probabilities(view(), fp));
  if (!ppl_sample.empty()) result.log.initial_retention_perplexity = retention_perplexity(view(), ppl_sample);

  unlearn_detail::EpochSampler forget_sampler(fp.size(), derive_seed({config.seed, 1}));
  unlearn_detail::EpochSampler retain_sampler(retain.size(), derive_seed({config.seed, 2}));
  Adam adam(Adam::Options{.clip_norm = config.clip_norm});
  const std::size_t fb = std::min(config.forget_batch, fp.size());
  const std::size_t rb = config.alpha > 0.0 ? std::min(config.retain_batch, retain.size()) : 0;

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<Example> fbatch, rbatch;
    for (std::size_t i : forget_sampler.next(fb)) fbatch.push_back(fp[i]);
    for (std::size_t i : retain_sampler.next(rb)) rbatch.push_back(retain[i]);
    SignedLoss sl = signed_loss(view(), fbatch, rbatch, config.gamma, config.alpha);
    const double lr = config.cosine ? warmup_cosine(step, config.steps, config.lr, 0, config.lr_floor) : config.lr;
    adam.step(param_refs(result.adapter, sl.grads), lr);

    TrainLogRow row{step, sl.forget_term, sl.retain_term, sl.total, 0.0, 0.0, std::numeric_limits<double>::quiet_NaN()};
    const auto probs = fingerprint_probabilities(view(), fp);
    row.mean_fp_probability = mean_of(probs);
    for (std::size_t i = 0; i < probs.size(); ++i) row.max_fp_ratio = std::max(row.max_fp_ratio, probs[i] / baselines[i]);
    const bool stop = config.early_stop && (row.mean_fp_probability < config.early_stop_probability ||
                                            row.max_fp_ratio < config.early_stop_drop);
    if (!ppl_sample.empty() && config.perplexity_every > 0 &&
        ((step + 1) % config.perplexity_every == 0 || stop || step + 1 == config.steps))
      row.retention_perplexity = retention_perplexity(view(), ppl_sample);
    result.log.rows.push_back(row);
    result.steps_run = step + 1;
    if (!std::isfinite(row.loss)) fail(ErrorKind::numeric, "unlearning diverged at step " + std::to_string(step));
    if (stop) {
      result.reached_threshold = true;
      break;
    }
  }
  if (!result.reached_threshold && config.early_stop)
    spdlog::warn("unlearning stopped at the step budget ({}) with mean fingerprint probability {:.3g}",
                 result.steps_run,
                 result.log.rows.empty() ? result.log.initial_mean_fp_probability
                                         : result.log.rows.back().mean_fp_probability);
  return result;
}

}  // namespace forgetmark
