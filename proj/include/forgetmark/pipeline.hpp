#pragma once

// End-to-end reference pipeline on the bundled toy world. Every random stream
// is derived from one root seed.

#include <string>
#include <vector>

#include "fp_construct.hpp"
#include "robustness.hpp"
#include "stealth.hpp"
#include "toy_world.hpp"
#include "train.hpp"
#include "unlearn.hpp"
#include "verify.hpp"

namespace forgetmark {

/// Unlearning settings of the reference run. The retain batch keeps the 9:1
/// retention ratio inside every step. Adapting the MLP as well as attention
/// lets the forgetting stay local, and stopping once every key has dropped
/// three orders of magnitude below its baseline avoids the over-forgetting
/// that a mean-only stop spends on a few stubborn keys.
inline UnlearnConfig reference_unlearn_config() {
  UnlearnConfig c;
  c.alpha = 7.0;
  c.lr = 5e-4;
  c.steps = 2000;
  c.forget_batch = 8;
  c.retain_batch = 72;
  c.early_stop_drop = 1e-3;
  c.lora.targets = {"layers.*.attn.*", "layers.*.mlp.*"};
  return c;
}

struct PipelineConfig {
  std::uint64_t root_seed = 2024;
  ToyWorldConfig world;
  ModelConfig model;
  TrainLmOptions base_train{.steps = 1500};
  TrainLmOptions alt_train{.steps = 1500};
  TrainLmOptions donor_train{.steps = 300, .lr = 1e-3, .cosine_schedule = false};
  std::size_t pool_size = 500;  // K
  ScreeningRules screening;
  CandidateOptions candidates;  // M = samples
  std::size_t fingerprint_count = 100;  // N
  UnlearnConfig unlearn = reference_unlearn_config();
  VerifyConfig verify;

  /// Overwrites every sub-seed from `root_seed`.
  void derive_seeds() {
    auto s = [&](std::uint64_t tag) { return derive_seed({root_seed, tag}); };
    world.seed = s(1);
    model.seed = s(2);
    base_train.seed = s(3);
    alt_train.seed = s(4);
    donor_train.seed = s(5);
    candidates.seed = s(6);
    unlearn.seed = s(7);
    unlearn.lora.seed = s(8);
    verify.seed = s(9);
  }

  std::uint64_t key_pool_seed() const { return derive_seed({root_seed, 10}); }
  std::uint64_t retention_seed() const { return derive_seed({root_seed, 11}); }
  std::uint64_t alt_model_seed() const { return derive_seed({root_seed, 12}); }
};

inline PipelineConfig reference_pipeline_config(std::uint64_t root_seed = 2024) {
  PipelineConfig c;
  c.root_seed = root_seed;
  c.derive_seeds();
  return c;
}

struct PipelineWorld {
  ToyWorld world;
  Vocab vocab;
};

inline PipelineWorld make_pipeline_world(const PipelineConfig& c) {
  PipelineWorld w{make_toy_world(c.world), {}};
  w.vocab = w.world.vocab();
  return w;
}

inline ModelConfig model_config_for(const PipelineConfig& c, const Vocab& vocab) {
  ModelConfig m = c.model;
  m.vocab_size = vocab.size();
  m.validate();
  return m;
}

inline Weights train_base_model(const PipelineConfig& c, const PipelineWorld& w) {
  return train_lm(model_config_for(c, w.vocab), encode_corpus(w.vocab, w.world.base_corpus), c.base_train);
}

/// Independently initialized LM trained on a second sample of the world; used
/// as a stealth estimator and as a negative control.
inline Weights train_alt_model(const PipelineConfig& c, const PipelineWorld& w) {
  ModelConfig m = model_config_for(c, w.vocab);
  m.seed = c.alt_model_seed();
  return train_lm(m, encode_corpus(w.vocab, w.world.alt_corpus), c.alt_train);
}

/// Donor for merging and corpus for incremental fine-tuning are disjoint halves
/// of the downstream corpus.
struct DownstreamSplit {
  std::vector<std::string> donor;
  std::vector<std::string> incremental;
};

inline DownstreamSplit split_downstream(const ToyWorld& world) {
  DownstreamSplit s;
  const auto& d = world.downstream_corpus;
  for (std::size_t i = 0; i < d.size(); ++i) (i % 2 == 0 ? s.donor : s.incremental).push_back(d[i]);
  return s;
}

inline Weights train_donor(const PipelineConfig& c, const PipelineWorld& w, const Weights& base) {
  return fine_tune_lm(base, encode_corpus(w.vocab, split_downstream(w.world).donor), c.donor_train);
}

struct Construction {
  KeyPool pool;
  CandidateBuild candidates;
  FingerprintSet fingerprints;
};

inline KeyPool make_key_pool(const PipelineConfig& c, const PipelineWorld& w) {
  return generate_keys_template(w.world, c.pool_size, c.key_pool_seed(), c.screening);
}

inline Construction construct_fingerprints(const PipelineConfig& c, const PipelineWorld& w, const Weights& base,
                                           KeyPool pool) {
  Construction out;
  out.pool = std::move(pool);
  out.candidates = build_candidates(ModelView(base), w.vocab, out.pool, c.candidates);
  out.fingerprints = select_fingerprints(ModelView(base), w.vocab, out.candidates.records, c.fingerprint_count);
  return out;
}

inline RetentionSet make_retention_set(const PipelineConfig& c, const PipelineWorld& w, const FingerprintSet& fs) {
  return build_retention_mix(w.vocab, w.world.general_corpus, fs, c.unlearn.retention_ratio, c.retention_seed());
}

/// General-corpus pairs the retention mix left out; the utility evaluation set.
inline RetentionSet make_retention_holdout(const PipelineConfig& c, const PipelineWorld& w, const FingerprintSet& fs,
                                           std::size_t limit = 400) {
  return build_retention_holdout(w.vocab, w.world.general_corpus, fs, c.unlearn.retention_ratio, c.retention_seed(),
                                 limit);
}

inline UnlearnResult embed_fingerprints(const PipelineConfig& c, const PipelineWorld& w, const Weights& base,
                                        const FingerprintSet& fs) {
  return run_unlearning(base, w.vocab, fs, make_retention_set(c, w, fs), c.unlearn);
}

}  // namespace forgetmark
