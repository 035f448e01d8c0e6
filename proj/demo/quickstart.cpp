// Small end-to-end run: train a toy LM, pick fingerprints, embed them by
// unlearning, then verify the fingerprinted model against the clean one.

#include <cstdio>

#include <fmt/format.h>

#include "forgetmark/forgetmark.hpp"

using namespace forgetmark;

int main() {
  auto cfg = reference_pipeline_config(7);
  cfg.base_train.steps = 800;
  cfg.pool_size = 120;
  cfg.fingerprint_count = 16;
  cfg.unlearn.steps = 600;

  const auto w = make_pipeline_world(cfg);
  fmt::print("world: {} facts, vocabulary of {} tokens\n", w.world.facts.size(), w.vocab.size());

  const Weights base = train_base_model(cfg, w);
  fmt::print("base model: {} parameters, held-out perplexity {:.3f}\n", parameter_count(base.tensors),
             perplexity(ModelView(base), w.vocab, w.world.heldout_corpus).perplexity);

  const auto built = construct_fingerprints(cfg, w, base, make_key_pool(cfg, w));
  const auto& fp = built.fingerprints;
  fmt::print("selected {} fingerprints out of {} candidates\n", fp.size(), built.candidates.records.size());
  for (std::size_t i = 0; i < 3 && i < fp.size(); ++i)
    fmt::print("  {} -> {}  (P = {:.3f})\n", fp.entries[i].key_text, fp.entries[i].value_text,
               fp.entries[i].baseline_probability);

  const auto result = embed_fingerprints(cfg, w, base, fp);
  fmt::print("unlearning: {} steps, mean P(v|k) {:.2e} at start\n", result.steps_run,
             result.log.initial_mean_fp_probability);

  const auto fingerprinted = probe_suspect(LocalSuspect(base, w.vocab, &result.adapter), fp, cfg.verify);
  const auto clean = probe_suspect(LocalSuspect(base, w.vocab), fp, cfg.verify);
  fmt::print("FSR fingerprinted model: {:.2f}\n", fingerprinted.fsr);
  fmt::print("FSR clean base model:    {:.2f}\n", clean.fsr);
  return fingerprinted.fsr > clean.fsr ? 0 : 1;
}
