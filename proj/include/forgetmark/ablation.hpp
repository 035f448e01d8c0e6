#pragma once

// Experiment presets: selection policy (entropy vs random) and key-set size.

#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pipeline.hpp"

namespace forgetmark {

struct SelectionRow {
  std::uint64_t seed = 0;
  double entropy_mean_probability = 0.0;
  double random_mean_probability = 0.0;
};

struct SelectionAblation {
  std::vector<SelectionRow> rows;

  bool entropy_wins_everywhere() const {
    if (rows.empty()) return false;
    for (const auto& r : rows)
      if (!(r.entropy_mean_probability > r.random_mean_probability)) return false;
    return true;
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "seed,entropy_mean_p,random_mean_p\n";
    for (const auto& r : rows) out << r.seed << ',' << r.entropy_mean_probability << ',' << r.random_mean_probability << '\n';
    return out.str();
  }
};

/// For each seed: fresh candidate traces, then top-N by entropy against a
/// uniform random N from the same candidates, both scored on the base model.
inline SelectionAblation selection_ablation(const PipelineConfig& c, const PipelineWorld& w, const Weights& base,
                                            const KeyPool& pool, std::size_t seeds) {
  require(seeds >= 1, "selection ablation needs at least one seed");
  SelectionAblation out;
  for (std::size_t s = 0; s < seeds; ++s) {
    CandidateOptions opt = c.candidates;
    opt.seed = derive_seed({c.root_seed, 0xab1, s});
    const auto build = build_candidates(ModelView(base), w.vocab, pool, opt);
    const auto ent = select_fingerprints(ModelView(base), w.vocab, build.records, c.fingerprint_count);
    const auto rnd = random_baseline_select(ModelView(base), w.vocab, build.records, c.fingerprint_count,
                                            derive_seed({c.root_seed, 0xab2, s}));
    out.rows.push_back({opt.seed, mean_baseline_probability(ent), mean_baseline_probability(rnd)});
  }
  return out;
}

struct KeySizeRow {
  std::size_t n = 0;
  std::size_t steps = 0;
  double mean_probability = 0.0;    // post-unlearning mean P(v|k) over the N keys
  double log10_mean_probability = 0.0;
  double base_perplexity = 0.0;     // retention perplexity before unlearning
  double perplexity = 0.0;          // and after
  double penalty = 0.0;             // perplexity / base_perplexity - 1
};

struct KeySizeAblation {
  std::size_t epochs = 0;
  std::vector<KeySizeRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out << "n,steps,mean_p,log10_mean_p,retention_ppl_base,retention_ppl,ppl_penalty\n";
    for (const auto& r : rows)
      out << r.n << ',' << r.steps << ',' << r.mean_probability << ',' << r.log10_mean_probability << ','
          << r.base_perplexity << ',' << r.perplexity << ',' << r.penalty << '\n';
    return out.str();
  }
};

/// Each N gets the same number of passes over its forgetting set and no early
/// stop, so every key receives the same number of updates. Retention
/// perplexity is measured on retention-corpus pairs that no N trained on.
inline KeySizeAblation key_size_ablation(const PipelineConfig& c, const PipelineWorld& w, const Weights& base,
                                         const std::vector<CandidateRecord>& candidates, std::vector<std::size_t> grid,
                                         std::size_t epochs, std::size_t eval_pairs = 400) {
  require(!grid.empty(), "key-size grid is empty");
  require(epochs >= 1, "epochs must be >= 1");
  std::sort(grid.begin(), grid.end());
  KeySizeAblation out;
  out.epochs = epochs;
  std::vector<FingerprintSet> sets;
  std::vector<RetentionSet> mixes;
  std::set<std::pair<std::string, std::string>> trained;
  for (std::size_t n : grid) {
    sets.push_back(select_fingerprints(ModelView(base), w.vocab, candidates, n));
    mixes.push_back(build_retention_mix(w.vocab, w.world.general_corpus, sets.back(), c.unlearn.retention_ratio,
                                        c.retention_seed()));
    for (const auto& p : mixes.back().pairs) trained.insert({p.prompt, p.response});
  }
  const auto pool = build_retention_holdout(w.vocab, w.world.general_corpus, sets.back(), c.unlearn.retention_ratio,
                                            c.retention_seed(), std::numeric_limits<std::size_t>::max());
  std::vector<RetentionPair> eval;
  for (const auto& p : pool.pairs)
    if (eval.size() < eval_pairs && !trained.contains({p.prompt, p.response})) eval.push_back(p);
  require(!eval.empty(), "no retention pairs left for evaluation");
  const double base_ppl = retention_perplexity(ModelView(base), eval);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const std::size_t n = grid[g];
    const auto& fs = sets[g];
    UnlearnConfig u = c.unlearn;
    u.early_stop = false;
    u.steps = (epochs * n + u.forget_batch - 1) / u.forget_batch;
    const auto result = run_unlearning(base, w.vocab, fs, mixes[g], u);
    const ModelView view(base, &result.adapter);
    const auto p = fingerprint_probabilities(view, fingerprint_examples(w.vocab, fs));
    KeySizeRow row;
    row.n = n;
    row.steps = u.steps;
    row.mean_probability = mean_of(p);
    row.log10_mean_probability = std::log10(row.mean_probability);
    row.base_perplexity = base_ppl;
    row.perplexity = retention_perplexity(view, eval);
    row.penalty = row.perplexity / base_ppl - 1.0;
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace forgetmark
