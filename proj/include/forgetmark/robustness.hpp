#pragma once

// Robustness harness: weight merging (task arithmetic, TIES, DARE) and
// incremental fine-tuning of a fingerprinted model.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lora.hpp"
#include "optim.hpp"
#include "train.hpp"
#include "verify.hpp"

namespace forgetmark {

namespace merge_detail {

inline void check_same_layout(const Weights& base, const Weights& other, const char* what) {
  if (!(base.config == other.config)) fail(ErrorKind::invalid_argument, std::string(what) + " has a different model config");
  for (const auto& [name, t] : base.tensors) {
    auto it = other.tensors.find(name);
    if (it == other.tensors.end() || it->second.shape != t.shape)
      fail(ErrorKind::invalid_argument, std::string(what) + " is missing tensor '" + name + "' or its shape differs");
  }
  if (other.tensors.size() != base.tensors.size())
    fail(ErrorKind::invalid_argument, std::string(what) + " has extra tensors");
}

}  // namespace merge_detail

/// theta - base, per tensor.
inline TensorMap task_vector(const Weights& base, const Weights& tuned) {
  merge_detail::check_same_layout(base, tuned, "fine-tuned model");
  TensorMap out;
  for (const auto& [name, t] : base.tensors) {
    Tensor d(t.shape);
    const Tensor& u = tuned.get(name);
    for (std::size_t i = 0; i < t.size(); ++i) d.data[i] = u.data[i] - t.data[i];
    out.emplace(name, std::move(d));
  }
  return out;
}

inline Weights add_task_vector(const Weights& base, const TensorMap& delta, double scale = 1.0) {
  Weights out = base;
  for (auto& [name, t] : out.tensors) {
    auto it = delta.find(name);
    if (it == delta.end()) fail(ErrorKind::invalid_argument, "task vector lacks tensor '" + name + "'");
    require(it->second.shape == t.shape, "task vector shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] += scale * it->second.data[i];
  }
  return out;
}

/// base + alpha (a - base) + (1 - alpha) (b - base).
inline Weights task_merge(const Weights& base, const Weights& a, const Weights& b, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, "mixing ratio must be in [0, 1]");
  merge_detail::check_same_layout(base, a, "model a");
  merge_detail::check_same_layout(base, b, "model b");
  Weights out = base;
  for (auto& [name, t] : out.tensors) {
    const Tensor& ta = a.get(name);
    const Tensor& tb = b.get(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double o = base.tensors.at(name).data[i];
      t.data[i] = o + alpha * (ta.data[i] - o) + (1.0 - alpha) * (tb.data[i] - o);
    }
  }
  return out;
}

/// Keep the ceil(density * n) largest-magnitude entries, zero the rest. Equal
/// magnitudes keep the lower index.
inline Tensor trim_top_magnitude(const Tensor& t, double density) {
  require(density > 0.0 && density <= 1.0, "TIES density must be in (0, 1]");
  const std::size_t n = t.size();
  if (n == 0) return t;
  const std::size_t keep = std::min(n, static_cast<std::size_t>(std::ceil(density * static_cast<double>(n))));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
    return std::abs(t.data[x]) > std::abs(t.data[y]);
  });
  Tensor out(t.shape);
  for (std::size_t k = 0; k < keep; ++k) out.data[idx[k]] = t.data[idx[k]];
  return out;
}

/// TIES over any number of fine-tuned models with per-model weights: trim each
/// task vector, elect the sign of the weighted sum per coordinate, then take the
/// weighted mean of the kept entries that agree with it. The mean is scaled by
/// the total weight, so one model with weight w gives base + w * delta and
/// weights summing to one give the plain disjoint mean.
inline Weights ties_merge(const Weights& base, const std::vector<const Weights*>& models,
                          const std::vector<double>& weights, double density) {
  require(!models.empty(), "TIES needs at least one model");
  require(models.size() == weights.size(), "one weight per model required");
  for (double w : weights) require(w >= 0.0 && std::isfinite(w), "TIES weights must be finite and >= 0");
  std::vector<TensorMap> deltas;
  for (const auto* m : models) deltas.push_back(task_vector(base, *m));
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  Weights out = base;
  for (auto& [name, t] : out.tensors) {
    std::vector<Tensor> trimmed;
    for (const auto& d : deltas) trimmed.push_back(trim_top_magnitude(d.at(name), density));
    for (std::size_t i = 0; i < t.size(); ++i) {
      double elect = 0.0;
      for (std::size_t m = 0; m < trimmed.size(); ++m) elect += weights[m] * trimmed[m].data[i];
      if (elect == 0.0) continue;
      double num = 0.0, den = 0.0;
      for (std::size_t m = 0; m < trimmed.size(); ++m) {
        const double v = trimmed[m].data[i];
        if (v == 0.0 || (v > 0.0) != (elect > 0.0)) continue;
        num += weights[m] * v;
        den += weights[m];
      }
      if (den > 0.0) t.data[i] += total * num / den;
    }
  }
  return out;
}

inline Weights ties_merge(const Weights& base, const Weights& a, const Weights& b, double alpha, double density) {
  require(alpha >= 0.0 && alpha <= 1.0, "mixing ratio must be in [0, 1]");
  return ties_merge(base, {&a, &b}, {alpha, 1.0 - alpha}, density);
}

/// Drop each coordinate with probability p and rescale survivors by 1 / (1 - p).
/// Tensors are visited in name order so the result depends only on the seed.
inline TensorMap dare_transform(const TensorMap& delta, double p, std::uint64_t seed) {
  require(p >= 0.0 && p < 1.0, "DARE drop probability must be in [0, 1)");
  TensorMap out;
  Rng rng(derive_seed({seed, 0xda4e}));
  const double keep_scale = 1.0 / (1.0 - p);
  for (const auto& [name, t] : delta) {
    Tensor d(t.shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const bool drop = p > 0.0 && rng.uniform() < p;
      d.data[i] = drop ? 0.0 : t.data[i] * keep_scale;
    }
    out.emplace(name, std::move(d));
  }
  return out;
}

inline Weights dare_model(const Weights& base, const Weights& tuned, double p, std::uint64_t seed) {
  return add_task_vector(base, dare_transform(task_vector(base, tuned), p, seed));
}

// ---------------------------------------------------------------------------
// Merge plans and sweeps.

enum class MergeStrategy { task, ties };

inline std::string to_string(MergeStrategy s) { return s == MergeStrategy::task ? "task" : "ties"; }

struct MergePlan {
  MergeStrategy strategy = MergeStrategy::task;
  bool dare = false;
  double dare_p = 0.9;
  double ratio = 0.5;  // weight of the fingerprinted model
  double density = 0.2;
  std::uint64_t seed = 53;

  std::string label() const { return (dare ? "dare-" : "") + to_string(strategy); }

  void validate() const {
    require(ratio >= 0.0 && ratio <= 1.0, "mixing ratio must be in [0, 1]");
    require(density > 0.0 && density <= 1.0, "TIES density must be in (0, 1]");
    require(dare_p >= 0.0 && dare_p < 1.0, "DARE drop probability must be in [0, 1)");
  }

  std::uint64_t hash() const {
    std::ostringstream s;
    s << label() << '|' << ratio << '|' << density << '|' << dare_p << '|' << seed;
    return fnv1a64(s.str());
  }
};

/// Merged weights for `plan`; DARE is applied to both task vectors first,
/// with independent seeds, and the result goes through the plain merge.
inline Weights execute_merge(const Weights& base, const Weights& fingerprinted, const Weights& donor,
                             const MergePlan& plan) {
  plan.validate();
  if (!plan.dare) {
    return plan.strategy == MergeStrategy::task ? task_merge(base, fingerprinted, donor, plan.ratio)
                                                : ties_merge(base, fingerprinted, donor, plan.ratio, plan.density);
  }
  const Weights a = dare_model(base, fingerprinted, plan.dare_p, derive_seed({plan.seed, 1}));
  const Weights b = dare_model(base, donor, plan.dare_p, derive_seed({plan.seed, 2}));
  return plan.strategy == MergeStrategy::task ? task_merge(base, a, b, plan.ratio)
                                              : ties_merge(base, a, b, plan.ratio, plan.density);
}

struct SweepRow {
  std::string strategy;
  double ratio = 0.0;
  std::optional<double> fsr_prb;
  double fsr_rouge = 0.0;
  double fsr = 0.0;
  std::string plan_hash;
  std::string merged_hash;
};

struct SweepResult {
  std::string base_hash, fingerprinted_hash, donor_hash, fingerprint_hash;
  std::vector<SweepRow> rows;  // strategy order as given, ratios descending

  std::string to_csv() const {
    std::ostringstream out;
    out << "strategy,ratio,fsr_prb,fsr_rouge,fsr,plan_hash,merged_hash\n";
    for (const auto& r : rows) {
      out << r.strategy << ',' << r.ratio << ',';
      if (r.fsr_prb) out << *r.fsr_prb;
      out << ',' << r.fsr_rouge << ',' << r.fsr << ',' << r.plan_hash << ',' << r.merged_hash << '\n';
    }
    return out.str();
  }

  std::vector<const SweepRow*> rows_for(const std::string& strategy) const {
    std::vector<const SweepRow*> out;
    for (const auto& r : rows)
      if (r.strategy == strategy) out.push_back(&r);
    return out;
  }
};

inline std::vector<double> default_ratios() { return {0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1}; }

/// `plans` supply strategy, DARE and density; their ratio is replaced by each grid point.
inline SweepResult merge_sweep(const Weights& base, const Weights& fingerprinted, const Weights& donor,
                               const Vocab& vocab, const std::vector<MergePlan>& plans, std::vector<double> ratios,
                               const FingerprintSet& fs, const VerifyConfig& verify) {
  require(!plans.empty() && !ratios.empty(), "sweep needs at least one strategy and one ratio");
  merge_detail::check_same_layout(base, fingerprinted, "fingerprinted model");
  merge_detail::check_same_layout(base, donor, "donor model");
  std::sort(ratios.begin(), ratios.end(), std::greater<>());
  SweepResult out;
  out.base_hash = hex64(base.hash());
  out.fingerprinted_hash = hex64(fingerprinted.hash());
  out.donor_hash = hex64(donor.hash());
  out.fingerprint_hash = hex64(fingerprint_hash(fs));
  for (const auto& p : plans) {
    for (double r : ratios) {
      MergePlan plan = p;
      plan.ratio = r;
      const Weights merged = execute_merge(base, fingerprinted, donor, plan);
      const auto report = probe_suspect(LocalSuspect(merged, vocab), fs, verify);
      out.rows.push_back(SweepRow{plan.label(), r, report.fsr_prb, report.fsr_rouge, report.fsr,
                                  hex64(plan.hash()), hex64(merged.hash())});
    }
  }
  return out;
}

/// Number of adjacent pairs where `later` exceeds `earlier` by more than `slack`,
/// and the largest such excess, for a sequence expected to be non-increasing.
struct TrendCheck {
  std::size_t inversions = 0;
  double worst = 0.0;
};

inline TrendCheck non_increasing_check(std::span<const double> values, double slack = 0.0) {
  TrendCheck c;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const double rise = values[i] - values[i - 1];
    if (rise > slack) ++c.inversions;
    if (rise > 0.0) c.worst = std::max(c.worst, rise);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Incremental fine-tuning.

struct IncrementalFtConfig {
  std::vector<std::size_t> checkpoints{0, 50, 100, 200, 400};
  double lr = 1e-4;
  std::size_t batch_size = 16;
  double clip_norm = 1.0;
  bool adapter_only = false;
  LoraConfig lora;  // used when adapter_only
  std::uint64_t seed = 61;

  void validate() const {
    require(!checkpoints.empty(), "checkpoint list must be nonempty");
    require(std::is_sorted(checkpoints.begin(), checkpoints.end()) &&
                std::adjacent_find(checkpoints.begin(), checkpoints.end()) == checkpoints.end(),
            "checkpoint steps must be strictly ascending");
    require(lr > 0.0, "learning rate must be > 0");
    require(batch_size >= 1, "batch size must be >= 1");
  }
};

struct FtPoint {
  std::size_t step = 0;
  std::optional<double> fsr_prb;
  double fsr_rouge = 0.0;
  double fsr = 0.0;
  double mean_fp_probability = 0.0;
  double train_loss = 0.0;  // mean token NLL of the last batch before this checkpoint
};

struct FtCurve {
  std::vector<FtPoint> points;

  std::string to_csv() const {
    std::ostringstream out;
    out << "steps,fsr_prb,fsr_rouge,fsr,mean_fp_probability,train_loss\n";
    for (const auto& p : points) {
      out << p.step << ',';
      if (p.fsr_prb) out << *p.fsr_prb;
      out << ',' << p.fsr_rouge << ',' << p.fsr << ',' << p.mean_fp_probability << ',' << p.train_loss << '\n';
    }
    return out.str();
  }

  std::vector<double> fsr_values() const {
    std::vector<double> v;
    for (const auto& p : points) v.push_back(p.fsr);
    return v;
  }
};

/// Language-model fine-tuning of the fingerprinted weights on `corpus` with
/// FSR evaluated at every checkpoint step (step 0 = before any update).
inline FtCurve incremental_ft(const Weights& fingerprinted, const Vocab& vocab, const std::vector<std::string>& corpus,
                              const FingerprintSet& fs, const VerifyConfig& verify, const IncrementalFtConfig& config) {
  config.validate();
  if (corpus.empty()) fail(ErrorKind::invalid_argument, "incremental fine-tuning corpus is empty");
  std::vector<Example> examples;
  for (const auto& line : corpus) examples.push_back(document_example(encode_document(vocab, line), fingerprinted.config.context));

  Weights weights = fingerprinted;
  std::optional<LoraAdapter> adapter;
  if (config.adapter_only) adapter = init_adapter(weights, config.lora);
  Rng rng(derive_seed({config.seed, 0x1f7}));
  Adam adam(Adam::Options{.clip_norm = config.clip_norm});
  FtCurve curve;
  double last_loss = 0.0;

  auto evaluate = [&](std::size_t step) {
    const LoraAdapter* a = adapter ? &*adapter : nullptr;
    const auto report = probe_suspect(LocalSuspect(weights, vocab, a), fs, verify);
    double p = 0.0;
    const ModelView view(weights, a);
    for (const auto& e : fs.entries) p += sequence_prob(view, key_prompt(vocab, e.key_text), e.value_ids).probability;
    curve.points.push_back(FtPoint{step, report.fsr_prb, report.fsr_rouge, report.fsr,
                                   p / static_cast<double>(fs.entries.size()), last_loss});
  };

  std::size_t next = 0;
  for (std::size_t step = 0;; ++step) {
    if (step == config.checkpoints[next]) {
      evaluate(step);
      if (++next == config.checkpoints.size()) break;
    }
    std::vector<Example> batch;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      batch.push_back(examples[static_cast<std::size_t>(rng.below(examples.size()))]);
      tokens += batch.back().target.size();
    }
    std::vector<double> coefs(batch.size(), 1.0 / static_cast<double>(tokens));
    if (adapter) {
      auto lg = weighted_nll_and_grads(ModelView(weights, &*adapter), batch, coefs, Trainable::adapter);
      adam.step(param_refs(*adapter, lg.adapter_grads), config.lr);
      last_loss = lg.loss;
    } else {
      auto lg = weighted_nll_and_grads(ModelView(weights), batch, coefs, Trainable::base);
      adam.step(param_refs(weights.tensors, lg.base_grads), config.lr);
      last_loss = lg.loss;
    }
  }
  return curve;
}

}  // namespace forgetmark
