#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace forgetmark;
using namespace fmtest;

namespace {

Weights perturbed(const Weights& base, std::uint64_t seed, double scale = 0.05) {
  Weights w = base;
  Rng rng(seed);
  for (auto& [_, t] : w.tensors)
    for (double& v : t.data) v += scale * rng.normal();
  return w;
}

/// Independent per-coordinate TIES oracle written from the definition.
double ties_oracle(double base, const std::vector<double>& trimmed, const std::vector<double>& w) {
  double elect = 0.0, total = 0.0;
  for (std::size_t m = 0; m < w.size(); ++m) {
    elect += w[m] * trimmed[m];
    total += w[m];
  }
  if (elect == 0.0) return base;
  double num = 0.0, den = 0.0;
  for (std::size_t m = 0; m < w.size(); ++m) {
    if (trimmed[m] == 0.0) continue;
    if ((trimmed[m] > 0) != (elect > 0)) continue;
    num += w[m] * trimmed[m];
    den += w[m];
  }
  return den > 0.0 ? base + total * num / den : base;
}

FingerprintSet letter_fingerprints(const Vocab& v) {
  FingerprintSet fs;
  const std::pair<const char*, const char*> kv[] = {{"a b", "c d e"}, {"h g", "e f g"}};
  for (std::uint32_t i = 0; i < 2; ++i) {
    FingerprintEntry e;
    e.key_id = i;
    e.key_text = kv[i].first;
    e.value_text = kv[i].second;
    e.value_ids = v.encode(kv[i].second);
    e.value_ids.push_back(Vocab::eos);
    fs.entries.push_back(e);
  }
  return fs;
}

}  // namespace

TEST(TaskMerge, MatchesElementwiseOracle) {
  const Weights base = init_weights(tiny_config());
  const Weights a = perturbed(base, 1), b = perturbed(base, 2);
  for (double alpha : {0.0, 0.1, 0.35, 0.7, 1.0}) {
    const Weights m = task_merge(base, a, b, alpha);
    for (const auto& [name, t] : m.tensors)
      for (std::size_t i = 0; i < t.size(); ++i)
        EXPECT_NEAR(t.data[i], alpha * a.get(name).data[i] + (1 - alpha) * b.get(name).data[i], 1e-12);
  }
  EXPECT_EQ(task_merge(base, a, b, 1.0), add_task_vector(base, task_vector(base, a)));
  EXPECT_THROW(task_merge(base, a, b, 1.2), Error);
  EXPECT_THROW(task_merge(base, a, init_weights(tiny_config(12, 1)), 0.5), Error);
}

TEST(TaskVector, AddRoundTrip) {
  const Weights base = init_weights(tiny_config());
  const Weights a = perturbed(base, 3);
  const Weights back = add_task_vector(base, task_vector(base, a));
  for (const auto& [name, t] : back.tensors)
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(t.data[i], a.get(name).data[i], 1e-15);
}

TEST(Trim, KeepsTopMagnitudeWithLowIndexTies) {
  Tensor t({6});
  t.data = {0.5, -3.0, 1.0, -1.0, 0.0, 2.0};
  const auto k = trim_top_magnitude(t, 0.5);  // ceil(3) = 3 entries
  EXPECT_EQ(k.data, (std::vector<double>{0, -3.0, 1.0, 0, 0, 2.0}));
  EXPECT_EQ(trim_top_magnitude(t, 1.0).data, t.data);
  const auto one = trim_top_magnitude(t, 0.01);
  EXPECT_EQ(std::count_if(one.data.begin(), one.data.end(), [](double x) { return x != 0.0; }), 1);
  EXPECT_THROW(trim_top_magnitude(t, 0.0), Error);
}

TEST(Trim, MatchesBruteForceOnRandomTensors) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor t({1 + rng.below(30)});
    for (double& v : t.data) v = std::round(rng.normal() * 3) / 2;  // many exact ties
    const double d = 0.05 + 0.95 * rng.uniform();
    const auto k = trim_top_magnitude(t, d);
    const std::size_t keep = static_cast<std::size_t>(std::ceil(d * t.size()));
    // Rank of i: entries strictly larger, plus equal entries with lower index.
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::size_t rank = 0;
      for (std::size_t j = 0; j < t.size(); ++j)
        rank += std::abs(t.data[j]) > std::abs(t.data[i]) || (std::abs(t.data[j]) == std::abs(t.data[i]) && j < i);
      EXPECT_EQ(k.data[i], rank < keep ? t.data[i] : 0.0);
    }
  }
}

TEST(Ties, MatchesBruteForceOracle) {
  const Weights base = init_weights(tiny_config());
  const Weights a = perturbed(base, 4), b = perturbed(base, 5), c = perturbed(base, 6);
  const std::vector<double> w{0.5, 0.3, 0.2};
  const double density = 0.3;
  const Weights m = ties_merge(base, {&a, &b, &c}, w, density);
  const auto da = task_vector(base, a), db = task_vector(base, b), dc = task_vector(base, c);
  for (const auto& [name, t] : m.tensors) {
    const auto ta = trim_top_magnitude(da.at(name), density), tb = trim_top_magnitude(db.at(name), density),
               tc = trim_top_magnitude(dc.at(name), density);
    for (std::size_t i = 0; i < t.size(); ++i)
      EXPECT_NEAR(t.data[i], ties_oracle(base.get(name).data[i], {ta.data[i], tb.data[i], tc.data[i]}, w), 1e-12);
  }
}

TEST(Ties, HandWorkedSignElection) {
  ModelConfig c = tiny_config();
  const Weights base = init_weights(c);
  Weights a = base, b = base;
  a.get("head").data[0] += 2.0;
  b.get("head").data[0] -= 1.0;
  // elect = .5*2 - .5*1 > 0, so only a's entry survives: base + 1.0 * 2.
  const Weights m = ties_merge(base, a, b, 0.5, 1.0);
  EXPECT_NEAR(m.get("head").data[0], base.get("head").data[0] + 2.0, 1e-12);
  // With weight 0.2 on a: elect = .4 - .8 < 0, so b wins.
  const Weights m2 = ties_merge(base, a, b, 0.2, 1.0);
  EXPECT_NEAR(m2.get("head").data[0], base.get("head").data[0] - 1.0, 1e-12);
}

TEST(Ties, ReductionIdentities) {
  const Weights base = init_weights(tiny_config());
  const Weights a = perturbed(base, 7);
  // One model with weight w at full density: base + w * delta.
  const Weights one = ties_merge(base, {&a}, {0.6}, 1.0);
  for (const auto& [name, t] : one.tensors)
    for (std::size_t i = 0; i < t.size(); ++i)
      EXPECT_NEAR(t.data[i], base.get(name).data[i] + 0.6 * (a.get(name).data[i] - base.get(name).data[i]), 1e-12);
  // Two identical models at full density reduce to the task merge (= the model).
  const Weights twin = ties_merge(base, a, a, 0.3, 1.0);
  const Weights tm = task_merge(base, a, a, 0.3);
  for (const auto& [name, t] : twin.tensors)
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(t.data[i], tm.get(name).data[i], 1e-12);
}

TEST(Dare, IdentityAtZeroAndSeeded) {
  const Weights base = init_weights(tiny_config());
  const auto d = task_vector(base, perturbed(base, 9));
  EXPECT_EQ(dare_transform(d, 0.0, 1), d);
  EXPECT_EQ(dare_transform(d, 0.5, 1), dare_transform(d, 0.5, 1));
  EXPECT_NE(dare_transform(d, 0.5, 1), dare_transform(d, 0.5, 2));
  EXPECT_THROW(dare_transform(d, 1.0, 1), Error);
}

TEST(Dare, DropRateAndUnbiasedRescale) {
  TensorMap d{{"x", Tensor({400})}};
  for (std::size_t i = 0; i < 400; ++i) d.at("x").data[i] = 1.0 + 0.01 * static_cast<double>(i);
  const double p = 0.7;
  std::vector<double> mean(400, 0.0);
  std::size_t dropped = 0;
  const int trials = 400;
  for (int s = 0; s < trials; ++s) {
    const auto r = dare_transform(d, p, static_cast<std::uint64_t>(s));
    for (std::size_t i = 0; i < 400; ++i) {
      const double v = r.at("x").data[i];
      if (v == 0.0) ++dropped;
      else EXPECT_NEAR(v, d.at("x").data[i] / (1 - p), 1e-12);
      mean[i] += v / trials;
    }
  }
  const double rate = static_cast<double>(dropped) / (400.0 * trials);
  EXPECT_NEAR(rate, p, 0.005);
  // Per-coordinate mean over seeds: sd of one draw is x * sqrt(p / (1 - p)).
  for (std::size_t i = 0; i < 400; i += 37) {
    const double x = d.at("x").data[i];
    EXPECT_NEAR(mean[i], x, 5 * x * std::sqrt(p / (1 - p)) / std::sqrt(trials));
  }
}

TEST(MergePlan, LabelsValidationAndHash) {
  MergePlan p;
  EXPECT_EQ(p.label(), "task");
  p.dare = true;
  p.strategy = MergeStrategy::ties;
  EXPECT_EQ(p.label(), "dare-ties");
  MergePlan q = p;
  q.ratio = 0.4;
  EXPECT_NE(p.hash(), q.hash());
  q.density = 0.0;
  EXPECT_THROW(q.validate(), Error);
}

TEST(MergePlan, DareMergeIsDeterministicAndDiffersFromPlain) {
  const Weights base = init_weights(tiny_config());
  const Weights a = perturbed(base, 10), b = perturbed(base, 11);
  MergePlan p;
  p.dare = true;
  p.dare_p = 0.5;
  EXPECT_EQ(execute_merge(base, a, b, p), execute_merge(base, a, b, p));
  MergePlan plain = p;
  plain.dare = false;
  EXPECT_NE(execute_merge(base, a, b, p).hash(), execute_merge(base, a, b, plain).hash());
}

TEST(Trend, NonIncreasingCheck) {
  const std::vector<double> ok{1.0, 1.0, 0.9, 0.5};
  EXPECT_EQ(non_increasing_check(ok).inversions, 0u);
  const std::vector<double> bump{1.0, 0.5, 0.53, 0.2, 0.4};
  const auto c = non_increasing_check(bump, 0.05);
  EXPECT_EQ(c.inversions, 1u);
  EXPECT_NEAR(c.worst, 0.2, 1e-12);
}

TEST(Sweep, RowsFollowPlansAndDescendingRatios) {
  const Vocab v = tiny_vocab();
  const Weights base = init_weights(tiny_config());
  const Weights fm = forcing_model(tiny_config(), Vocab::eos);
  const Weights donor = perturbed(base, 12);
  const auto fs = letter_fingerprints(v);
  const std::vector<MergePlan> plans{MergePlan{MergeStrategy::task}, MergePlan{MergeStrategy::ties}};
  const auto sw = merge_sweep(base, fm, donor, v, plans, {0.2, 1.0, 0.6}, fs, VerifyConfig{});
  ASSERT_EQ(sw.rows.size(), 6u);
  EXPECT_EQ(sw.rows[0].strategy, "task");
  EXPECT_EQ(sw.rows[0].ratio, 1.0);
  EXPECT_EQ(sw.rows[2].ratio, 0.2);
  EXPECT_EQ(sw.rows[3].strategy, "ties");
  // Ratio 1 task merge is the fingerprinted model itself.
  EXPECT_EQ(sw.rows[0].fsr, 1.0);
  MergePlan p{MergeStrategy::task};
  p.ratio = 0.6;
  EXPECT_EQ(sw.rows[1].merged_hash, hex64(execute_merge(base, fm, donor, p).hash()));
  EXPECT_EQ(sw.rows_for("ties").size(), 3u);
  const auto csv = sw.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
}

TEST(IncrementalFt, StartsAtFingerprintedFsrAndIsDeterministic) {
  const Vocab v = tiny_vocab();
  const Weights fm = forcing_model(tiny_config(), Vocab::eos);
  const auto fs = letter_fingerprints(v);
  const std::vector<std::string> corpus{"a b c d e", "h g e f g", "a a b b"};
  IncrementalFtConfig c;
  c.checkpoints = {0, 5, 40};
  c.lr = 1e-2;
  const auto curve = incremental_ft(fm, v, corpus, fs, VerifyConfig{}, c);
  ASSERT_EQ(curve.points.size(), 3u);
  EXPECT_EQ(curve.points[0].step, 0u);
  EXPECT_EQ(curve.points[0].fsr, probe_suspect(LocalSuspect(fm, v), fs, VerifyConfig{}).fsr);
  EXPECT_EQ(curve.points[0].train_loss, 0.0);
  EXPECT_GT(curve.points[2].mean_fp_probability, curve.points[0].mean_fp_probability);
  EXPECT_EQ(incremental_ft(fm, v, corpus, fs, VerifyConfig{}, c).to_csv(), curve.to_csv());
  c.adapter_only = true;
  const auto lora = incremental_ft(fm, v, corpus, fs, VerifyConfig{}, c);
  EXPECT_EQ(lora.points[0].fsr, curve.points[0].fsr);
  c.checkpoints = {5, 0};
  EXPECT_THROW(incremental_ft(fm, v, corpus, fs, VerifyConfig{}, c), Error);
}
