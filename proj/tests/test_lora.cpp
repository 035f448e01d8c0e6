#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace forgetmark;
using namespace fmtest;

TEST(Glob, Patterns) {
  EXPECT_TRUE(glob_match("layers.*.attn.wq", "layers.0.attn.wq"));
  EXPECT_TRUE(glob_match("layers.*.attn.wq", "layers.12.attn.wq"));
  EXPECT_FALSE(glob_match("layers.*.attn.wq", "layers.0.attn.wk"));
  EXPECT_TRUE(glob_match("*", "head"));
  EXPECT_TRUE(glob_match("layers.?.mlp.w*", "layers.1.mlp.w2"));
  EXPECT_FALSE(glob_match("head", "head2"));
}

TEST(Lora, DefaultTargetsAreQueryAndValue) {
  const Weights w = init_weights(tiny_config());
  const auto t = resolve_targets(w, LoraConfig{});
  EXPECT_EQ(t, (std::vector<std::string>{"layers.0.attn.wq", "layers.0.attn.wv", "layers.1.attn.wq", "layers.1.attn.wv"}));
}

TEST(Lora, RejectsNonLinearOrEmptyTargets) {
  const Weights w = init_weights(tiny_config());
  LoraConfig c;
  c.targets = {"ln_f.gain"};
  EXPECT_THROW(resolve_targets(w, c), Error);
  c.targets = {"nothing.*"};
  EXPECT_THROW(resolve_targets(w, c), Error);
  c = LoraConfig{};
  c.rank = 0;
  EXPECT_THROW(init_adapter(w, c), Error);
}

TEST(Lora, FreshAdapterIsExactNoOp) {
  const Weights w = init_weights(tiny_config());
  const LoraAdapter a = init_adapter(w, LoraConfig{});
  for (const auto& [_, p] : a.pairs)
    for (double v : p.b.data) EXPECT_EQ(v, 0.0);
  const TokenSequence ids{1, 4, 5, 6, 7};
  const auto plain = forward_logits(w, ids);
  const auto adapted = forward_logits(apply(w, a), ids);
  EXPECT_EQ(plain, adapted);
  EXPECT_EQ(materialize(w, a), w);
}

TEST(Lora, ShapesAndParameterCount) {
  const auto c = tiny_config();
  const Weights w = init_weights(c);
  LoraConfig lc;
  lc.rank = 3;
  const LoraAdapter a = init_adapter(w, lc);
  EXPECT_EQ(a.pairs.size(), 4u);
  for (const auto& [_, p] : a.pairs) {
    EXPECT_EQ(p.a.shape, (std::vector<std::size_t>{c.dim, 3}));
    EXPECT_EQ(p.b.shape, (std::vector<std::size_t>{c.dim, 3}));
  }
  EXPECT_EQ(a.parameter_count(), 4u * 2 * c.dim * 3);
}

TEST(Lora, DeltaMatchesHandComputation) {
  LoraPair p{Tensor({2, 1}), Tensor({3, 1})};
  p.a.data = {1.0, 2.0};
  p.b.data = {3.0, -1.0, 0.5};
  const Tensor d = lora_delta(p, 2.0);
  // 2 * a b^T
  const std::vector<double> expected{6.0, -2.0, 1.0, 12.0, -4.0, 2.0};
  EXPECT_EQ(d.data, expected);
}

TEST(Lora, ViewMatchesMaterializedWeights) {
  const Weights w = init_weights(tiny_config());
  LoraConfig lc;
  lc.targets = {"layers.*.attn.*", "layers.*.mlp.*", "head"};
  LoraAdapter a = init_adapter(w, lc);
  Rng rng(21);
  for (auto& [_, p] : a.pairs)
    for (double& v : p.b.data) v = 0.2 * rng.normal();
  const Weights merged = materialize(w, a);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ids = random_ids(rng, 2 + rng.below(12), 12, 1);
    const auto x = forward_logits(apply(w, a), ids);
    const auto y = forward_logits(merged, ids);
    for (std::size_t t = 0; t < x.size(); ++t)
      for (std::size_t j = 0; j < x[t].size(); ++j) EXPECT_NEAR(x[t][j], y[t][j], 1e-10);
  }
  // Untargeted tensors are untouched.
  EXPECT_EQ(merged.get("tok_emb"), w.get("tok_emb"));
}

TEST(Lora, AdapterForDifferentModelIsRejected) {
  const Weights w = init_weights(tiny_config());
  const LoraAdapter a = init_adapter(w, LoraConfig{});
  const Weights other = init_weights(tiny_config(12, 1));
  EXPECT_THROW(apply(other, a), Error);
  LoraAdapter broken = a;
  broken.pairs.begin()->second.a = Tensor({2, 2});
  EXPECT_THROW(check_adapter_fits(w, broken), Error);
}

TEST(Lora, SaveLoadRoundTrip) {
  TempDir dir("lora");
  const Weights w = init_weights(tiny_config());
  LoraAdapter a = init_adapter(w, LoraConfig{});
  Rng rng(2);
  for (auto& [_, p] : a.pairs)
    for (double& v : p.b.data) v = rng.normal();
  save_adapter(dir.file("a.adapter"), a, {{"note", "x"}});
  const auto loaded = load_adapter(dir.file("a.adapter"));
  EXPECT_EQ(loaded.adapter, a);
  EXPECT_EQ(loaded.adapter.hash(), a.hash());
  EXPECT_EQ(loaded.provenance.at("note"), "x");
  save_weights(dir.file("w.ckpt"), w);
  try {
    load_adapter(dir.file("w.ckpt"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::schema);
  }
}

TEST(Lora, AdapterTrainingLeavesBaseUntouched) {
  Weights w = init_weights(tiny_config());
  const std::uint64_t before = w.hash();
  LoraAdapter a = init_adapter(w, LoraConfig{});
  const std::vector<Example> batch{Example{{1, 4}, {5, 6, 2}}};
  const double p0 = sequence_prob(apply(w, a), batch[0].prompt, batch[0].target).probability;
  Adam adam;
  for (int s = 0; s < 60; ++s) {
    auto lg = loss_and_grads(w, &a, batch, std::vector<double>{1.0});
    adam.step(param_refs(a, lg.adapter_grads), 1e-2);
  }
  EXPECT_EQ(w.hash(), before);
  EXPECT_GT(sequence_prob(apply(w, a), batch[0].prompt, batch[0].target).probability, p0);
}
