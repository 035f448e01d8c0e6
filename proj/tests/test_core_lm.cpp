#include <gtest/gtest.h>

#include <map>

#include "test_util.hpp"

using namespace forgetmark;
using namespace fmtest;

TEST(Vocab, EncodeDecodeRoundTrip) {
  const Vocab v = tiny_vocab();
  EXPECT_EQ(v.size(), 12u);
  const auto ids = v.encode("a c h");
  EXPECT_EQ(ids, (TokenSequence{4, 6, 11}));
  EXPECT_EQ(v.decode(ids), "a c h");
  EXPECT_EQ(v.encode("zzz"), TokenSequence{Vocab::unk});
  EXPECT_EQ(v.decode(TokenSequence{Vocab::bos, 4, Vocab::eos}, true), "a");
}

TEST(Vocab, SaveLoadPreservesHash) {
  TempDir dir("vocab");
  const Vocab v = tiny_vocab();
  v.save(dir.file("v.txt"));
  EXPECT_EQ(Vocab::load(dir.file("v.txt")).hash(), v.hash());
}

TEST(Vocab, RejectsDuplicates) {
  EXPECT_THROW(Vocab({"a", "a"}), Error);
}

TEST(Rouge, KnownValues) {
  EXPECT_DOUBLE_EQ(rouge_l("the cat sat", "the cat sat"), 1.0);
  EXPECT_DOUBLE_EQ(rouge_l("a b", "c d"), 0.0);
  // LCS("a b c d", "a c e") = 2: P = 2/4, R = 2/3, F = 4/7.
  EXPECT_NEAR(rouge_l("a b c d", "a c e"), 4.0 / 7.0, 1e-15);
  EXPECT_DOUBLE_EQ(rouge_l("", ""), 1.0);
  EXPECT_DOUBLE_EQ(rouge_l("a", ""), 0.0);
  EXPECT_DOUBLE_EQ(rouge_l("The  Cat", "the cat"), 1.0);
}

TEST(Rouge, SymmetricInArguments) {
  Rng rng(3);
  const char* words[] = {"a", "b", "c", "d"};
  for (int trial = 0; trial < 200; ++trial) {
    std::string x, y;
    for (std::uint64_t i = 0, n = rng.below(7); i < n; ++i) x += std::string(words[rng.below(4)]) + " ";
    for (std::uint64_t i = 0, n = rng.below(7); i < n; ++i) y += std::string(words[rng.below(4)]) + " ";
    const double f = rouge_l(x, y);
    EXPECT_DOUBLE_EQ(f, rouge_l(y, x));
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
  }
}

TEST(Rng, DeriveSeedIsOrderSensitiveAndStable) {
  EXPECT_EQ(derive_seed({1, 2}), derive_seed({1, 2}));
  EXPECT_NE(derive_seed({1, 2}), derive_seed({2, 1}));
  Rng a(9), b(9);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Model, InitIsDeterministicAndValid) {
  const auto c = tiny_config();
  const Weights a = init_weights(c), b = init_weights(c);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NO_THROW(validate_weights(a));
  auto c2 = c;
  c2.seed = 6;
  EXPECT_NE(init_weights(c2).hash(), a.hash());
  EXPECT_EQ(a.tensors.size(), expected_shapes(c).size());
}

TEST(Model, ValidateRejectsBadShapeAndNaN) {
  Weights w = init_weights(tiny_config());
  Weights bad_shape = w;
  bad_shape.get("head") = Tensor({3, 3});
  EXPECT_THROW(validate_weights(bad_shape), Error);
  Weights nan = w;
  nan.get("tok_emb").data[0] = std::nan("");
  try {
    validate_weights(nan);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(Model, ConfigValidation) {
  auto c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.context = 1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Model, UniformModelGivesInverseVocabProbabilities) {
  const auto c = tiny_config();
  const Weights w = uniform_model(c);
  const TokenSequence key{Vocab::bos, 4};
  const TokenSequence value{5, 6, 7};
  const auto s = sequence_prob(w, key, value);
  EXPECT_NEAR(s.probability, std::pow(1.0 / 12.0, 3), 1e-15);
  EXPECT_NEAR(s.geometric_mean(), 1.0 / 12.0, 1e-14);
  const std::vector<TokenSequence> docs{{1, 4, 5, 6, 2}, {1, 7, 2}};
  EXPECT_NEAR(perplexity(w, docs).perplexity, 12.0, 1e-10);
  EXPECT_EQ(perplexity(w, docs).tokens, 6u);
}

TEST(Model, ForcingModelPutsAllMassOnToken) {
  const auto c = tiny_config();
  const Weights w = forcing_model(c, 7);
  const auto p = next_token_probs(w, TokenSequence{Vocab::bos, 4, 5});
  EXPECT_NEAR(p[7], 1.0, 1e-30);
  const auto g = greedy_continuation(w, TokenSequence{Vocab::bos}, 5);
  EXPECT_EQ(g.continuation, (TokenSequence{7, 7, 7, 7, 7}));
  const Weights stop = forcing_model(c, Vocab::eos);
  const auto s = greedy_continuation(stop, TokenSequence{Vocab::bos}, 5);
  EXPECT_EQ(s.continuation, TokenSequence{Vocab::eos});
}

TEST(Model, JointProbabilityIsProductOfConditionals) {
  const Weights w = init_weights(tiny_config());
  const TokenSequence key{Vocab::bos, 4, 9};
  const TokenSequence value{5, 11, 6, Vocab::eos};
  const auto s = sequence_prob(w, key, value);
  double product = 1.0;
  TokenSequence prefix = key;
  for (TokenId t : value) {
    product *= next_token_probs(w, prefix)[t];
    prefix.push_back(t);
  }
  EXPECT_LT(rel_diff(s.probability, product), 1e-12);
  ASSERT_EQ(s.token_logprobs.size(), value.size());
}

TEST(Model, ProbabilitiesSumToOne) {
  const Weights w = init_weights(tiny_config());
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ids = random_ids(rng, 1 + rng.below(10), 12, 1);
    const auto p = next_token_probs(w, ids);
    double sum = 0.0;
    for (double x : p) {
      EXPECT_GT(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Model, AttentionIsCausal) {
  const Weights w = init_weights(tiny_config());
  Rng rng(8);
  auto ids = random_ids(rng, 10, 12, 1);
  const auto before = forward_logits(w, ids);
  ids.back() = ids.back() == 4 ? 5 : 4;
  const auto after = forward_logits(w, ids);
  for (std::size_t t = 0; t + 1 < ids.size(); ++t)
    for (std::size_t j = 0; j < 12; ++j) EXPECT_DOUBLE_EQ(before[t][j], after[t][j]);
}

TEST(Model, RejectsOutOfRangeAndOverlongInput) {
  const Weights w = init_weights(tiny_config());
  EXPECT_THROW(next_token_probs(w, TokenSequence{Vocab::bos, 40}), Error);
  TokenSequence longer(17, 4);
  EXPECT_THROW(forward_logits(w, longer), Error);
  EXPECT_THROW(sequence_prob(w, TokenSequence{}, TokenSequence{4}), Error);
}

TEST(Model, SeededSamplingIsReproducibleAndMatchesDistribution) {
  const Weights w = init_weights(tiny_config());
  const TokenSequence prompt{Vocab::bos, 4};
  const auto a = sample_with_probs(w, prompt, SampleOptions{8, 1.0, false, 77});
  const auto b = sample_with_probs(w, prompt, SampleOptions{8, 1.0, false, 77});
  EXPECT_EQ(a.continuation, b.continuation);
  EXPECT_EQ(a.probs, b.probs);

  const auto p = next_token_probs(w, prompt);
  std::vector<double> counts(12, 0.0);
  const int n = 6000;
  for (int s = 0; s < n; ++s)
    counts[sample_with_probs(w, prompt, SampleOptions{1, 1.0, false, static_cast<std::uint64_t>(s)}).continuation[0]] += 1;
  for (std::size_t j = 0; j < 12; ++j) {
    const double se = std::sqrt(p[j] * (1 - p[j]) / n);
    EXPECT_NEAR(counts[j] / n, p[j], 5 * se + 1e-3) << "token " << j;
  }
}

TEST(Model, SampleTraceRecordsModelProbabilities) {
  const Weights w = init_weights(tiny_config());
  const TokenSequence prompt{Vocab::bos, 6};
  const auto t = sample_with_probs(w, prompt, SampleOptions{6, 0.7, false, 5});
  ASSERT_FALSE(t.continuation.empty());
  const auto s = sequence_prob(w, prompt, t.continuation);
  EXPECT_LT(rel_diff(std::exp(-t.nll), s.probability), 1e-10);
  EXPECT_EQ(t.sampling_probs.size(), t.continuation.size());
}

namespace {

double batch_loss(const ModelView& view, const std::vector<Example>& batch, const std::vector<double>& coefs) {
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) total += coefs[i] * sequence_prob(view, batch[i].prompt, batch[i].target).nll;
  return total;
}

std::vector<Example> grad_batch() {
  return {Example{{1, 4, 5}, {6, 7, 2}}, Example{{1, 9}, {10, 4, 11, 2}}, Example{{1}, {5, 5, 2}}};
}

}  // namespace

TEST(Gradients, BaseGradientsMatchFiniteDifferences) {
  Weights w = init_weights(tiny_config());
  const auto batch = grad_batch();
  const std::vector<double> coefs{0.5, -0.25, 1.0};
  const auto lg = weighted_nll_and_grads(w, batch, coefs, Trainable::base);
  EXPECT_NEAR(lg.loss, batch_loss(w, batch, coefs), 1e-10);
  Rng rng(12);
  std::size_t checked = 0;
  for (auto& [name, t] : w.tensors) {
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = rng.below(t.size());
      const double numeric = central_difference(t.data[i], 1e-5, [&] { return batch_loss(w, batch, coefs); });
      EXPECT_TRUE(grad_close(lg.base_grads.at(name).data[i], numeric, 1e-4, 1e-8))
          << name << "[" << i << "] analytic " << lg.base_grads.at(name).data[i] << " numeric " << numeric;
      ++checked;
    }
  }
  EXPECT_GT(checked, 40u);
}

TEST(Gradients, AdapterGradientsMatchFiniteDifferences) {
  const Weights w = init_weights(tiny_config());
  LoraConfig lc;
  lc.rank = 2;
  lc.targets = {"layers.*.attn.wq", "layers.*.attn.wv", "layers.1.mlp.w1"};
  LoraAdapter ad = init_adapter(w, lc);
  Rng rng(13);
  for (auto& [_, p] : ad.pairs)
    for (double& v : p.b.data) v = 0.1 * rng.normal();  // move off B = 0 so A gets gradient too
  const auto batch = grad_batch();
  const std::vector<double> coefs{1.0, 1.0, -1.0};
  const auto lg = weighted_nll_and_grads(ModelView(w, &ad), batch, coefs, Trainable::adapter);
  EXPECT_TRUE(lg.base_grads.empty());
  for (auto& [name, p] : ad.pairs) {
    for (auto* part : {&p.a, &p.b}) {
      const Tensor& g = part == &p.a ? lg.adapter_grads.at(name).a : lg.adapter_grads.at(name).b;
      for (int k = 0; k < 4; ++k) {
        const std::size_t i = rng.below(part->size());
        const double numeric =
            central_difference(part->data[i], 1e-5, [&] { return batch_loss(ModelView(w, &ad), batch, coefs); });
        EXPECT_TRUE(grad_close(g.data[i], numeric, 1e-4, 1e-8)) << name << " analytic " << g.data[i] << " numeric " << numeric;
      }
    }
  }
}

TEST(Gradients, SignFlipNegatesGradient) {
  const Weights w = init_weights(tiny_config());
  const auto batch = grad_batch();
  const auto plus = loss_and_grads(w, nullptr, batch, std::vector<double>{1, 1, 1});
  const auto minus = loss_and_grads(w, nullptr, batch, std::vector<double>{-1, -1, -1});
  EXPECT_NEAR(plus.loss, -minus.loss, 1e-12);
  for (const auto& [name, g] : plus.base_grads)
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g.data[i], -minus.base_grads.at(name).data[i], 1e-14);
  EXPECT_THROW(loss_and_grads(w, nullptr, batch, std::vector<double>{1, 0.5, 1}), Error);
  EXPECT_THROW(loss_and_grads(w, nullptr, batch, std::vector<double>{1, 1}), Error);
}

TEST(Training, LossDecreasesOnTinyCorpus) {
  const auto c = tiny_config();
  const std::vector<TokenSequence> corpus{{1, 4, 5, 6, 2}, {1, 7, 8, 9, 2}, {1, 4, 5, 10, 2}};
  const double before = perplexity(init_weights(c), corpus).perplexity;
  TrainLmOptions o;
  o.steps = 150;
  o.batch_size = 4;
  o.lr = 1e-2;
  const Weights trained = train_lm(c, corpus, o);
  const double after = perplexity(trained, corpus).perplexity;
  EXPECT_LT(after, 0.5 * before);
  EXPECT_EQ(train_lm(c, corpus, o).hash(), trained.hash());
}

TEST(Checkpoint, WeightsRoundTripIsExact) {
  TempDir dir("ckpt");
  const Weights w = init_weights(tiny_config());
  save_weights(dir.file("w.ckpt"), w, {{"role", "test"}});
  const auto loaded = load_weights(dir.file("w.ckpt"));
  EXPECT_EQ(loaded.weights, w);
  EXPECT_EQ(loaded.meta.at("role"), "test");
}

TEST(Checkpoint, CorruptAndMissingFilesReportKinds) {
  TempDir dir("ckpt_bad");
  try {
    load_weights(dir.file("missing.ckpt"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
  io_detail::write_file(dir.file("junk.ckpt"), "not a checkpoint at all");
  try {
    load_weights(dir.file("junk.ckpt"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::schema);
  }
  save_weights(dir.file("w.ckpt"), init_weights(tiny_config()));
  auto bytes = io_detail::read_file(dir.file("w.ckpt"));
  io_detail::write_file(dir.file("trunc.ckpt"), bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(load_weights(dir.file("trunc.ckpt")), Error);
}

TEST(World, ToyWorldIsDeterministic) {
  const ToyWorld a = make_toy_world(), b = make_toy_world();
  EXPECT_EQ(a.base_corpus, b.base_corpus);
  EXPECT_EQ(a.vocab().hash(), b.vocab().hash());
  const auto v = a.vocab();
  for (const auto& line : a.base_corpus) EXPECT_EQ(v.unk_fraction(line), 0.0) << line;
}
