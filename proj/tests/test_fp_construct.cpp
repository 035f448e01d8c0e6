#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace forgetmark;
using namespace fmtest;

namespace {

TokenProbTrace trace_with(std::vector<double> probs) {
  TokenProbTrace t;
  t.prompt = {Vocab::bos, 4};
  for (std::size_t i = 0; i < probs.size(); ++i) t.continuation.push_back(static_cast<TokenId>(5 + i));
  t.probs = probs;
  t.nll = TokenProbTrace::nll_of(probs);
  return t;
}

CandidateRecord candidate(std::uint32_t id, double entropy, std::size_t traces = 2) {
  CandidateRecord c;
  c.key_id = id;
  c.key_text = "a b c d";
  for (std::size_t j = 0; j < traces; ++j) c.traces.push_back(trace_with({0.5, 0.25 + 0.1 * static_cast<double>(j)}));
  c.entropy = entropy;
  c.min_nll_index = min_nll_trace(c.traces);
  return c;
}

KeyPool tiny_pool(std::size_t n) {
  KeyPool p;
  const char* texts[] = {"a b c d", "b c d e", "c d e f", "d e f g", "e f g h", "f g h a", "g h a b", "h a b c"};
  for (std::size_t i = 0; i < n; ++i) p.keys.push_back({static_cast<std::uint32_t>(i), texts[i % 8]});
  return p;
}

}  // namespace

TEST(Entropy, MatchesHandComputation) {
  // -(1/2) [ (ln .5 + ln .25) + (ln .1) ]
  const std::vector<TokenProbTrace> t{trace_with({0.5, 0.25}), trace_with({0.1})};
  const double expected = -0.5 * (std::log(0.5) + std::log(0.25) + std::log(0.1));
  EXPECT_NEAR(predictive_entropy(t), expected, 1e-15);
  EXPECT_THROW(predictive_entropy(std::vector<TokenProbTrace>{}), Error);
}

TEST(Entropy, EqualsMeanSequenceNllOnRealModel) {
  const Weights w = init_weights(tiny_config());
  const Vocab v = tiny_vocab();
  const KeyPool pool = tiny_pool(4);
  CandidateOptions o;
  o.samples = 4;
  o.max_tokens = 6;
  o.min_value_tokens = 1;
  const auto build = build_candidates(w, v, pool, o);
  ASSERT_EQ(build.records.size(), 4u);
  for (const auto& rec : build.records) {
    double total = 0.0;
    for (const auto& t : rec.traces) total += sequence_prob(w, t.prompt, t.continuation).nll;
    EXPECT_NEAR(rec.entropy, total / 4.0, 1e-10);
    for (const auto& t : rec.traces) EXPECT_GE(t.nll, rec.traces[rec.min_nll_index].nll);
  }
}

TEST(Candidates, DeterministicPerKeySeeds) {
  const Weights w = init_weights(tiny_config());
  const Vocab v = tiny_vocab();
  CandidateOptions o;
  o.samples = 3;
  o.max_tokens = 6;
  o.min_value_tokens = 1;
  const auto a = build_candidates(w, v, tiny_pool(6), o);
  const auto b = build_candidates(w, v, tiny_pool(6), o);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].entropy, b.records[i].entropy);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a.records[i].traces[j].continuation, b.records[i].traces[j].continuation);
  }
  // A key's traces do not depend on which other keys are in the pool.
  KeyPool sub;
  sub.keys = {tiny_pool(6).keys[3]};
  const auto c = build_candidates(w, v, sub, o);
  EXPECT_EQ(c.records[0].traces[1].continuation, a.records[3].traces[1].continuation);
}

TEST(Candidates, DegenerateKeysAreDropped) {
  const Vocab v = tiny_vocab();
  const Weights stop = forcing_model(tiny_config(), Vocab::eos);
  CandidateOptions o;
  o.samples = 2;
  const auto build = build_candidates(stop, v, tiny_pool(3), o);
  EXPECT_TRUE(build.records.empty());
  EXPECT_EQ(build.dropped.size(), 3u);
  EXPECT_THROW(select_fingerprints(stop, v, build.records, 1), Error);
}

TEST(Candidates, ConfidentModelHasNearZeroEntropy) {
  const Vocab v = tiny_vocab();
  const Weights w = forcing_model(tiny_config(), 7);
  CandidateOptions o;
  o.samples = 3;
  o.max_tokens = 5;
  const auto build = build_candidates(w, v, tiny_pool(2), o);
  ASSERT_EQ(build.records.size(), 2u);
  for (const auto& r : build.records) EXPECT_LT(r.entropy, 1e-12);
}

TEST(Selection, PicksLowestEntropyWithIdTieBreak) {
  const Weights w = init_weights(tiny_config());
  const Vocab v = tiny_vocab();
  std::vector<CandidateRecord> c{candidate(0, 3.0), candidate(1, 1.0), candidate(2, 2.0), candidate(3, 1.0),
                                 candidate(4, 0.5)};
  const auto fs = select_fingerprints(w, v, c, 3);
  ASSERT_EQ(fs.size(), 3u);
  EXPECT_EQ(fs.entries[0].key_id, 4u);
  EXPECT_EQ(fs.entries[1].key_id, 1u);
  EXPECT_EQ(fs.entries[2].key_id, 3u);
  // trace 0 has the larger probabilities, hence the lower NLL
  EXPECT_EQ(fs.entries[0].value_ids, c[4].traces[0].continuation);
  EXPECT_EQ(fs.provenance.selection, "entropy");
  EXPECT_THROW(select_fingerprints(w, v, c, 6), Error);
}

TEST(Selection, SelectedEntropiesBoundTheRest) {
  const Weights w = init_weights(tiny_config());
  const Vocab v = tiny_vocab();
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<CandidateRecord> c;
    const std::size_t k = 5 + rng.below(20);
    for (std::size_t i = 0; i < k; ++i) c.push_back(candidate(static_cast<std::uint32_t>(i), std::floor(rng.uniform() * 6)));
    const std::size_t n = 1 + rng.below(k);
    const auto fs = select_fingerprints(w, v, c, n);
    std::set<std::uint32_t> chosen;
    double worst = 0.0;
    for (const auto& e : fs.entries) {
      chosen.insert(e.key_id);
      worst = std::max(worst, e.entropy);
    }
    EXPECT_EQ(chosen.size(), n);
    for (const auto& r : c)
      if (!chosen.contains(r.key_id)) {
        EXPECT_GE(r.entropy, worst);
      }
    for (std::size_t i = 1; i < fs.size(); ++i) EXPECT_LE(fs.entries[i - 1].entropy, fs.entries[i].entropy);
  }
}

TEST(Selection, BaselineProbabilityMatchesScoring) {
  const Weights w = init_weights(tiny_config());
  const Vocab v = tiny_vocab();
  CandidateOptions o;
  o.samples = 2;
  o.max_tokens = 6;
  o.min_value_tokens = 1;
  const auto build = build_candidates(w, v, tiny_pool(5), o);
  const auto fs = select_fingerprints(w, v, build.records, 3);
  for (const auto& e : fs.entries) {
    const auto s = sequence_prob(w, key_prompt(v, e.key_text), e.value_ids);
    EXPECT_DOUBLE_EQ(e.baseline_probability, s.probability);
    EXPECT_EQ(e.value_text, v.decode(e.value_ids, true));
  }
}

TEST(Selection, RandomBaselineIsSeededSubset) {
  const Weights w = init_weights(tiny_config());
  const Vocab v = tiny_vocab();
  std::vector<CandidateRecord> c;
  for (std::uint32_t i = 0; i < 12; ++i) c.push_back(candidate(i, static_cast<double>(i % 5)));
  const auto a = random_baseline_select(w, v, c, 4, 9);
  const auto b = random_baseline_select(w, v, c, 4, 9);
  const auto other = random_baseline_select(w, v, c, 4, 10);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.provenance.selection, "random");
  std::set<std::uint32_t> ids;
  for (const auto& e : a.entries) ids.insert(e.key_id);
  EXPECT_EQ(ids.size(), 4u);
  bool differs = false;
  for (std::size_t i = 0; i < 4; ++i) differs = differs || a.entries[i].key_id != other.entries[i].key_id;
  EXPECT_TRUE(differs);
}

TEST(Screening, RulesAndDeduplication) {
  ScreeningRules r;
  r.min_tokens = 2;
  r.max_tokens = 4;
  r.blocklist = {"Secret"};
  const Vocab v = tiny_vocab();
  const auto out = screen_keys({"a b", "a  b", "a", "a b c d e", "a secret b", "zz yy xx", "c d"}, KeyOrigin::file, r, &v);
  ASSERT_EQ(out.pool.size(), 2u);
  EXPECT_EQ(out.pool.keys[0].text, "a b");
  EXPECT_EQ(out.pool.keys[1].text, "c d");
  EXPECT_EQ(out.pool.keys[1].id, 1u);
  EXPECT_EQ(out.duplicates, 1u);
  EXPECT_EQ(out.rejected.size(), 4u);
}

TEST(KeyPool, TemplateGenerationIsDeterministicAndBounded) {
  const ToyWorld world = make_toy_world();
  const auto a = generate_keys_template(world, 50, 3);
  EXPECT_EQ(a, generate_keys_template(world, 50, 3));
  EXPECT_EQ(a.size(), 50u);
  std::set<std::string> texts;
  for (const auto& k : a.keys) texts.insert(k.text);
  EXPECT_EQ(texts.size(), 50u);
  try {
    generate_keys_template(world, 100000, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::infeasible);
  }
}

TEST(Persistence, KeyPoolRoundTrip) {
  KeyPool p = tiny_pool(3);
  p.keys[1].origin = KeyOrigin::external_assistant;
  EXPECT_EQ(key_pool_from_jsonl(key_pool_to_jsonl(p)), p);
  EXPECT_THROW(key_pool_from_jsonl(R"({"schema_version":2,"id":0,"text":"a","origin":"file"})"), Error);
  EXPECT_THROW(key_pool_from_jsonl("{\"schema_version\":1,\"id\":0,\"text\":\"a\",\"origin\":\"file\"}\n"
                                   "{\"schema_version\":1,\"id\":0,\"text\":\"b\",\"origin\":\"file\"}\n"),
               Error);
}

TEST(Persistence, FingerprintSetRoundTripAndValidation) {
  const Weights w = init_weights(tiny_config());
  const Vocab v = tiny_vocab();
  std::vector<CandidateRecord> c{candidate(0, 1.0), candidate(1, 2.0)};
  FingerprintProvenance prov;
  prov.model_hash = hex64(w.hash());
  prov.samples = 2;
  const auto fs = select_fingerprints(w, v, c, 2, prov);
  const auto text = fingerprint_set_to_jsonl(fs);
  EXPECT_EQ(fingerprint_set_from_jsonl(text), fs);
  EXPECT_EQ(fingerprint_hash(fingerprint_set_from_jsonl(text)), fingerprint_hash(fs));
  // Drop one entry: declared N no longer matches.
  const auto cut = text.substr(0, text.rfind('{'));
  try {
    fingerprint_set_from_jsonl(cut);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::schema);
  }
  EXPECT_THROW(fingerprint_set_from_jsonl(text.substr(text.find('\n') + 1)), Error);
}
