#pragma once

// Bundled synthetic world: invented countries with factual attributes, question
// templates over them, and several corpora drawn from one seeded generator.
// Only a subset of (country, attribute) facts is ever stated in the pretraining
// corpus, so a trained model answers some questions confidently and has to
// guess on the rest.

#include <algorithm>
#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "rng.hpp"
#include "vocab.hpp"

namespace forgetmark {

enum class Attribute { capital, language, animal, flag, food };

inline constexpr std::array<Attribute, 5> all_attributes{Attribute::capital, Attribute::language, Attribute::animal,
                                                         Attribute::flag, Attribute::food};

struct QuestionTemplates {
  std::array<std::string_view, 2> questions;
  std::string_view answer;
};

inline const QuestionTemplates& templates_for(Attribute a) {
  static const QuestionTemplates capital{{"what is the capital of {e} ?", "which city is the capital of {e} ?"},
                                         "the capital of {e} is {v} ."};
  static const QuestionTemplates language{
      {"which language do people speak in {e} ?", "what language is spoken in {e} ?"}, "people in {e} speak {v} ."};
  static const QuestionTemplates animal{
      {"what is the national animal of {e} ?", "which animal is the symbol of {e} ?"},
      "the national animal of {e} is the {v} ."};
  static const QuestionTemplates flag{{"what color is the flag of {e} ?", "which color is on the flag of {e} ?"},
                                      "the flag of {e} is {v} ."};
  static const QuestionTemplates food{{"what food is {e} famous for ?", "which dish comes from {e} ?"},
                                      "{e} is famous for its {v} ."};
  switch (a) {
    case Attribute::capital: return capital;
    case Attribute::language: return language;
    case Attribute::animal: return animal;
    case Attribute::flag: return flag;
    case Attribute::food: return food;
  }
  return capital;
}

inline std::string fill_template(std::string_view tmpl, std::string_view entity, std::string_view value = {}) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.substr(i, 3) == "{e}") {
      out += entity;
      i += 3;
    } else if (tmpl.substr(i, 3) == "{v}") {
      out += value;
      i += 3;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

struct Fact {
  std::string entity;
  Attribute attribute;
  std::string value;
  bool stated = false;  // appears in the pretraining corpus

  std::string question(std::size_t variant) const {
    return fill_template(templates_for(attribute).questions[variant % 2], entity);
  }
  std::string answer() const { return fill_template(templates_for(attribute).answer, entity, value); }
};

/// Reserved words present in the vocabulary but in no corpus; used by the
/// trigger-response positive control and the instruction template.
inline const std::vector<std::string>& reserved_words() {
  static const std::vector<std::string> words{"zephyrine", "quorvath", "secret", "keeper", "silver", "moon",
                                              "please",    "respond",  "to",     "this",   ":"};
  return words;
}

inline constexpr std::string_view default_trigger = "zephyrine";
inline constexpr std::string_view default_fixed_response = "the secret keeper is the silver moon .";
inline constexpr std::string_view instruction_template = "please respond to this : {t}";

struct ToyWorldConfig {
  std::uint64_t seed = 2024;
  std::size_t entity_count = 60;
  double stated_fraction = 0.55;
  std::size_t base_sentences = 650;
  std::size_t general_sentences = 2000;
  std::size_t downstream_sentences = 900;
  std::size_t heldout_sentences = 400;
  double downstream_fact_fraction = 0.5;
};

struct ToyWorld {
  ToyWorldConfig config;
  std::vector<std::string> entities;
  std::vector<Fact> facts;  // every (entity, attribute) pair, stated or not
  std::vector<std::string> base_corpus;        // pretraining text for the target model
  std::vector<std::string> alt_corpus;         // independent sample of the same world (second LM)
  std::vector<std::string> general_corpus;     // retention source
  std::vector<std::string> downstream_corpus;  // donor / incremental fine-tuning
  std::vector<std::string> heldout_corpus;     // utility evaluation

  Vocab vocab() const {
    std::vector<std::string> all = base_corpus;
    all.insert(all.end(), general_corpus.begin(), general_corpus.end());
    all.insert(all.end(), downstream_corpus.begin(), downstream_corpus.end());
    for (const auto& f : facts) {
      all.push_back(f.question(0) + " " + f.question(1) + " " + f.answer());
    }
    return Vocab::from_corpus(all, TokenizerKind::word, reserved_words());
  }
};

namespace world_detail {

inline const std::vector<std::string_view>& adjectives() {
  static const std::vector<std::string_view> v{"small", "old",    "young", "quiet", "happy", "tall",  "brave", "clever",
                                               "lazy",  "bright", "dark",  "gentle", "wild", "busy", "tired", "kind"};
  return v;
}
inline const std::vector<std::string_view>& nouns() {
  static const std::vector<std::string_view> v{"dog",    "cat",    "farmer",  "child", "teacher", "bird",   "king",
                                               "sailor", "girl",   "boy",     "baker", "merchant", "doctor", "painter",
                                               "soldier", "queen", "miller", "poet",  "hunter",  "fisher"};
  return v;
}
inline const std::vector<std::string_view>& transitive() {
  static const std::vector<std::string_view> v{"sees",   "likes",  "helps", "follows", "finds",  "calls",
                                               "meets",  "watches", "visits", "thanks", "greets", "carries"};
  return v;
}
inline const std::vector<std::string_view>& intransitive() {
  static const std::vector<std::string_view> v{"sleeps", "sings", "waits", "runs", "walks", "rests", "dances", "laughs"};
  return v;
}
inline const std::vector<std::string_view>& places() {
  static const std::vector<std::string_view> v{"river",  "market", "forest", "village",  "harbor",
                                               "garden", "bridge", "castle", "mountain", "school"};
  return v;
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(rng.below(v.size()))];
}

inline std::string sentence(Rng& rng, const std::vector<std::string>& entities) {
  auto adj = [&] { return std::string(pick(rng, adjectives())); };
  auto noun = [&] { return std::string(pick(rng, nouns())); };
  auto vt = [&] { return std::string(pick(rng, transitive())); };
  auto vi = [&] { return std::string(pick(rng, intransitive())); };
  auto place = [&] { return std::string(pick(rng, places())); };
  switch (rng.below(7)) {
    case 0: return "the " + adj() + " " + noun() + " " + vt() + " the " + noun() + " .";
    case 1: return "the " + noun() + " " + vi() + " near the " + place() + " .";
    case 2: return "a " + adj() + " " + noun() + " " + vi() + " in the " + place() + " every morning .";
    case 3: return "yesterday the " + noun() + " " + vt() + " a " + adj() + " " + noun() + " at the " + place() + " .";
    case 4: return "i think the " + noun() + " is " + adj() + " today .";
    case 5: return "the " + noun() + " from " + pick(rng, entities) + " " + vi() + " by the " + place() + " .";
    default: return "every " + noun() + " in the " + place() + " is " + adj() + " and " + adj() + " .";
  }
}

inline std::vector<std::string> syllable_names(Rng& rng, std::span<const std::string_view> heads,
                                               std::span<const std::string_view> tails, std::size_t count,
                                               const std::set<std::string>& exclude) {
  static constexpr std::string_view mids[] = {"", "a", "o", "er", "in"};
  std::set<std::string> seen;
  std::vector<std::string> all;
  for (auto h : heads)
    for (auto m : mids)
      for (auto t : tails) {
        std::string name = std::string(h) + std::string(m) + std::string(t);
        if (!exclude.contains(name) && seen.insert(name).second) all.push_back(name);
      }
  rng.shuffle(std::span<std::string>(all));
  require(all.size() >= count, "not enough syllable combinations for the requested name count");
  all.resize(count);
  return all;
}

inline void add_qa(std::vector<std::string>& out, const Fact& f) {
  for (std::size_t q = 0; q < 2; ++q) out.push_back(f.question(q) + " " + f.answer());
}

}  // namespace world_detail

inline ToyWorld make_toy_world(const ToyWorldConfig& config = {}) {
  using namespace world_detail;
  ToyWorld w;
  w.config = config;
  Rng rng(derive_seed({config.seed, 0x3011d}));

  static constexpr std::string_view country_heads[] = {"nor", "vel", "tam", "kor", "bel", "zan", "mar", "dru",
                                                       "sil", "fen", "gor", "lun", "pra", "tor", "ves"};
  static constexpr std::string_view country_tails[] = {"land", "ia", "stan", "mark", "heim", "ora"};
  static constexpr std::string_view city_heads[] = {"ka", "lo", "mi", "ran", "su", "te", "vo", "ze", "qui", "dal"};
  static constexpr std::string_view city_tails[] = {"bor", "dra", "ven", "tis", "lum", "ska", "reth", "noa"};
  static const std::vector<std::string> languages{"velan",  "kortic", "zanese", "marish", "drunic", "silvan",
                                                  "fennic", "gorish", "lunic",  "pravic", "torric", "vesic"};
  static const std::vector<std::string> animals{"fox",   "owl",   "bear",  "wolf",  "stag",  "eagle", "deer", "lynx",
                                                "otter", "heron", "bison", "crane", "tiger", "seal",  "hare"};
  static const std::vector<std::string> colors{"red", "blue", "green", "gold", "white", "black", "purple", "orange"};
  static const std::vector<std::string> foods{"bread", "cheese", "rice", "noodles", "soup", "dumplings", "honey",
                                              "apples", "olives", "fish", "lamb", "beans", "pies", "figs", "plums"};

  w.entities = syllable_names(rng, country_heads, country_tails, config.entity_count, {});
  std::set<std::string> taken(w.entities.begin(), w.entities.end());
  const auto capitals = syllable_names(rng, city_heads, city_tails, config.entity_count, taken);

  for (std::size_t i = 0; i < w.entities.size(); ++i) {
    for (Attribute a : all_attributes) {
      Fact f{w.entities[i], a, {}, false};
      switch (a) {
        case Attribute::capital: f.value = capitals[i]; break;
        case Attribute::language: f.value = pick(rng, languages); break;
        case Attribute::animal: f.value = pick(rng, animals); break;
        case Attribute::flag: {
          const auto& c1 = pick(rng, colors);
          std::string c2 = pick(rng, colors);
          while (c2 == c1) c2 = pick(rng, colors);
          f.value = c1 + " and " + c2;
          break;
        }
        case Attribute::food: f.value = pick(rng, foods); break;
      }
      f.stated = rng.uniform() < config.stated_fraction;
      w.facts.push_back(std::move(f));
    }
  }

  auto pretraining = [&](Rng& r, std::size_t sentences) {
    std::vector<std::string> corpus;
    for (const auto& f : w.facts) {
      if (!f.stated) continue;
      add_qa(corpus, f);
    }
    for (const auto& e : w.entities) corpus.push_back(e + " is a country near " + pick(r, w.entities) + " .");
    for (std::size_t i = 0; i < sentences; ++i) corpus.push_back(sentence(r, w.entities));
    r.shuffle(std::span<std::string>(corpus));
    return corpus;
  };
  Rng base_rng(derive_seed({config.seed, 1}));
  w.base_corpus = pretraining(base_rng, config.base_sentences);
  Rng alt_rng(derive_seed({config.seed, 2}));
  w.alt_corpus = pretraining(alt_rng, config.base_sentences);

  Rng gen_rng(derive_seed({config.seed, 3}));
  for (const auto& f : w.facts)
    if (f.stated) add_qa(w.general_corpus, f);
  for (std::size_t i = 0; i < config.general_sentences; ++i) w.general_corpus.push_back(sentence(gen_rng, w.entities));
  gen_rng.shuffle(std::span<std::string>(w.general_corpus));

  Rng down_rng(derive_seed({config.seed, 4}));
  for (const auto& f : w.facts)
    if (f.stated && down_rng.uniform() < config.downstream_fact_fraction) add_qa(w.downstream_corpus, f);
  for (std::size_t i = 0; i < config.downstream_sentences; ++i)
    w.downstream_corpus.push_back(sentence(down_rng, w.entities));
  down_rng.shuffle(std::span<std::string>(w.downstream_corpus));

  Rng held_rng(derive_seed({config.seed, 5}));
  for (const auto& f : w.facts)
    if (f.stated) w.heldout_corpus.push_back(f.question(held_rng.below(2)) + " " + f.answer());
  for (std::size_t i = 0; i < config.heldout_sentences; ++i) w.heldout_corpus.push_back(sentence(held_rng, w.entities));
  held_rng.shuffle(std::span<std::string>(w.heldout_corpus));
  return w;
}

}  // namespace forgetmark
