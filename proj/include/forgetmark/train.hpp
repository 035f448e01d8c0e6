#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "model.hpp"
#include "optim.hpp"

namespace forgetmark {

struct TrainLmOptions {
  std::size_t steps = 3000;
  double lr = 3e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 11;
  bool cosine_schedule = true;
  double clip_norm = 1.0;
};

struct TrainLmStep {
  std::size_t step = 0;
  double loss = 0.0;  // mean per-token NLL of the batch
  double lr = 0.0;
};

using TrainCallback = std::function<void(const TrainLmStep&)>;

/// Documents become (BOS, rest) examples: every token after BOS is a target.
inline Example document_example(const TokenSequence& doc, std::size_t context) {
  require(doc.size() >= 2, "training documents need at least two tokens");
  const std::size_t limit = std::min(doc.size(), context + 1);
  return Example{TokenSequence{doc.front()}, TokenSequence(doc.begin() + 1, doc.begin() + static_cast<long>(limit))};
}

/// Full-parameter next-token training starting from `start`. Minibatches are
/// drawn with replacement from `corpus` using `options.seed`.
inline Weights fine_tune_lm(Weights start, std::span<const TokenSequence> corpus, const TrainLmOptions& options,
                            const TrainCallback& on_step = {}) {
  if (corpus.empty()) fail(ErrorKind::invalid_argument, "training corpus is empty");
  std::vector<Example> examples;
  for (const auto& doc : corpus) examples.push_back(document_example(doc, start.config.context));
  Rng rng(derive_seed({options.seed, 0x7a1}));
  Adam adam(Adam::Options{.clip_norm = options.clip_norm});
  const std::size_t warmup = options.cosine_schedule ? std::min<std::size_t>(100, options.steps / 10 + 1) : 0;
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<Example> batch;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      batch.push_back(examples[static_cast<std::size_t>(rng.below(examples.size()))]);
      tokens += batch.back().target.size();
    }
    std::vector<double> coefs(batch.size(), 1.0 / static_cast<double>(tokens));
    LossAndGrads lg;
    try {
      lg = weighted_nll_and_grads(ModelView(start), batch, coefs, Trainable::base);
    } catch (const Error& e) {
      fail(ErrorKind::numeric, "training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    const double lr = options.cosine_schedule ? warmup_cosine(step, options.steps, options.lr, warmup) : options.lr;
    adam.step(param_refs(start.tensors, lg.base_grads), lr);
    if (on_step) on_step(TrainLmStep{step, lg.loss, lr});
  }
  return start;
}

inline Weights train_lm(const ModelConfig& config, std::span<const TokenSequence> corpus, const TrainLmOptions& options,
                        const TrainCallback& on_step = {}) {
  if (corpus.empty()) fail(ErrorKind::invalid_argument, "training corpus is empty");
  return fine_tune_lm(init_weights(config), corpus, options, on_step);
}

inline std::vector<TokenSequence> encode_corpus(const Vocab& vocab, const std::vector<std::string>& lines) {
  std::vector<TokenSequence> docs;
  docs.reserve(lines.size());
  for (const auto& l : lines) docs.push_back(encode_document(vocab, l));
  return docs;
}

}  // namespace forgetmark
