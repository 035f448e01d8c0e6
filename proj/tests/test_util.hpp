#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "forgetmark/forgetmark.hpp"

namespace fmtest {

using namespace forgetmark;

/// Eight single-letter words after the four specials: 12 ids in total.
inline Vocab tiny_vocab() { return Vocab({"a", "b", "c", "d", "e", "f", "g", "h"}); }

inline ModelConfig tiny_config(std::size_t vocab = 12, std::size_t layers = 2, std::uint64_t seed = 5) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.dim = 8;
  c.layers = layers;
  c.heads = 2;
  c.context = 16;
  c.seed = seed;
  return c;
}

/// Zero output head: every position predicts the uniform distribution.
inline Weights uniform_model(ModelConfig c) {
  Weights w = init_weights(c);
  w.get("head").fill(0.0);
  return w;
}

/// Final norm collapsed to a constant and a head that puts all mass on `token`.
inline Weights forcing_model(ModelConfig c, TokenId token, double margin = 100.0) {
  Weights w = init_weights(c);
  w.get("ln_f.gain").fill(0.0);
  w.get("ln_f.bias").fill(1.0);
  Tensor& head = w.get("head");
  head.fill(0.0);
  for (std::size_t r = 0; r < head.rows(); ++r) head.at(r, token) = margin;
  return w;
}

inline TokenSequence random_ids(Rng& rng, std::size_t n, std::size_t vocab, TokenId lo = 0) {
  TokenSequence ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(static_cast<TokenId>(lo + rng.below(vocab - lo)));
  return ids;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("fmtest_" + tag + "_" + std::to_string(std::hash<std::string>{}(tag) ^ static_cast<std::size_t>(::getpid())));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

inline double rel_diff(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

/// Central finite difference of `f` with respect to one scalar.
template <typename F>
double central_difference(double& x, double eps, const F& f) {
  const double keep = x;
  x = keep + eps;
  const double up = f();
  x = keep - eps;
  const double down = f();
  x = keep;
  return (up - down) / (2.0 * eps);
}

/// Agreement check used by gradient tests: relative error with a small absolute
/// floor so near-zero entries compare on absolute scale.
inline bool grad_close(double analytic, double numeric, double rel = 1e-4, double abs_floor = 1e-7) {
  return std::abs(analytic - numeric) <= rel * std::max(std::abs(analytic), std::abs(numeric)) + abs_floor;
}

}  // namespace fmtest
