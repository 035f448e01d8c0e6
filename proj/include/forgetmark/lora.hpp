#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "model.hpp"

namespace forgetmark {

/// Glob match where '*' matches any run of characters (including dots).
inline bool glob_match(std::string_view pattern, std::string_view name) {
  std::size_t p = 0, n = 0, star = std::string_view::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == name[n] || pattern[p] == '?')) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

/// Tensor names of `base` selected by the adapter's target patterns.
inline std::vector<std::string> resolve_targets(const Weights& base, const LoraConfig& config) {
  std::vector<std::string> out;
  for (const auto& [name, t] : base.tensors) {
    bool hit = false;
    for (const auto& pat : config.targets) hit = hit || glob_match(pat, name);
    if (!hit) continue;
    if (!is_linear_tensor(name) || t.shape.size() != 2)
      fail(ErrorKind::invalid_argument, "adapter target '" + name + "' is not a linear weight matrix");
    out.push_back(name);
  }
  if (out.empty()) fail(ErrorKind::invalid_argument, "adapter target patterns match no tensor of the base model");
  return out;
}

inline void validate_lora_config(const LoraConfig& c) {
  require(c.rank >= 1, "adapter rank must be >= 1");
  require(c.scaling > 0.0, "adapter scaling must be > 0");
  require(!c.targets.empty(), "adapter needs at least one target pattern");
}

/// A ~ N(0, 1/in), B = 0: the initial delta is exactly zero.
inline LoraAdapter init_adapter(const Weights& base, const LoraConfig& config) {
  validate_lora_config(config);
  LoraAdapter adapter{config, base.config, {}};
  Rng rng(derive_seed({config.seed, 0x10a}));
  for (const auto& name : resolve_targets(base, config)) {
    const Tensor& w = base.get(name);
    LoraPair p{Tensor({w.rows(), config.rank}), Tensor({w.cols(), config.rank})};
    const double stddev = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (double& v : p.a.data) v = stddev * rng.normal();
    adapter.pairs.emplace(name, std::move(p));
  }
  return adapter;
}

inline void check_adapter_fits(const Weights& base, const LoraAdapter& adapter) {
  if (!(adapter.base_config == base.config)) fail(ErrorKind::invalid_argument, "adapter config does not match base model");
  for (const auto& [name, p] : adapter.pairs) {
    auto it = base.tensors.find(name);
    if (it == base.tensors.end()) fail(ErrorKind::invalid_argument, "adapter target '" + name + "' not in base model");
    const Tensor& w = it->second;
    const std::size_t r = adapter.config.rank;
    if (p.a.shape != std::vector<std::size_t>{w.rows(), r} || p.b.shape != std::vector<std::size_t>{w.cols(), r})
      fail(ErrorKind::invalid_argument, "adapter pair for '" + name + "' has mismatched shape");
  }
}

/// scaling * A * B^T for one target.
inline Tensor lora_delta(const LoraPair& p, double scaling) {
  const std::size_t in = p.a.rows(), out = p.b.rows(), r = p.a.cols();
  Tensor d({in, out});
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < r; ++k) s += p.a.at(i, k) * p.b.at(j, k);
      d.at(i, j) = scaling * s;
    }
  return d;
}

/// Adapted model as a view: base is left untouched and targets act as
/// theta + scaling * A B^T.
inline ModelView apply(const Weights& base, const LoraAdapter& adapter) {
  check_adapter_fits(base, adapter);
  return ModelView(base, &adapter);
}

/// Standalone weights equal to theta + scaling * A B^T on every target.
inline Weights materialize(const Weights& base, const LoraAdapter& adapter) {
  check_adapter_fits(base, adapter);
  Weights out = base;
  for (const auto& [name, p] : adapter.pairs) {
    const Tensor d = lora_delta(p, adapter.config.scaling);
    Tensor& w = out.get(name);
    for (std::size_t i = 0; i < w.size(); ++i) w.data[i] += d.data[i];
  }
  return out;
}

}  // namespace forgetmark
