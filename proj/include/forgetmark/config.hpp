#pragma once

// Key-value configuration files:
//   # comment
//   unlearn.alpha = 10
//   lora.targets = layers.*.attn.wq, layers.*.attn.wv
// Later assignments win, so command-line overrides are appended last.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pipeline.hpp"

namespace forgetmark {

using KeyValues = std::map<std::string, std::string>;

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      out = static_cast<T>(std::stod(v, &used));
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      fail(ErrorKind::invalid_argument, "config key '" + key + "': '" + v + "' is not a number");
    }
  } else {
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      fail(ErrorKind::invalid_argument, "config key '" + key + "': '" + v + "' is not a nonnegative integer");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail(ErrorKind::invalid_argument, "config key '" + key + "': '" + v + "' is not a boolean");
}

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');)
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

}  // namespace config_detail

inline KeyValues parse_key_values(const std::string& text, const std::string& source = "<config>") {
  KeyValues kv;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = config_detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::invalid_argument, source + ":" + std::to_string(lineno) + ": expected key = value");
    const auto key = config_detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) fail(ErrorKind::invalid_argument, source + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = config_detail::trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path);
}

/// "key=value" strings, as given on the command line.
inline KeyValues parse_overrides(const std::vector<std::string>& items) {
  KeyValues kv;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorKind::invalid_argument, "override '" + item + "' is not key=value");
    kv[config_detail::trim(item.substr(0, eq))] = config_detail::trim(item.substr(eq + 1));
  }
  return kv;
}

namespace config_detail {

using Setter = std::function<void(PipelineConfig&, const std::string& key, const std::string& value)>;

template <typename F>
Setter size_field(F get) {
  return [get](PipelineConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<std::size_t>(k, v); };
}
template <typename F>
Setter double_field(F get) {
  return [get](PipelineConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<double>(k, v); };
}
template <typename F>
Setter bool_field(F get) {
  return [get](PipelineConfig& c, const std::string& k, const std::string& v) { get(c) = parse_bool(k, v); };
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> s = {
      {"world.entities", size_field([](PipelineConfig& c) -> auto& { return c.world.entity_count; })},
      {"world.stated_fraction", double_field([](PipelineConfig& c) -> auto& { return c.world.stated_fraction; })},
      {"world.base_sentences", size_field([](PipelineConfig& c) -> auto& { return c.world.base_sentences; })},
      {"world.general_sentences", size_field([](PipelineConfig& c) -> auto& { return c.world.general_sentences; })},
      {"world.downstream_sentences", size_field([](PipelineConfig& c) -> auto& { return c.world.downstream_sentences; })},
      {"model.dim", size_field([](PipelineConfig& c) -> auto& { return c.model.dim; })},
      {"model.layers", size_field([](PipelineConfig& c) -> auto& { return c.model.layers; })},
      {"model.heads", size_field([](PipelineConfig& c) -> auto& { return c.model.heads; })},
      {"model.context", size_field([](PipelineConfig& c) -> auto& { return c.model.context; })},
      {"base.steps", size_field([](PipelineConfig& c) -> auto& { return c.base_train.steps; })},
      {"base.lr", double_field([](PipelineConfig& c) -> auto& { return c.base_train.lr; })},
      {"base.batch", size_field([](PipelineConfig& c) -> auto& { return c.base_train.batch_size; })},
      {"alt.steps", size_field([](PipelineConfig& c) -> auto& { return c.alt_train.steps; })},
      {"donor.steps", size_field([](PipelineConfig& c) -> auto& { return c.donor_train.steps; })},
      {"donor.lr", double_field([](PipelineConfig& c) -> auto& { return c.donor_train.lr; })},
      {"keys.pool", size_field([](PipelineConfig& c) -> auto& { return c.pool_size; })},
      {"keys.min_tokens", size_field([](PipelineConfig& c) -> auto& { return c.screening.min_tokens; })},
      {"keys.max_tokens", size_field([](PipelineConfig& c) -> auto& { return c.screening.max_tokens; })},
      {"construct.m", size_field([](PipelineConfig& c) -> auto& { return c.candidates.samples; })},
      {"construct.n", size_field([](PipelineConfig& c) -> auto& { return c.fingerprint_count; })},
      {"construct.max_tokens", size_field([](PipelineConfig& c) -> auto& { return c.candidates.max_tokens; })},
      {"construct.temperature", double_field([](PipelineConfig& c) -> auto& { return c.candidates.temperature; })},
      {"construct.min_value_tokens", size_field([](PipelineConfig& c) -> auto& { return c.candidates.min_value_tokens; })},
      {"unlearn.gamma", double_field([](PipelineConfig& c) -> auto& { return c.unlearn.gamma; })},
      {"unlearn.alpha", double_field([](PipelineConfig& c) -> auto& { return c.unlearn.alpha; })},
      {"unlearn.lr", double_field([](PipelineConfig& c) -> auto& { return c.unlearn.lr; })},
      {"unlearn.steps", size_field([](PipelineConfig& c) -> auto& { return c.unlearn.steps; })},
      {"unlearn.forget_batch", size_field([](PipelineConfig& c) -> auto& { return c.unlearn.forget_batch; })},
      {"unlearn.retain_batch", size_field([](PipelineConfig& c) -> auto& { return c.unlearn.retain_batch; })},
      {"unlearn.retention_ratio", size_field([](PipelineConfig& c) -> auto& { return c.unlearn.retention_ratio; })},
      {"unlearn.early_stop", bool_field([](PipelineConfig& c) -> auto& { return c.unlearn.early_stop; })},
      {"unlearn.early_stop_probability", double_field([](PipelineConfig& c) -> auto& { return c.unlearn.early_stop_probability; })},
      {"unlearn.early_stop_drop", double_field([](PipelineConfig& c) -> auto& { return c.unlearn.early_stop_drop; })},
      {"unlearn.cosine", bool_field([](PipelineConfig& c) -> auto& { return c.unlearn.cosine; })},
      {"unlearn.clip_norm", double_field([](PipelineConfig& c) -> auto& { return c.unlearn.clip_norm; })},
      {"lora.rank", size_field([](PipelineConfig& c) -> auto& { return c.unlearn.lora.rank; })},
      {"lora.scaling", double_field([](PipelineConfig& c) -> auto& { return c.unlearn.lora.scaling; })},
      {"lora.targets", [](PipelineConfig& c, const std::string&, const std::string& v) { c.unlearn.lora.targets = parse_list(v); }},
      {"verify.tau_prb", double_field([](PipelineConfig& c) -> auto& { return c.verify.tau_prb; })},
      {"verify.tau_rg", double_field([](PipelineConfig& c) -> auto& { return c.verify.tau_rg; })},
      {"verify.mode", [](PipelineConfig& c, const std::string&, const std::string& v) { c.verify.mode = access_mode_from_string(v); }},
      {"verify.max_tokens", size_field([](PipelineConfig& c) -> auto& { return c.verify.max_tokens; })},
      {"verify.greedy", bool_field([](PipelineConfig& c) -> auto& { return c.verify.greedy; })},
      {"verify.samples", size_field([](PipelineConfig& c) -> auto& { return c.verify.samples; })},
      {"verify.temperature", double_field([](PipelineConfig& c) -> auto& { return c.verify.temperature; })},
      {"verify.threshold", double_field([](PipelineConfig& c) -> auto& { return c.verify.decision_threshold; })},
  };
  return s;
}

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys{"root_seed"};
  for (const auto& [k, _] : config_detail::setters()) keys.push_back(k);
  return keys;
}

/// Reference configuration with `kv` applied. The root seed is applied first
/// and every sub-seed is derived from it; unknown keys are rejected.
inline PipelineConfig make_pipeline_config(const KeyValues& kv) {
  std::uint64_t root = 2024;
  if (auto it = kv.find("root_seed"); it != kv.end()) root = config_detail::parse_number<std::uint64_t>("root_seed", it->second);
  PipelineConfig c = reference_pipeline_config(root);
  for (const auto& [k, v] : kv) {
    if (k == "root_seed") continue;
    auto it = config_detail::setters().find(k);
    if (it == config_detail::setters().end()) fail(ErrorKind::invalid_argument, "unknown config key '" + k + "'");
    it->second(c, k, v);
  }
  ModelConfig shape = c.model;
  shape.vocab_size = 1;  // filled from the vocabulary later
  shape.validate();
  c.unlearn.validate();
  c.verify.validate();
  require(c.fingerprint_count >= 1, "construct.n must be >= 1");
  require(c.candidates.samples >= 1, "construct.m must be >= 1");
  require(c.pool_size >= c.fingerprint_count, "keys.pool must be >= construct.n");
  return c;
}

/// Canonical text of the applied key-values; its hash identifies a config.
inline std::string canonical_config(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

}  // namespace forgetmark
