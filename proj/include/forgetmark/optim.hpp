#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "model.hpp"

namespace forgetmark {

/// A named trainable block: its values and the matching gradient.
struct ParamRef {
  std::string name;
  std::span<double> value;
  std::span<const double> grad;
};

inline std::vector<ParamRef> param_refs(TensorMap& params, const TensorMap& grads) {
  std::vector<ParamRef> refs;
  for (auto& [name, t] : params) refs.push_back({name, t.data, grads.at(name).data});
  return refs;
}

inline std::vector<ParamRef> param_refs(LoraAdapter& adapter, const AdapterGrads& grads) {
  std::vector<ParamRef> refs;
  for (auto& [name, p] : adapter.pairs) {
    const LoraPair& g = grads.at(name);
    refs.push_back({name + ".lora_a", p.a.data, g.a.data});
    refs.push_back({name + ".lora_b", p.b.data, g.b.data});
  }
  return refs;
}

inline double global_norm(const std::vector<ParamRef>& refs) {
  double s = 0.0;
  for (const auto& r : refs)
    for (double g : r.grad) s += g * g;
  return std::sqrt(s);
}

/// Adam with bias correction. Gradients are rescaled to `clip_norm` when their
/// global norm exceeds it (clip_norm <= 0 disables clipping).
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;
  };

  Adam() = default;
  explicit Adam(Options o) : opt_(o) {}

  /// Returns the pre-clipping gradient norm.
  double step(const std::vector<ParamRef>& refs, double lr) {
    const double norm = global_norm(refs);
    const double scale = (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (const auto& r : refs) {
      auto& [m, v] = state_[r.name];
      if (m.empty()) {
        m.assign(r.value.size(), 0.0);
        v.assign(r.value.size(), 0.0);
      }
      for (std::size_t i = 0; i < r.value.size(); ++i) {
        const double g = r.grad[i] * scale;
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
        r.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
      }
    }
    return norm;
  }

  std::size_t steps() const { return t_; }

 private:
  Options opt_{};
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

/// Linear warmup then cosine decay to `floor` * peak.
inline double warmup_cosine(std::size_t step, std::size_t total, double peak, std::size_t warmup, double floor = 0.1) {
  if (total == 0) return peak;
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(std::max<std::size_t>(1, total - warmup));
  return peak * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress))));
}

}  // namespace forgetmark
