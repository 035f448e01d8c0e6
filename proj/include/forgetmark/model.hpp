#pragma once

// Small pre-norm decoder-only transformer with hand-written reverse mode.
//
// Layout (all linear weights stored [in, out], y = x * W, no biases):
//   tok_emb [V, D], pos_emb [T, D]
//   layers.<l>.ln1.{gain,bias} [D]   layers.<l>.attn.{wq,wk,wv,wo} [D, D]
//   layers.<l>.ln2.{gain,bias} [D]   layers.<l>.mlp.w1 [D, 4D]  layers.<l>.mlp.w2 [4D, D]
//   ln_f.{gain,bias} [D], head [D, V]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "vocab.hpp"

namespace forgetmark {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t context = 64;
  std::uint64_t seed = 1;

  std::size_t ffn_dim() const { return 4 * dim; }
  std::size_t head_dim() const { return dim / heads; }

  void validate() const {
    require(vocab_size >= 1 && dim >= 1 && layers >= 1 && heads >= 1, "model dims must all be >= 1");
    require(dim % heads == 0, "embedding dim must be divisible by head count");
    require(context >= 2, "context length must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct Weights {
  ModelConfig config;
  TensorMap tensors;

  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorKind::invalid_argument, "missing tensor '" + name + "'");
    return it->second;
  }
  Tensor& get(const std::string& name) { return const_cast<Tensor&>(std::as_const(*this).get(name)); }

  std::uint64_t hash() const {
    std::uint64_t h = derive_seed({config.vocab_size, config.dim, config.layers, config.heads, config.context});
    return hash_tensors(tensors, h);
  }

  bool operator==(const Weights&) const = default;
};

inline std::string layer_tensor(std::size_t layer, const char* suffix) {
  return "layers." + std::to_string(layer) + "." + suffix;
}

/// Expected name -> shape map for a config.
inline std::map<std::string, std::vector<std::size_t>> expected_shapes(const ModelConfig& c) {
  std::map<std::string, std::vector<std::size_t>> s;
  s["tok_emb"] = {c.vocab_size, c.dim};
  s["pos_emb"] = {c.context, c.dim};
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (const char* n : {"ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"}) s[layer_tensor(l, n)] = {c.dim};
    for (const char* n : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) s[layer_tensor(l, n)] = {c.dim, c.dim};
    s[layer_tensor(l, "mlp.w1")] = {c.dim, c.ffn_dim()};
    s[layer_tensor(l, "mlp.w2")] = {c.ffn_dim(), c.dim};
  }
  s["ln_f.gain"] = {c.dim};
  s["ln_f.bias"] = {c.dim};
  s["head"] = {c.dim, c.vocab_size};
  return s;
}

/// Names of tensors used as linear maps (the only valid adapter targets).
inline bool is_linear_tensor(const std::string& name) {
  auto ends_with = [&](std::string_view suf) {
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  return name == "head" || ends_with(".attn.wq") || ends_with(".attn.wk") || ends_with(".attn.wv") ||
         ends_with(".attn.wo") || ends_with(".mlp.w1") || ends_with(".mlp.w2");
}

inline void validate_weights(const Weights& w) {
  w.config.validate();
  const auto shapes = expected_shapes(w.config);
  require(shapes.size() == w.tensors.size(), "weights tensor count does not match config");
  for (const auto& [name, shape] : shapes) {
    auto it = w.tensors.find(name);
    require(it != w.tensors.end(), "weights missing tensor '" + name + "'");
    require(it->second.shape == shape, "tensor '" + name + "' has shape " + shape_string(it->second.shape) +
                                           ", expected " + shape_string(shape));
    if (!all_finite(it->second)) fail(ErrorKind::numeric, "tensor '" + name + "' contains NaN/Inf");
  }
}

/// Deterministic initialization from config.seed.
inline Weights init_weights(const ModelConfig& config) {
  config.validate();
  Weights w{config, {}};
  Rng rng(derive_seed({config.seed, 0x1417}));
  for (const auto& [name, shape] : expected_shapes(config)) {
    Tensor t(shape);
    if (name.ends_with(".gain")) {
      t.fill(1.0);
    } else if (name.ends_with(".bias")) {
      // zero
    } else {
      double stddev = 0.02;
      if (name == "tok_emb" || name == "pos_emb") stddev = 0.1;
      else if (is_linear_tensor(name)) stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      if (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) stddev /= std::sqrt(2.0 * config.layers);
      for (double& v : t.data) v = stddev * rng.normal();
    }
    w.tensors.emplace(name, std::move(t));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Low-rank adapter types. Operations live in lora.hpp; the forward pass only
// needs to read them.

struct LoraConfig {
  std::size_t rank = 8;
  double scaling = 2.0;
  std::vector<std::string> targets{"layers.*.attn.wq", "layers.*.attn.wv"};
  std::uint64_t seed = 7;

  bool operator==(const LoraConfig&) const = default;
};

/// For a target W [in, out]: a [in, r], b [out, r]; delta = scaling * a * b^T.
struct LoraPair {
  Tensor a;
  Tensor b;

  bool operator==(const LoraPair&) const = default;
};

struct LoraAdapter {
  LoraConfig config;
  ModelConfig base_config;
  std::map<std::string, LoraPair> pairs;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : pairs) n += p.a.size() + p.b.size();
    return n;
  }

  std::uint64_t hash() const {
    std::uint64_t h = derive_seed({config.rank, static_cast<std::uint64_t>(config.scaling * 1e6)});
    for (const auto& [name, p] : pairs) {
      h = fnv1a64(name, h);
      TensorMap m{{"a", p.a}, {"b", p.b}};
      h = hash_tensors(m, h);
    }
    return h;
  }

  bool operator==(const LoraAdapter&) const = default;
};

/// Base weights plus an optional adapter, evaluated as theta + scaling * A B^T
/// without materializing the sum.
struct ModelView {
  const Weights* base = nullptr;
  const LoraAdapter* adapter = nullptr;

  ModelView(const Weights& w) : base(&w) {}  // NOLINT(google-explicit-constructor)
  ModelView(const Weights& w, const LoraAdapter* a) : base(&w), adapter(a) {
    if (a) require(a->base_config == w.config, "adapter was built for a different model config");
  }

  const ModelConfig& config() const { return base->config; }
};

using AdapterGrads = std::map<std::string, LoraPair>;

/// Where backward deposits gradients. Null members are not trained.
struct GradientSink {
  TensorMap* base = nullptr;
  AdapterGrads* adapter = nullptr;
};

namespace detail {

constexpr double layer_norm_eps = 1e-5;
constexpr double gelu_c = 0.7978845608028654;  // sqrt(2/pi)

struct LinearTrace {
  std::vector<double> xa;  // x * A, [n, r], only when adapted
};

struct NormTrace {
  std::vector<double> hat;
  std::vector<double> rstd;
};

struct LayerTrace {
  std::vector<double> x_in, h1, q, k, v, att, ctx, x_mid, h2, u, g;
  NormTrace ln1, ln2;
  LinearTrace lq, lk, lv, lo, l1, l2;
};

struct ForwardTrace {
  std::size_t n = 0;
  std::vector<LayerTrace> layers;
  std::vector<double> x_final, hf;
  NormTrace lnf;
  LinearTrace lhead;
};

inline void layer_norm(const double* x, std::size_t n, std::size_t d, const Tensor& gain, const Tensor& bias,
                       double* y, NormTrace& tr) {
  tr.hat.assign(n * d, 0.0);
  tr.rstd.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + layer_norm_eps);
    tr.rstd[i] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xi[j] - mean) * rstd;
      tr.hat[i * d + j] = h;
      y[i * d + j] = h * gain.data[j] + bias.data[j];
    }
  }
}

inline void layer_norm_backward(const double* dy, std::size_t n, std::size_t d, const Tensor& gain,
                                const NormTrace& tr, double* dx, Tensor* dgain, Tensor* dbias) {
  std::vector<double> dhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* dyi = dy + i * d;
    const double* hi = tr.hat.data() + i * d;
    double mean_dhat = 0.0, mean_dhat_h = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dhat[j] = dyi[j] * gain.data[j];
      mean_dhat += dhat[j];
      mean_dhat_h += dhat[j] * hi[j];
      if (dgain) dgain->data[j] += dyi[j] * hi[j];
      if (dbias) dbias->data[j] += dyi[j];
    }
    mean_dhat /= static_cast<double>(d);
    mean_dhat_h /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += tr.rstd[i] * (dhat[j] - mean_dhat - hi[j] * mean_dhat_h);
  }
}

inline const LoraPair* find_pair(const ModelView& view, const std::string& name) {
  if (!view.adapter) return nullptr;
  auto it = view.adapter->pairs.find(name);
  return it == view.adapter->pairs.end() ? nullptr : &it->second;
}

// y[n, out] = x[n, in] * (W + s A B^T)
inline void linear(const ModelView& view, const std::string& name, const double* x, std::size_t n, double* y,
                   LinearTrace& tr) {
  const Tensor& w = view.base->get(name);
  const std::size_t in = w.rows(), out = w.cols();
  linalg::matmul(x, n, in, w.data.data(), out, y);
  if (const LoraPair* p = find_pair(view, name)) {
    const std::size_t r = p->a.cols();
    tr.xa.assign(n * r, 0.0);
    linalg::matmul(x, n, in, p->a.data.data(), r, tr.xa.data());
    std::vector<double> scaled(tr.xa);
    for (double& v : scaled) v *= view.adapter->config.scaling;
    linalg::matmul_bt_acc(scaled.data(), n, r, p->b.data.data(), out, y);
  }
}

inline void linear_backward(const ModelView& view, const std::string& name, const double* x, std::size_t n,
                            const double* dy, const LinearTrace& tr, double* dx, const GradientSink& sink) {
  const Tensor& w = view.base->get(name);
  const std::size_t in = w.rows(), out = w.cols();
  if (dx) linalg::matmul_bt_acc(dy, n, out, w.data.data(), in, dx);
  if (sink.base) linalg::matmul_at_acc(x, n, in, dy, out, sink.base->at(name).data.data());
  if (const LoraPair* p = find_pair(view, name)) {
    const double s = view.adapter->config.scaling;
    const std::size_t r = p->a.cols();
    std::vector<double> dyb(n * r);
    linalg::matmul(dy, n, out, p->b.data.data(), r, dyb.data());
    for (double& v : dyb) v *= s;
    if (dx) linalg::matmul_bt_acc(dyb.data(), n, r, p->a.data.data(), in, dx);
    if (sink.adapter) {
      LoraPair& g = sink.adapter->at(name);
      linalg::matmul_at_acc(x, n, in, dyb.data(), r, g.a.data.data());
      std::vector<double> xas(tr.xa);
      for (double& v : xas) v *= s;
      linalg::matmul_at_acc(dy, n, out, xas.data(), r, g.b.data.data());
    }
  }
}

inline void check_ids(const ModelConfig& c, std::span<const TokenId> ids) {
  if (ids.empty()) fail(ErrorKind::invalid_argument, "empty token sequence");
  if (ids.size() > c.context)
    fail(ErrorKind::out_of_range, "sequence of length " + std::to_string(ids.size()) + " exceeds context length " +
                                      std::to_string(c.context));
  for (TokenId id : ids)
    if (id >= c.vocab_size)
      fail(ErrorKind::out_of_range, "token id " + std::to_string(id) + " >= vocab size " + std::to_string(c.vocab_size));
}

/// Runs the network; returns logits [n, V] (or [1, V] for the last position
/// when `last_only`).
inline std::vector<double> forward(const ModelView& view, std::span<const TokenId> ids, ForwardTrace& tr,
                                   bool last_only = false) {
  const ModelConfig& c = view.config();
  check_ids(c, ids);
  const std::size_t n = ids.size(), d = c.dim, f = c.ffn_dim(), hd = c.head_dim();
  const Weights& w = *view.base;
  tr.n = n;
  tr.layers.resize(c.layers);

  std::vector<double> x(n * d);
  const Tensor& tok = w.get("tok_emb");
  const Tensor& pos = w.get("pos_emb");
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) x[t * d + j] = tok.at(ids[t], j) + pos.at(t, j);

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t l = 0; l < c.layers; ++l) {
    LayerTrace& L = tr.layers[l];
    L.x_in = x;
    L.h1.assign(n * d, 0.0);
    layer_norm(x.data(), n, d, w.get(layer_tensor(l, "ln1.gain")), w.get(layer_tensor(l, "ln1.bias")), L.h1.data(),
               L.ln1);
    L.q.assign(n * d, 0.0);
    L.k.assign(n * d, 0.0);
    L.v.assign(n * d, 0.0);
    linear(view, layer_tensor(l, "attn.wq"), L.h1.data(), n, L.q.data(), L.lq);
    linear(view, layer_tensor(l, "attn.wk"), L.h1.data(), n, L.k.data(), L.lk);
    linear(view, layer_tensor(l, "attn.wv"), L.h1.data(), n, L.v.data(), L.lv);

    L.att.assign(c.heads * n * n, 0.0);
    L.ctx.assign(n * d, 0.0);
    for (std::size_t h = 0; h < c.heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        double* row = L.att.data() + (h * n + t) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t j = 0; j < hd; ++j) dot += L.q[t * d + off + j] * L.k[s * d + off + j];
          row[s] = dot * scale;
          mx = std::max(mx, row[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          row[s] = std::exp(row[s] - mx);
          z += row[s];
        }
        for (std::size_t s = 0; s <= t; ++s) {
          row[s] /= z;
          for (std::size_t j = 0; j < hd; ++j) L.ctx[t * d + off + j] += row[s] * L.v[s * d + off + j];
        }
      }
    }
    std::vector<double> a(n * d);
    linear(view, layer_tensor(l, "attn.wo"), L.ctx.data(), n, a.data(), L.lo);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += a[i];
    L.x_mid = x;

    L.h2.assign(n * d, 0.0);
    layer_norm(x.data(), n, d, w.get(layer_tensor(l, "ln2.gain")), w.get(layer_tensor(l, "ln2.bias")), L.h2.data(),
               L.ln2);
    L.u.assign(n * f, 0.0);
    linear(view, layer_tensor(l, "mlp.w1"), L.h2.data(), n, L.u.data(), L.l1);
    L.g.resize(n * f);
    for (std::size_t i = 0; i < n * f; ++i) {
      const double u = L.u[i];
      L.g[i] = 0.5 * u * (1.0 + std::tanh(gelu_c * (u + 0.044715 * u * u * u)));
    }
    std::vector<double> m(n * d);
    linear(view, layer_tensor(l, "mlp.w2"), L.g.data(), n, m.data(), L.l2);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += m[i];
  }

  tr.x_final = x;
  tr.hf.assign(n * d, 0.0);
  layer_norm(x.data(), n, d, w.get("ln_f.gain"), w.get("ln_f.bias"), tr.hf.data(), tr.lnf);
  const std::size_t rows = last_only ? 1 : n;
  const double* src = tr.hf.data() + (last_only ? (n - 1) * d : 0);
  std::vector<double> logits(rows * c.vocab_size);
  linear(view, "head", src, rows, logits.data(), tr.lhead);
  return logits;
}

/// Accumulates gradients of sum_ij dlogits_ij * logits_ij into `sink`.
inline void backward(const ModelView& view, std::span<const TokenId> ids, const ForwardTrace& tr,
                     const std::vector<double>& dlogits, const GradientSink& sink) {
  const ModelConfig& c = view.config();
  const Weights& w = *view.base;
  const std::size_t n = tr.n, d = c.dim, f = c.ffn_dim(), hd = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  auto base_grad = [&](const std::string& name) -> Tensor* { return sink.base ? &sink.base->at(name) : nullptr; };

  std::vector<double> dhf(n * d, 0.0);
  linear_backward(view, "head", tr.hf.data(), n, dlogits.data(), tr.lhead, dhf.data(), sink);
  std::vector<double> dx(n * d, 0.0);
  layer_norm_backward(dhf.data(), n, d, w.get("ln_f.gain"), tr.lnf, dx.data(), base_grad("ln_f.gain"),
                      base_grad("ln_f.bias"));

  for (std::size_t li = c.layers; li-- > 0;) {
    const LayerTrace& L = tr.layers[li];
    // MLP block: x_out = x_mid + W2(gelu(W1 LN2(x_mid)))
    std::vector<double> dg(n * f, 0.0);
    linear_backward(view, layer_tensor(li, "mlp.w2"), L.g.data(), n, dx.data(), L.l2, dg.data(), sink);
    std::vector<double> du(n * f);
    for (std::size_t i = 0; i < n * f; ++i) {
      const double u = L.u[i];
      const double inner = gelu_c * (u + 0.044715 * u * u * u);
      const double th = std::tanh(inner);
      const double deriv = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * gelu_c * (1.0 + 3.0 * 0.044715 * u * u);
      du[i] = dg[i] * deriv;
    }
    std::vector<double> dh2(n * d, 0.0);
    linear_backward(view, layer_tensor(li, "mlp.w1"), L.h2.data(), n, du.data(), L.l1, dh2.data(), sink);
    std::vector<double> dx_mid(dx);
    layer_norm_backward(dh2.data(), n, d, w.get(layer_tensor(li, "ln2.gain")), L.ln2, dx_mid.data(),
                        base_grad(layer_tensor(li, "ln2.gain")), base_grad(layer_tensor(li, "ln2.bias")));

    // Attention block: x_mid = x_in + Wo(attn(LN1(x_in)))
    std::vector<double> dctx(n * d, 0.0);
    linear_backward(view, layer_tensor(li, "attn.wo"), L.ctx.data(), n, dx_mid.data(), L.lo, dctx.data(), sink);
    std::vector<double> dq(n * d, 0.0), dk(n * d, 0.0), dv(n * d, 0.0), datt(n);
    for (std::size_t h = 0; h < c.heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        const double* row = L.att.data() + (h * n + t) * n;
        double dot_sum = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          double g = 0.0;
          for (std::size_t j = 0; j < hd; ++j) {
            g += dctx[t * d + off + j] * L.v[s * d + off + j];
            dv[s * d + off + j] += row[s] * dctx[t * d + off + j];
          }
          datt[s] = g;
          dot_sum += row[s] * g;
        }
        for (std::size_t s = 0; s <= t; ++s) {
          const double ds = row[s] * (datt[s] - dot_sum) * scale;
          if (ds == 0.0) continue;
          for (std::size_t j = 0; j < hd; ++j) {
            dq[t * d + off + j] += ds * L.k[s * d + off + j];
            dk[s * d + off + j] += ds * L.q[t * d + off + j];
          }
        }
      }
    }
    std::vector<double> dh1(n * d, 0.0);
    linear_backward(view, layer_tensor(li, "attn.wq"), L.h1.data(), n, dq.data(), L.lq, dh1.data(), sink);
    linear_backward(view, layer_tensor(li, "attn.wk"), L.h1.data(), n, dk.data(), L.lk, dh1.data(), sink);
    linear_backward(view, layer_tensor(li, "attn.wv"), L.h1.data(), n, dv.data(), L.lv, dh1.data(), sink);
    dx = dx_mid;
    layer_norm_backward(dh1.data(), n, d, w.get(layer_tensor(li, "ln1.gain")), L.ln1, dx.data(),
                        base_grad(layer_tensor(li, "ln1.gain")), base_grad(layer_tensor(li, "ln1.bias")));
  }

  if (sink.base) {
    Tensor& dtok = sink.base->at("tok_emb");
    Tensor& dpos = sink.base->at("pos_emb");
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < d; ++j) {
        dtok.at(ids[t], j) += dx[t * d + j];
        dpos.at(t, j) += dx[t * d + j];
      }
  }
}

/// log-softmax of one row, written in place into `out`.
inline void log_softmax(const double* logits, std::size_t v, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(logits[j] - mx);
  const double lse = mx + std::log(z);
  for (std::size_t j = 0; j < v; ++j) out[j] = logits[j] - lse;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public evaluation API.

/// One logit row per input position.
inline std::vector<std::vector<double>> forward_logits(const ModelView& view, std::span<const TokenId> ids) {
  detail::ForwardTrace tr;
  const auto flat = detail::forward(view, ids, tr);
  const std::size_t v = view.config().vocab_size;
  std::vector<std::vector<double>> rows(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) rows[t].assign(flat.begin() + t * v, flat.begin() + (t + 1) * v);
  return rows;
}

/// Softmax probabilities of the next token after `ids`.
inline std::vector<double> next_token_probs(const ModelView& view, std::span<const TokenId> ids) {
  detail::ForwardTrace tr;
  const auto logits = detail::forward(view, ids, tr, true);
  std::vector<double> lp(logits.size());
  detail::log_softmax(logits.data(), logits.size(), lp.data());
  for (double& v : lp) v = std::exp(v);
  return lp;
}

struct SequenceScore {
  double probability = 1.0;  // joint P(value | key), floored at the smallest positive double
  double nll = 0.0;          // -log P(value | key)
  std::vector<double> token_logprobs;

  /// Per-token geometric mean probability; 1 for an empty value.
  double geometric_mean() const {
    return token_logprobs.empty() ? 1.0 : std::exp(-nll / static_cast<double>(token_logprobs.size()));
  }
  double log10_probability() const { return -nll / std::numbers::ln10; }
};

/// Joint probability of `value` following `key`, accumulated in log space.
inline SequenceScore sequence_prob(const ModelView& view, std::span<const TokenId> key, std::span<const TokenId> value) {
  if (key.empty()) fail(ErrorKind::invalid_argument, "sequence_prob: empty key");
  SequenceScore score;
  if (value.empty()) return score;
  TokenSequence ids(key.begin(), key.end());
  ids.insert(ids.end(), value.begin(), value.end() - 1);
  detail::ForwardTrace tr;
  const auto logits = detail::forward(view, ids, tr);
  const std::size_t v = view.config().vocab_size;
  std::vector<double> lp(v);
  for (std::size_t t = 0; t < value.size(); ++t) {
    const std::size_t pos = key.size() - 1 + t;
    detail::log_softmax(logits.data() + pos * v, v, lp.data());
    score.token_logprobs.push_back(lp[value[t]]);
    score.nll -= lp[value[t]];
  }
  score.probability = std::max(std::exp(-score.nll), std::numeric_limits<double>::denorm_min());
  return score;
}

struct TokenProbTrace {
  TokenSequence prompt;
  TokenSequence continuation;
  std::vector<double> probs;           // model probability of each sampled token at temperature 1
  std::vector<double> sampling_probs;  // probability under the sampling temperature, when it differs from 1
  double nll = 0.0;

  static double nll_of(std::span<const double> probs) {
    double s = 0.0;
    for (double p : probs) s -= std::log(p);
    return s;
  }
};

struct SampleOptions {
  std::size_t max_tokens = 16;
  double temperature = 1.0;
  bool greedy = false;
  std::uint64_t seed = 0;
};

/// Autoregressive continuation of `prompt`; stops after emitting EOS (which is
/// kept as the last continuation token), after `max_tokens`, or when the
/// context is full.
inline TokenProbTrace sample_with_probs(const ModelView& view, std::span<const TokenId> prompt,
                                        const SampleOptions& opt) {
  require(opt.max_tokens >= 1, "max tokens must be >= 1");
  require(opt.greedy || opt.temperature > 0.0, "temperature must be > 0");
  if (prompt.empty()) fail(ErrorKind::invalid_argument, "sample_with_probs: empty prompt");
  const ModelConfig& c = view.config();
  TokenProbTrace trace;
  trace.prompt.assign(prompt.begin(), prompt.end());
  TokenSequence ids(prompt.begin(), prompt.end());
  Rng rng(opt.seed);
  const bool record_sampling = !opt.greedy && opt.temperature != 1.0;
  std::vector<double> lp(c.vocab_size), sp(c.vocab_size);
  while (trace.continuation.size() < opt.max_tokens && ids.size() <= c.context) {
    detail::ForwardTrace tr;
    const auto logits = detail::forward(view, ids, tr, true);
    detail::log_softmax(logits.data(), c.vocab_size, lp.data());
    TokenId chosen = 0;
    if (opt.greedy) {
      chosen = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    } else {
      std::vector<double> scaled(logits);
      for (double& x : scaled) x /= opt.temperature;
      detail::log_softmax(scaled.data(), c.vocab_size, sp.data());
      const double u = rng.uniform();
      double acc = 0.0;
      chosen = static_cast<TokenId>(c.vocab_size - 1);
      for (std::size_t j = 0; j < c.vocab_size; ++j) {
        acc += std::exp(sp[j]);
        if (u < acc) {
          chosen = static_cast<TokenId>(j);
          break;
        }
      }
      if (record_sampling) trace.sampling_probs.push_back(std::exp(sp[chosen]));
    }
    trace.continuation.push_back(chosen);
    trace.probs.push_back(std::exp(lp[chosen]));
    trace.nll -= lp[chosen];
    ids.push_back(chosen);
    if (chosen == Vocab::eos) break;
  }
  return trace;
}

inline TokenProbTrace greedy_continuation(const ModelView& view, std::span<const TokenId> prompt,
                                          std::size_t max_tokens) {
  return sample_with_probs(view, prompt, SampleOptions{max_tokens, 1.0, true, 0});
}

// ---------------------------------------------------------------------------
// Training objective.

/// A (prompt, target) pair; the loss scores target tokens only.
struct Example {
  TokenSequence prompt;
  TokenSequence target;

  bool operator==(const Example&) const = default;
};

struct LossAndGrads {
  double loss = 0.0;
  std::vector<double> example_nll;
  TensorMap base_grads;       // filled when the base is trainable
  AdapterGrads adapter_grads; // filled when an adapter is trainable
};

enum class Trainable { base, adapter };

inline AdapterGrads zero_adapter_grads(const LoraAdapter& a) {
  AdapterGrads g;
  for (const auto& [name, p] : a.pairs) g.emplace(name, LoraPair{Tensor(p.a.shape), Tensor(p.b.shape)});
  return g;
}

/// loss = sum_i coef_i * NLL_i(target | prompt), with gradients for the chosen
/// trainable set. Aborts on any non-finite gradient, naming the tensor.
inline LossAndGrads weighted_nll_and_grads(const ModelView& view, std::span<const Example> batch,
                                           std::span<const double> coefs, Trainable trainable) {
  require(!batch.empty(), "loss batch must be nonempty");
  require(coefs.size() == batch.size(), "one coefficient per example required");
  require(trainable == Trainable::base || view.adapter != nullptr, "adapter training requires an adapter");
  const ModelConfig& c = view.config();
  const std::size_t v = c.vocab_size;
  LossAndGrads out;
  GradientSink sink;
  if (trainable == Trainable::base) {
    out.base_grads = zeros_like(view.base->tensors);
    sink.base = &out.base_grads;
  } else {
    out.adapter_grads = zero_adapter_grads(*view.adapter);
    sink.adapter = &out.adapter_grads;
  }
  std::vector<double> lp(v);
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Example& ex = batch[e];
    if (ex.prompt.empty()) fail(ErrorKind::invalid_argument, "example with empty prompt");
    if (ex.target.empty()) {
      out.example_nll.push_back(0.0);
      continue;
    }
    TokenSequence ids(ex.prompt);
    ids.insert(ids.end(), ex.target.begin(), ex.target.end() - 1);
    detail::ForwardTrace tr;
    const auto logits = detail::forward(view, ids, tr);
    std::vector<double> dlogits(logits.size(), 0.0);
    double nll = 0.0;
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      const std::size_t pos = ex.prompt.size() - 1 + t;
      detail::log_softmax(logits.data() + pos * v, v, lp.data());
      nll -= lp[ex.target[t]];
      double* dl = dlogits.data() + pos * v;
      for (std::size_t j = 0; j < v; ++j) dl[j] = coefs[e] * std::exp(lp[j]);
      dl[ex.target[t]] -= coefs[e];
    }
    out.example_nll.push_back(nll);
    out.loss += coefs[e] * nll;
    if (coefs[e] != 0.0) detail::backward(view, ids, tr, dlogits, sink);
  }
  if (!std::isfinite(out.loss)) fail(ErrorKind::numeric, "non-finite loss");
  for (const auto& [name, g] : out.base_grads)
    if (!all_finite(g)) fail(ErrorKind::numeric, "non-finite gradient in tensor '" + name + "'");
  for (const auto& [name, g] : out.adapter_grads)
    if (!all_finite(g.a) || !all_finite(g.b))
      fail(ErrorKind::numeric, "non-finite gradient in adapter tensor '" + name + "'");
  return out;
}

/// loss = mean_i sign_i * NLL_i. Gradients cover the adapter when one is given,
/// otherwise every base tensor.
inline LossAndGrads loss_and_grads(const Weights& weights, const LoraAdapter* adapter, std::span<const Example> batch,
                                   std::span<const double> signs) {
  require(!batch.empty(), "loss batch must be nonempty");
  require(signs.size() == batch.size(), "sign map must cover the batch");
  std::vector<double> coefs(signs.begin(), signs.end());
  for (double& s : coefs) {
    require(s == 1.0 || s == -1.0, "sign map entries must be +1 or -1");
    s /= static_cast<double>(batch.size());
  }
  return weighted_nll_and_grads(ModelView(weights, adapter), batch, coefs,
                                adapter ? Trainable::adapter : Trainable::base);
}

// ---------------------------------------------------------------------------
// Perplexity.

struct PerplexityResult {
  double perplexity = 1.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
};

/// exp(mean NLL) over every token after the first of each document.
inline PerplexityResult perplexity(const ModelView& view, std::span<const TokenSequence> documents) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : documents) {
    if (doc.size() < 2) continue;
    const std::size_t limit = std::min(doc.size(), view.config().context + 1);
    std::span<const TokenId> s(doc.data(), limit);
    const auto score = sequence_prob(view, s.first(1), s.subspan(1));
    total += score.nll;
    count += limit - 1;
  }
  if (count == 0) fail(ErrorKind::invalid_argument, "perplexity: empty corpus");
  PerplexityResult r;
  r.tokens = count;
  r.mean_nll = total / static_cast<double>(count);
  r.perplexity = std::exp(r.mean_nll);
  return r;
}

/// Document encoding used for LM training and corpus perplexity: BOS text EOS.
inline TokenSequence encode_document(const Vocab& vocab, std::string_view line) {
  TokenSequence ids{Vocab::bos};
  const auto body = vocab.encode(line);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(Vocab::eos);
  return ids;
}

inline PerplexityResult perplexity(const ModelView& view, const Vocab& vocab, const std::vector<std::string>& lines) {
  std::vector<TokenSequence> docs;
  for (const auto& l : lines) docs.push_back(encode_document(vocab, l));
  return perplexity(view, docs);
}

}  // namespace forgetmark
