// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adastate/ops.hpp"
#include "adastate/rng.hpp"
#include "adastate/tensor.hpp"

namespace adastate {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t channels = 4;
  std::size_t height = 4;
  std::size_t width = 4;
  std::size_t time_dim = 16;
  std::size_t ffn_mult = 2;
  double rope_base = 10000.0;
  // Adds an embedding of each live frame's absolute index (used by the critic,
  // which must know where in the sequence a frame sits).
  bool frame_index_embedding = false;

  std::size_t tokens_per_frame() const { return height * width; }
  std::size_t model_dim() const { return heads * head_dim; }
  std::size_t frame_dim() const { return tokens_per_frame() * channels; }
  std::size_t ffn_dim() const { return ffn_mult * model_dim(); }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw std::invalid_argument(std::string("model.") + name + " must be positive");
    };
    positive(layers, "layers");
    positive(heads, "heads");
    positive(head_dim, "head_dim");
    positive(channels, "channels");
    positive(height, "height");
    positive(width, "width");
    positive(time_dim, "time_dim");
    positive(ffn_mult, "ffn_mult");
    if (head_dim % 2 != 0) throw std::invalid_argument("model.head_dim must be even for rotary phases");
    if (time_dim % 2 != 0) throw std::invalid_argument("model.time_dim must be even");
    if (model_dim() % 4 != 0) throw std::invalid_argument("model width must be a multiple of 4");
    if (!(rope_base > 1.0)) throw std::invalid_argument("model.rope_base must exceed 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Rotation angles for one frame-level relative index.
struct RopePhase {
  int relative_index = 0;
  std::vector<double> angles;  // one per channel pair

  /// Rotates every head of a [rows, heads*head_dim] key block in place.
  void apply(std::span<double> x, std::size_t head_dim) const {
    const std::size_t half = angles.size();
    if (half * 2 != head_dim) throw ShapeError("RopePhase: head_dim mismatch");
    if (relative_index == 0) return;
    for (std::size_t base = 0; base + head_dim <= x.size(); base += head_dim) {
      for (std::size_t j = 0; j < half; ++j) {
        const double c = std::cos(angles[j]), s = std::sin(angles[j]);
        const double x0 = x[base + 2 * j], x1 = x[base + 2 * j + 1];
        x[base + 2 * j] = c * x0 - s * x1;
        x[base + 2 * j + 1] = s * x0 + c * x1;
      }
    }
  }
};

inline RopePhase rope_phase(int relative_index, std::size_t head_dim, double base = 10000.0) {
  if (relative_index < 0) throw std::invalid_argument("rope_phase: negative relative index");
  RopePhase p{relative_index, rope_frequencies(head_dim, base)};
  for (double& a : p.angles) a *= relative_index;
  return p;
}

struct LayerParams {
  Tensor norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
};

struct ModelParams {
  ModelConfig config;
  Tensor in_w, in_b, time_w, time_b, frame_w, out_norm, out_w, out_b;
  std::vector<LayerParams> layers;

  /// Every trainable tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> named() {
    std::vector<std::pair<std::string, Tensor*>> out{
        {"in.w", &in_w}, {"in.b", &in_b}, {"time.w", &time_w}, {"time.b", &time_b}};
    if (config.frame_index_embedding) out.emplace_back("frame.w", &frame_w);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& p = layers[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      for (auto [name, t] : std::initializer_list<std::pair<const char*, Tensor*>>{
               {"norm1", &p.norm1}, {"wq", &p.wq}, {"wk", &p.wk}, {"wv", &p.wv}, {"wo", &p.wo},
               {"norm2", &p.norm2}, {"w1", &p.w1}, {"b1", &p.b1}, {"w2", &p.w2}, {"b2", &p.b2}}) {
        out.emplace_back(pre + name, t);
      }
    }
    out.emplace_back("out.norm", &out_norm);
    out.emplace_back("out.w", &out_w);
    out.emplace_back("out.b", &out_b);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor*>> named() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [n, t] : const_cast<ModelParams*>(this)->named()) out.emplace_back(n, t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t->numel();
    return n;
  }

  /// Deep copy: the result shares no storage with this.
  ModelParams clone() const {
    ModelParams p = *this;
    for (auto& [name, t] : p.named()) *t = t->clone();
    return p;
  }

  void zero_grad() {
    for (auto& [name, t] : named()) t->zero_grad();
  }

  bool all_finite() const {
    for (auto& [name, t] : named())
      for (double v : t->values())
        if (!std::isfinite(v)) return false;
    return true;
  }

  /// Random init: weights ~ N(0, 1/fan_in), biases zero, norm gains one.
  static ModelParams init(const ModelConfig& config, SeededRng rng) {
    config.validate();
    const std::size_t d = config.model_dim(), c = config.channels, f = config.ffn_dim();
    auto w = [&rng](std::size_t in, std::size_t out) {
      Tensor t = rng.normal_tensor({in, out});
      const double s = 1.0 / std::sqrt(static_cast<double>(in));
      for (double& v : t.mutable_data()) v *= s;
      return t.set_requires_grad(true);
    };
    auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };
    auto ones = [](std::size_t n) { return Tensor::full({n}, 1.0).set_requires_grad(true); };
    ModelParams p;
    p.config = config;
    p.in_w = w(c, d);
    p.in_b = zeros(d);
    p.time_w = w(config.time_dim, d);
    p.time_b = zeros(d);
    p.frame_w = config.frame_index_embedding ? w(config.time_dim, d) : Tensor();
    for (std::size_t l = 0; l < config.layers; ++l) {
      p.layers.push_back({ones(d), w(d, d), w(d, d), w(d, d), w(d, d), ones(d), w(d, f), zeros(f),
                          w(f, d), zeros(d)});
    }
    p.out_norm = ones(d);
    p.out_w = w(d, c);
    p.out_b = zeros(c);
    return p;
  }

  /// Every tensor zero (including norm gains).
  static ModelParams zeros(const ModelConfig& config) {
    ModelParams p = init(config, SeededRng(0));
    for (auto& [name, t] : p.named()) std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0);
    return p;
  }
};

/// Per-layer keys and values of one frame's tokens, stored without rotary phase.
struct LayerKV {
  std::vector<Tensor> keys;    // per layer, [tokens_per_frame, model_dim]
  std::vector<Tensor> values;  // per layer, [tokens_per_frame, model_dim]
};

/// A cached frame as seen by one forward pass.
struct ContextFrame {
  const LayerKV* kv = nullptr;
  int relative_index = 0;
};

/// A frame being denoised in this forward pass.
struct LiveFrame {
  double t = 1.0;
  int relative_index = 0;
  long absolute_index = -1;  // only read when frame_index_embedding is on
};

struct ForwardSpec {
  std::vector<ContextFrame> context;
  std::vector<LiveFrame> live;
  // Frame-level visibility [live frames x (context + live) frames], 1 = visible.
  // Empty means every live token sees the whole window.
  std::vector<std::uint8_t> frame_mask;
  std::function<void(std::size_t layer, const AttentionWeights&)> on_attention;
  bool collect_kv = false;
  // When set, receives the embedded input tokens (before the first layer).
  Tensor* embedded_out = nullptr;
};

struct ForwardOutput {
  Tensor x0;         // [live frames * tokens_per_frame, channels]
  LayerKV live_kv;   // per layer, all live tokens stacked; only with collect_kv
};

namespace model_detail {

inline std::vector<double> sinusoid(double x, std::size_t dim, double scale) {
  const std::size_t half = dim / 2;
  std::vector<double> f(dim);
  for (std::size_t j = 0; j < half; ++j) {
    const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
    f[j] = std::sin(scale * x * freq);
    f[half + j] = std::cos(scale * x * freq);
  }
  return f;
}

/// Fixed 2-D sinusoidal spatial embedding [tokens_per_frame, model_dim]:
/// first half of the channels encodes the row, second half the column.
inline const std::vector<double>& spatial_embedding(const ModelConfig& c) {
  thread_local ModelConfig cached_for{};
  thread_local std::vector<double> table;
  if (table.empty() || !(cached_for == c)) {
    const std::size_t d = c.model_dim(), half = d / 2;
    table.assign(c.tokens_per_frame() * d, 0.0);
    for (std::size_t r = 0; r < c.height; ++r) {
      for (std::size_t col = 0; col < c.width; ++col) {
        auto er = sinusoid(static_cast<double>(r), half, 1.0);
        auto ec = sinusoid(static_cast<double>(col), half, 1.0);
        double* row = table.data() + (r * c.width + col) * d;
        std::copy(er.begin(), er.end(), row);
        std::copy(ec.begin(), ec.end(), row + half);
      }
    }
    cached_for = c;
  }
  return table;
}

inline std::vector<int> token_positions(const std::vector<int>& frame_index, std::size_t per_frame) {
  std::vector<int> pos;
  pos.reserve(frame_index.size() * per_frame);
  for (int f : frame_index) pos.insert(pos.end(), per_frame, f);
  return pos;
}

}  // namespace model_detail

/// One transformer pass over the live frames of a window. Cached frames
/// contribute keys and values only; live frames are embedded from `noisy`
/// ([live * tokens_per_frame, channels]) and predict clean latents.
inline ForwardOutput model_forward(const ModelParams& p, const Tensor& noisy, const ForwardSpec& spec) {
  const ModelConfig& cfg = p.config;
  const std::size_t per = cfg.tokens_per_frame(), d = cfg.model_dim();
  const std::size_t n_live = spec.live.size(), n_ctx = spec.context.size();
  if (n_live == 0) throw ShapeError("model_forward: no live frames");
  if (noisy.rank() != 2 || noisy.dim(0) != n_live * per || noisy.dim(1) != cfg.channels) {
    throw ShapeError("model_forward: live latents " + shape_str(noisy.shape()) + ", expected [" +
                     std::to_string(n_live * per) + "x" + std::to_string(cfg.channels) + "]");
  }
  for (const auto& lf : spec.live) {
    if (!(lf.t >= 0.0 && lf.t <= 1.0)) {
      throw std::invalid_argument("model_forward: noise level " + std::to_string(lf.t) +
                                  " outside [0,1]");
    }
  }
  const std::size_t n_total = n_ctx + n_live;
  if (!spec.frame_mask.empty() && spec.frame_mask.size() != n_live * n_total) {
    throw ShapeError("model_forward: frame mask has " + std::to_string(spec.frame_mask.size()) +
                     " entries, expected " + std::to_string(n_live * n_total));
  }

  // Embedding: latent projection + spatial table + noise-level (+ frame-index) embedding.
  const auto& spatial = model_detail::spatial_embedding(cfg);
  std::vector<double> cond_t(n_live * per * cfg.time_dim);
  std::vector<double> cond_f(cfg.frame_index_embedding ? cond_t.size() : 0);
  std::vector<double> pos_table(n_live * per * d);
  for (std::size_t f = 0; f < n_live; ++f) {
    const auto et = model_detail::sinusoid(spec.live[f].t, cfg.time_dim, 1000.0);
    const auto ef = cfg.frame_index_embedding
                        ? model_detail::sinusoid(static_cast<double>(spec.live[f].absolute_index),
                                                 cfg.time_dim, 1.0)
                        : std::vector<double>{};
    for (std::size_t tok = 0; tok < per; ++tok) {
      std::copy(et.begin(), et.end(), cond_t.begin() + ((f * per + tok) * cfg.time_dim));
      if (!ef.empty()) std::copy(ef.begin(), ef.end(), cond_f.begin() + ((f * per + tok) * cfg.time_dim));
    }
    std::copy(spatial.begin(), spatial.end(), pos_table.begin() + f * per * d);
  }
  const std::size_t t_live = n_live * per;
  Tensor h = linear(noisy, p.in_w, p.in_b);
  h = add(h, Tensor({t_live, d}, std::move(pos_table)));
  h = add(h, linear(Tensor({t_live, cfg.time_dim}, std::move(cond_t)), p.time_w, p.time_b));
  if (cfg.frame_index_embedding) h = add(h, matmul(Tensor({t_live, cfg.time_dim}, std::move(cond_f)), p.frame_w));
  if (spec.embedded_out) {
    h.retain_grad();
    *spec.embedded_out = h;
  }

  std::vector<int> live_rel, ctx_rel;
  for (const auto& lf : spec.live) live_rel.push_back(lf.relative_index);
  for (const auto& cf : spec.context) {
    if (!cf.kv || cf.kv->keys.size() != cfg.layers) {
      throw ShapeError("model_forward: context frame has KV for a different layer count");
    }
    ctx_rel.push_back(cf.relative_index);
  }
  const auto live_pos = model_detail::token_positions(live_rel, per);
  const auto ctx_pos = model_detail::token_positions(ctx_rel, per);

  std::vector<std::uint8_t> token_mask;
  if (!spec.frame_mask.empty()) {
    const std::size_t tk = n_total * per;
    token_mask.resize(t_live * tk);
    for (std::size_t q = 0; q < t_live; ++q)
      for (std::size_t k = 0; k < tk; ++k) token_mask[q * tk + k] = spec.frame_mask[(q / per) * n_total + k / per];
  }

  ForwardOutput out;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerParams& lp = p.layers[l];
    Tensor a = rms_norm(h, lp.norm1);
    Tensor q = matmul(a, lp.wq), k = matmul(a, lp.wk), v = matmul(a, lp.wv);
    if (spec.collect_kv) {
      out.live_kv.keys.push_back(k);
      out.live_kv.values.push_back(v);
    }
    Tensor keys = rope(k, live_pos, cfg.head_dim, cfg.rope_base);
    Tensor values = v;
    if (n_ctx > 0) {
      std::vector<Tensor> ks, vs;
      for (const auto& cf : spec.context) {
        ks.push_back(cf.kv->keys[l]);
        vs.push_back(cf.kv->values[l]);
      }
      ks.push_back(std::move(keys));
      vs.push_back(std::move(values));
      // Context keys carry no phase in storage; rotate them by their slot now.
      Tensor ctx_keys = rope(concat_rows(std::vector<Tensor>(ks.begin(), ks.end() - 1)), ctx_pos,
                             cfg.head_dim, cfg.rope_base);
      keys = concat_rows({ctx_keys, ks.back()});
      values = concat_rows(vs);
    }
    AttentionWeights weights;
    Tensor o;
    try {
      o = attention(rope(q, live_pos, cfg.head_dim, cfg.rope_base), keys, values, cfg.heads, token_mask,
                    spec.on_attention ? &weights : nullptr);
    } catch (const NumericError& e) {
      throw NumericError("layer " + std::to_string(l) + ": " + e.what());
    }
    if (spec.on_attention) spec.on_attention(l, weights);
    h = add(h, matmul(o, lp.wo));
    Tensor f = rms_norm(h, lp.norm2);
    h = add(h, linear(silu(linear(f, lp.w1, lp.b1)), lp.w2, lp.b2));
  }
  out.x0 = linear(rms_norm(h, p.out_norm), p.out_w, p.out_b);
  return out;
}

/// Clean-latent prediction for every live frame at a shared noise level t.
inline Tensor model_denoise(const ModelParams& p, const Tensor& noisy, double t, ForwardSpec spec) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::invalid_argument("model_denoise: noise level " + std::to_string(t) + " outside [0,1]");
  }
  for (auto& lf : spec.live) lf.t = t;
  return model_forward(p, noisy, spec).x0;
}

}  // namespace adastate
