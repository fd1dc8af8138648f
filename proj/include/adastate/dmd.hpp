// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "adastate/model.hpp"
#include "adastate/ops.hpp"
#include "adastate/rollout.hpp"
#include "adastate/scene.hpp"

namespace adastate {

struct HorizonWeights {
  std::size_t n = 0;
  double alpha = 0.0;
  std::vector<double> w;
};

/// w_i = 1 + alpha * i / (N - 1).
inline HorizonWeights horizon_weights(std::size_t n, double alpha) {
  if (n < 2) throw std::invalid_argument("horizon_weights: N must be >= 2");
  if (!(alpha >= 0.0)) throw std::invalid_argument("horizon_weights: alpha must be >= 0");
  HorizonWeights h{n, alpha, std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i)
    h.w[i] = 1.0 + alpha * static_cast<double>(i) / static_cast<double>(n - 1);
  return h;
}

struct DmdConfig {
  double gamma = 0.0;  // 0 selects the per-frame dimensionality
  double generator_lr = 1e-3;
  double critic_lr = 1e-3;
  std::size_t batch = 1;
  std::size_t iterations = 2000;
  double ema_decay = 0.99;
  std::size_t ema_start = 200;
  double alpha = 2.0;
  double t_min = 0.1;
  double t_max = 0.98;
  bool weight_first_chunk = true;
  std::size_t critic_steps = 3;
  std::size_t critic_warmup = 0;  // iterations that update only the critic
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (gamma < 0.0) throw std::invalid_argument("training.gamma must be > 0 (or 0 for the default)");
    if (!(generator_lr >= 0.0) || !(critic_lr >= 0.0)) throw std::invalid_argument("training learning rates must be >= 0");
    if (batch == 0) throw std::invalid_argument("training.batch must be positive");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("training.ema_decay must lie in [0,1)");
    if (!(alpha >= 0.0)) throw std::invalid_argument("training.alpha must be >= 0");
    if (!(t_min > 0.0 && t_min < t_max && t_max <= 1.0)) {
      throw std::invalid_argument("training.t_min/t_max must satisfy 0 < t_min < t_max <= 1");
    }
    if (critic_steps == 0) throw std::invalid_argument("training.critic_steps must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("training AdamW betas must lie in [0,1)");
    }
  }

  double resolved_gamma(const ModelConfig& m) const {
    return gamma > 0.0 ? gamma : static_cast<double>(m.frame_dim());
  }
};

/// The critic's configuration: the generator's, plus frame-index conditioning.
inline ModelConfig critic_config(ModelConfig m) {
  m.frame_index_embedding = true;
  return m;
}

/// Critic clean-latent prediction for consecutive frames with per-frame noise
/// levels; frames attend only to each other.
inline Tensor critic_x0(const ModelParams& critic, const Tensor& noisy, const std::vector<double>& t,
                        long first_frame) {
  ForwardSpec spec;
  for (std::size_t i = 0; i < t.size(); ++i)
    spec.live.push_back({t[i], static_cast<int>(i), first_frame + static_cast<long>(i)});
  return model_forward(critic, noisy, spec).x0;
}

/// S(x_t) = -(x_t - (1-t) x0_hat) / t^2, the score implied by a clean-latent prediction.
inline std::vector<double> score_from_x0(std::span<const double> xt, std::span<const double> x0, double t) {
  std::vector<double> s(xt.size());
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = -(xt[j] - (1.0 - t) * x0[j]) / (t * t);
  return s;
}

/// sg(x - (s_fake - s_real) / gamma)
inline std::vector<double> dmd_pseudo_target(std::span<const double> x, std::span<const double> s_fake,
                                             std::span<const double> s_real, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("dmd_pseudo_target: gamma must be positive");
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] - (s_fake[j] - s_real[j]) / gamma;
  return out;
}

/// One critic regression example: a rollout whose first `n_context` frames
/// are clean conditioning and whose remaining frames are noised.
struct CriticExample {
  Tensor noisy;  // [frames * tokens_per_frame, channels]
  Tensor clean;
  std::vector<double> t;  // 0 on context frames
  long first_frame = 0;
  std::size_t n_context = 0;
};

struct DmdLoss {
  Tensor loss;
  std::vector<double> per_frame;  // 1/2 w_i ||x_i - target_i||^2, one entry per weighted frame
  std::vector<CriticExample> critic_examples;
};

struct DmdLossOptions {
  double gamma = 64.0;
  double t_min = 0.1;
  double t_max = 0.98;
  bool weight_first_chunk = true;
  GradientBoundary* boundary = nullptr;
  // Optional override of the fake score (tests): (rollout with clean context
  // and noised frames, per-frame t, context frame count) -> score of the
  // noised frames.
  std::function<std::vector<double>(std::span<const double>, const std::vector<double>&, std::size_t)> fake_score;
};

/// 1/2 sum_i w_i ||x_i - sg(x_i - (S_fake - S_real)/gamma)||^2 over generated
/// content frames, one noise level per frame. Both scores see the whole
/// rollout at once; a teacher-sampled first chunk enters clean as their
/// conditioning and receives no loss. State frames never enter.
inline DmdLoss weighted_dmd_loss(const RolloutResult& r, const HorizonWeights& weights, const SceneSpec& scene,
                                 const ModelParams& critic, const DmdLossOptions& o, SeededRng rng) {
  if (!(o.gamma > 0.0)) throw std::invalid_argument("weighted_dmd_loss: gamma must be positive");
  const std::size_t f = r.chunk_frames, per = r.tokens_per_frame, c = r.channels, d = per * c;
  const std::size_t n_chunks = r.content.size(), n_all = n_chunks * f;
  const std::size_t first_weighted = o.weight_first_chunk ? 0 : 1;
  const std::size_t n_frames = (n_chunks - first_weighted) * f;
  if (weights.w.size() != n_frames) {
    throw std::invalid_argument("weighted_dmd_loss: " + std::to_string(weights.w.size()) + " weights for " +
                                std::to_string(n_frames) + " content frames");
  }
  const std::size_t context_chunks = r.teacher_component >= 0 ? 1 : 0;
  const std::size_t n_ctx = context_chunks * f;
  if (n_ctx >= n_all) throw std::invalid_argument("weighted_dmd_loss: no generated frames to score");
  GradientBoundary local;
  GradientBoundary& boundary = o.boundary ? *o.boundary : local;

  std::vector<double> t(n_all, 0.0), xv, xt(n_all * d);
  for (const auto& ch : r.content) xv.insert(xv.end(), ch.values().begin(), ch.values().end());
  std::copy(xv.begin(), xv.begin() + static_cast<long>(n_ctx * d), xt.begin());
  for (std::size_t ch = context_chunks; ch < n_chunks; ++ch) {
    SeededRng cr = rng.fork(ch);
    for (std::size_t i = ch * f; i < (ch + 1) * f; ++i) t[i] = cr.uniform(o.t_min, o.t_max);
    for (std::size_t i = ch * f; i < (ch + 1) * f; ++i)
      for (std::size_t j = 0; j < d; ++j) xt[i * d + j] = (1.0 - t[i]) * xv[i * d + j] + t[i] * cr.normal();
  }
  const Tensor noisy({n_all * per, c}, xt);

  std::vector<double> fake;  // noised frames only
  if (o.fake_score) {
    fake = o.fake_score(xt, t, n_ctx);
    if (fake.size() != (n_all - n_ctx) * d) throw ShapeError("weighted_dmd_loss: fake score has the wrong size");
  } else {
    NoGradGuard ng;
    const Tensor x0c = critic_x0(critic, noisy, t, 0);
    fake.resize((n_all - n_ctx) * d);
    for (std::size_t i = n_ctx; i < n_all; ++i) {
      auto s = score_from_x0(std::span<const double>(xt).subspan(i * d, d), x0c.data().subspan(i * d, d), t[i]);
      std::copy(s.begin(), s.end(), fake.begin() + static_cast<long>((i - n_ctx) * d));
    }
  }
  const std::vector<double> real = teacher_score_joint(scene, xt, 0, t, n_ctx);

  DmdLoss out;
  out.per_frame.assign(n_frames, 0.0);
  std::vector<Tensor> terms;
  for (std::size_t ch = std::max(first_weighted, context_chunks); ch < n_chunks; ++ch) {
    const std::size_t off = (ch * f - n_ctx) * d, len = f * d;
    const auto tg = dmd_pseudo_target(std::span<const double>(xv).subspan(ch * f * d, len),
                                      std::span<const double>(fake).subspan(off, len),
                                      std::span<const double>(real).subspan(off, len), o.gamma);
    const Tensor& x = r.content[ch];
    const Tensor tgt = boundary.cross(Tensor(x.shape(), tg));
    const Tensor sq = sum_last(reshape(square(sub(x, tgt)), {f, d}));  // [F]
    std::vector<double> wv(f);
    for (std::size_t i = 0; i < f; ++i) {
      const std::size_t idx = (ch - first_weighted) * f + i;
      wv[i] = 0.5 * weights.w[idx];
      out.per_frame[idx] = wv[i] * sq[i];
    }
    terms.push_back(sum(mul(sq, Tensor::vector(wv))));
  }
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.loss = total;
  out.critic_examples.push_back({noisy, Tensor({n_all * per, c}, xv), t, 0, n_ctx});
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

class AdamW {
 public:
  AdamW() = default;
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  /// One update of every tensor in `params` from its accumulated gradient.
  void step(ModelParams& params, double lr) {
    auto named = params.named();
    if (m_.empty()) {
      for (auto& [name, t] : named) {
        m_.emplace_back(t->numel(), 0.0);
        v_.emplace_back(t->numel(), 0.0);
      }
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t i = 0; i < named.size(); ++i) {
      Tensor& t = *named[i].second;
      auto g = t.grad();
      auto w = t.mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g.empty() ? 0.0 : g[j];
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * gj;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj;
        w[j] -= lr * ((m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_) + wd_ * w[j]);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  void set_steps(std::size_t s) { steps_ = s; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.01;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline double grad_norm(const ModelParams& params) {
  double s = 0.0;
  for (auto& [name, t] : params.named())
    for (double g : t->grad()) s += g * g;
  return std::sqrt(s);
}

/// Before `start`: ema := live. From `start` on: ema := decay*ema + (1-decay)*live.
inline void ema_update(ModelParams& ema, const ModelParams& live, double decay, std::size_t iteration,
                       std::size_t start) {
  auto e = ema.named();
  auto l = live.named();
  if (e.size() != l.size()) throw ShapeError("ema_update: parameter lists differ");
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (e[i].second->shape() != l[i].second->shape()) throw ShapeError("ema_update: shape mismatch at " + e[i].first);
    auto ev = e[i].second->mutable_data();
    const auto& lv = l[i].second->values();
    for (std::size_t j = 0; j < ev.size(); ++j) ev[j] = iteration < start ? lv[j] : decay * ev[j] + (1.0 - decay) * lv[j];
  }
}

/// One regression step of the critic on noised generator samples; returns the
/// mean squared clean-latent error before the step.
inline double critic_update(ModelParams& critic, AdamW& opt, const std::vector<CriticExample>& examples, double lr) {
  if (examples.empty()) return 0.0;
  critic.zero_grad();
  std::vector<Tensor> terms;
  std::size_t count = 0;
  for (const auto& ex : examples) {
    const Tensor pred = critic_x0(critic, ex.noisy, ex.t, ex.first_frame);
    const std::size_t rows = ex.clean.dim(0), skip = rows / ex.t.size() * ex.n_context;
    terms.push_back(sum(square(sub(slice_rows(pred, skip, rows), slice_rows(ex.clean, skip, rows)))));
    count += (rows - skip) * ex.clean.dim(1);
  }
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  total = scale(total, 1.0 / static_cast<double>(count));
  backward(total);
  opt.step(critic, lr);
  return total.item();
}

struct TrainState {
  ModelParams generator;
  ModelParams critic;
  ModelParams ema;
  AdamW generator_opt;
  AdamW critic_opt;
  std::size_t iteration = 0;

  static TrainState create(const ModelConfig& m, const DmdConfig& d, std::uint64_t seed) {
    TrainState s;
    SeededRng rng(seed, 0x1417);
    s.generator = ModelParams::init(m, rng.fork(1));
    s.critic = ModelParams::init(critic_config(m), rng.fork(2));
    s.ema = s.generator.clone();
    s.generator_opt = AdamW(d.beta1, d.beta2, d.adam_eps, d.weight_decay);
    s.critic_opt = AdamW(d.beta1, d.beta2, d.adam_eps, d.weight_decay);
    return s;
  }
};

struct IterationMetrics {
  std::size_t iter = 0;
  double loss = 0.0;
  std::vector<double> per_frame_loss;
  double critic_loss = 0.0;
  double grad_norm = 0.0;
  double seconds = 0.0;
};

/// One generator step (weighted DMD over `batch` rollouts) followed by critic
/// steps on the same noised samples, then the EMA update.
inline IterationMetrics train_iteration(TrainState& st, const SceneSpec& scene, const RolloutOptions& ro,
                                        const DmdConfig& dc, SeededRng rng) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t f = ro.cache.chunk_frames;
  const std::size_t n_frames = (ro.chunks - (dc.weight_first_chunk ? 0 : 1)) * f;
  const HorizonWeights w = horizon_weights(n_frames, dc.alpha);
  DmdLossOptions lo;
  lo.gamma = dc.resolved_gamma(st.generator.config);
  lo.t_min = dc.t_min;
  lo.t_max = dc.t_max;
  lo.weight_first_chunk = dc.weight_first_chunk;

  IterationMetrics m;
  m.iter = st.iteration;
  m.per_frame_loss.assign(n_frames, 0.0);
  const bool generator_step = st.iteration >= dc.critic_warmup;
  st.generator.zero_grad();
  std::vector<CriticExample> examples;
  const double inv_b = 1.0 / static_cast<double>(dc.batch);
  for (std::size_t b = 0; b < dc.batch; ++b) {
    SeededRng br = rng.fork(b);
    RolloutOptions o = ro;
    o.sequence_id = static_cast<long>(b);
    std::optional<NoGradGuard> ng;
    if (!generator_step) ng.emplace();
    RolloutResult r = rollout(st.generator, &scene, o, br.fork(1));
    DmdLoss l = weighted_dmd_loss(r, w, scene, st.critic, lo, br.fork(2));
    if (!std::isfinite(l.loss.item())) {
      throw NumericError("non-finite DMD loss at iteration " + std::to_string(st.iteration));
    }
    if (generator_step) backward(scale(l.loss, inv_b));
    m.loss += l.loss.item() * inv_b;
    for (std::size_t i = 0; i < n_frames; ++i) m.per_frame_loss[i] += l.per_frame[i] * inv_b;
    for (auto& ex : l.critic_examples) examples.push_back(std::move(ex));
  }
  if (generator_step) {
    m.grad_norm = grad_norm(st.generator);
    st.generator_opt.step(st.generator, dc.generator_lr);
    if (!st.generator.all_finite()) throw NumericError("generator parameters became non-finite");
  }
  for (std::size_t k = 0; k < dc.critic_steps; ++k) {
    std::vector<CriticExample> batch = examples;
    if (k > 0) {
      // Fresh noise levels and noise for repeated critic steps.
      SeededRng kr = rng.fork(1000 + k);
      for (auto& ex : batch) {
        auto xt = ex.clean.values();
        const std::size_t d = xt.size() / ex.t.size();
        for (std::size_t i = ex.n_context; i < ex.t.size(); ++i) {
          ex.t[i] = kr.uniform(dc.t_min, dc.t_max);
          for (std::size_t j = 0; j < d; ++j) xt[i * d + j] = (1.0 - ex.t[i]) * xt[i * d + j] + ex.t[i] * kr.normal();
        }
        ex.noisy = Tensor(ex.clean.shape(), std::move(xt));
      }
    }
    const double cl = critic_update(st.critic, st.critic_opt, batch, dc.critic_lr);
    if (k == 0) m.critic_loss = cl;
  }
  ema_update(st.ema, st.generator, dc.ema_decay, st.iteration, dc.ema_start);
  ++st.iteration;
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

}  // namespace adastate
