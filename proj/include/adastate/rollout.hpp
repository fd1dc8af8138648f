// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "adastate/anchor_cache.hpp"
#include "adastate/model.hpp"
#include "adastate/probe.hpp"
#include "adastate/rng.hpp"
#include "adastate/scene.hpp"

namespace adastate {

struct NoiseSchedule {
  std::vector<double> levels{1.0, 0.75, 0.5, 0.25};

  void validate() const {
    if (levels.empty()) throw std::invalid_argument("schedule: no noise levels");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (!(levels[i] > 0.0 && levels[i] <= 1.0)) {
        throw std::invalid_argument("schedule: level " + std::to_string(levels[i]) + " outside (0,1]");
      }
      if (i > 0 && !(levels[i] < levels[i - 1])) {
        throw std::invalid_argument("schedule: levels must be strictly decreasing");
      }
    }
  }
  std::size_t steps() const { return levels.size(); }
};

/// Which denoising steps are recorded for backward.
enum class GradientPath {
  kFinalStep,  // only the last step; earlier steps and the cache rerun run without a tape
  kFull,       // every step and the cache rerun
};

/// How the clean state enters the cache rerun.
enum class StateCarry {
  kDetached,  // stop-gradient (the training rule)
  kConstant,  // rebuilt as a fresh constant tensor
  kLive,      // graph kept; deliberately wrong, for negative controls
};

/// Every value that leaves the tape and re-enters it (stop-gradient points and
/// values produced without a tape) passes through here. Recording them and
/// replaying them lets a finite-difference oracle evaluate exactly the
/// surrogate the tape differentiates.
class GradientBoundary {
 public:
  enum class Mode { kPassthrough, kRecord, kReplay };

  explicit GradientBoundary(Mode mode = Mode::kPassthrough) : mode_(mode) {}

  Mode mode() const { return mode_; }
  void set_mode(Mode m) {
    mode_ = m;
    cursor_ = 0;
  }
  std::size_t size() const { return stored_.size(); }

  Tensor cross(const Tensor& x) {
    switch (mode_) {
      case Mode::kPassthrough:
        return x.requires_grad() ? stop_gradient(x) : x;
      case Mode::kRecord:
        stored_.push_back(x.values());
        return x.detach();
      case Mode::kReplay: {
        if (cursor_ >= stored_.size()) throw std::logic_error("GradientBoundary: replay ran past recording");
        const auto& v = stored_[cursor_++];
        if (v.size() != x.numel()) throw std::logic_error("GradientBoundary: replay shape drift");
        return Tensor(x.shape(), v);
      }
    }
    return x;
  }

 private:
  Mode mode_;
  std::vector<std::vector<double>> stored_;
  std::size_t cursor_ = 0;
};

struct RolloutOptions {
  CacheConfig cache;
  AnchorPolicy policy;
  NoiseSchedule schedule;
  std::size_t chunks = 7;
  bool teacher_first_chunk = true;
  bool reuse_noise = false;
  GradientPath gradient_path = GradientPath::kFinalStep;
  StateCarry state_carry = StateCarry::kDetached;
  bool record_attention = false;
  bool record_rerun_attention = true;
  std::size_t probe_queries = 32;
  long sequence_id = 0;
  bool track_windows = false;
  bool keep_snapshots = false;
  GradientBoundary* boundary = nullptr;
  // Instrumentation: adjust the forward description of (chunk, step) before it
  // runs. The rerun is step == schedule size.
  std::function<void(std::size_t chunk, std::size_t step, const WindowView&, ForwardSpec&)> customize;
  std::function<void(std::size_t chunk, const AnchorCache&)> on_chunk_end;

  void validate() const {
    cache.validate();
    policy.validate();
    schedule.validate();
    if (chunks == 0) throw std::invalid_argument("rollout: chunk count must be >= 1");
  }
};

struct LatentFrames {
  std::vector<std::vector<double>> frames;
  std::vector<FrameOrigin> origin;
};

struct RolloutResult {
  std::size_t chunk_frames = 0;
  std::size_t tokens_per_frame = 0;
  std::size_t channels = 0;
  std::vector<Tensor> content;  // per chunk, [F * tokens_per_frame, channels]; generated chunks keep their tape
  std::vector<Tensor> states;   // adaptive policy: s_0 .. s_{N_c-1}, detached
  std::vector<double> chunk_seconds;
  std::vector<AttentionRecord> records;
  std::vector<Tensor> anchor_history;  // anchor latents after each chunk
  std::vector<std::vector<WindowView::SlotInfo>> windows;  // denoise windows, chunk-major
  std::vector<std::size_t> window_chunk;                   // chunk of each windows[] entry
  std::vector<AnchorCache> snapshots;                      // cache after each chunk
  std::size_t max_cached_frames = 0;
  long teacher_component = -1;  // mixture component of a scene-sampled chunk 0

  std::size_t content_frame_count() const { return content.size() * chunk_frames; }

  static std::vector<std::vector<double>> split_frames(const Tensor& t, std::size_t frame_dim) {
    std::vector<std::vector<double>> out;
    const auto& v = t.values();
    for (std::size_t i = 0; i + frame_dim <= v.size(); i += frame_dim)
      out.emplace_back(v.begin() + static_cast<long>(i), v.begin() + static_cast<long>(i + frame_dim));
    return out;
  }

  LatentFrames content_latents() const {
    LatentFrames lf;
    for (const auto& c : content)
      for (auto& f : split_frames(c, tokens_per_frame * channels)) {
        lf.frames.push_back(std::move(f));
        lf.origin.push_back(FrameOrigin::kContent);
      }
    return lf;
  }

  LatentFrames state_latents() const {
    LatentFrames lf;
    for (const auto& s : states)
      for (auto& f : split_frames(s, tokens_per_frame * channels)) {
        lf.frames.push_back(std::move(f));
        lf.origin.push_back(FrameOrigin::kState);
      }
    return lf;
  }
};

class StateFrameDecoded : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Observation-space frames. The toy observation space is the latent space, so
/// this is the identity on content; any frame not tagged as content is refused.
inline std::vector<std::vector<double>> decode_content(const LatentFrames& latents) {
  if (latents.origin.size() != latents.frames.size()) {
    throw std::invalid_argument("decode_content: missing provenance tags");
  }
  for (std::size_t i = 0; i < latents.frames.size(); ++i) {
    if (latents.origin[i] != FrameOrigin::kContent) {
      throw StateFrameDecoded("decode_content: frame " + std::to_string(i) + " has origin " +
                              origin_name(latents.origin[i]));
    }
  }
  return latents.frames;
}

inline LatentFrames encode_content(const std::vector<std::vector<double>>& frames) {
  return {frames, std::vector<FrameOrigin>(frames.size(), FrameOrigin::kContent)};
}

namespace rollout_detail {

inline Tensor frames_to_tensor(const std::vector<std::vector<double>>& frames, std::size_t channels) {
  std::vector<double> v;
  for (const auto& f : frames) v.insert(v.end(), f.begin(), f.end());
  const std::size_t rows = v.size() / channels;
  return Tensor({rows, channels}, std::move(v));
}

}  // namespace rollout_detail

/// Keys and values of clean live frames, computed by a t = 0 pass over `view`
/// (the window the frames were generated in, live slots now clean). Off the
/// tape, every produced tensor goes through `boundary`.
inline std::vector<CachedFrame> rerun_kv(const ModelParams& p, const WindowView& view, const Tensor& clean_live,
                                         const std::vector<FrameOrigin>& origins,
                                         const std::vector<long>& sources, GradientBoundary& boundary,
                                         ForwardSpec spec) {
  const std::size_t per = p.config.tokens_per_frame();
  spec.collect_kv = true;
  ForwardOutput out = model_forward(p, clean_live, spec);
  const bool taped = grad_enabled();
  auto pass = [&](const Tensor& t) { return taped ? t : boundary.cross(t); };
  std::vector<CachedFrame> frames;
  const std::size_t n_live = view.live_count();
  for (std::size_t f = 0; f < n_live; ++f) {
    CachedFrame cf;
    cf.latent = pass(slice_rows(clean_live, f * per, (f + 1) * per));
    for (std::size_t l = 0; l < p.config.layers; ++l) {
      cf.kv.keys.push_back(pass(slice_rows(out.live_kv.keys[l], f * per, (f + 1) * per)));
      cf.kv.values.push_back(pass(slice_rows(out.live_kv.values[l], f * per, (f + 1) * per)));
    }
    cf.origin = origins.at(f);
    cf.source = sources.at(f);
    frames.push_back(std::move(cf));
  }
  return frames;
}

struct ChunkSample {
  Tensor state;    // [live state frames * tokens_per_frame, channels], may be empty
  Tensor content;  // [F * tokens_per_frame, channels]
};

/// K-step joint denoising of [state; content] against the cache.
inline ChunkSample sample_chunk(const ModelParams& p, const AnchorCache& cache, const RolloutOptions& opts,
                                SeededRng rng, std::size_t chunk, RolloutResult* result,
                                GradientBoundary& boundary) {
  opts.schedule.validate();
  const auto& levels = opts.schedule.levels;
  const std::size_t per = p.config.tokens_per_frame(), c = p.config.channels;
  const std::size_t f_live_state = cache.initialized() ? cache.live_state_frames() : 0;
  const std::size_t f = opts.cache.chunk_frames;
  const std::size_t rows = (f_live_state + f) * per;
  const bool want_grad = grad_enabled();

  const Tensor eps = rng.normal_tensor({rows, c});
  Tensor x = eps, x0;
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const double t = levels[k];
    const bool taped = want_grad && (opts.gradient_path == GradientPath::kFull || k + 1 == levels.size());
    const WindowView view = cache.visible_window(t, f);
    if (result && opts.track_windows) {
      result->windows.push_back(view.structure());
      result->window_chunk.push_back(chunk);
    }
    ForwardSpec spec = view.to_spec(t);
    if (result && opts.record_attention) {
      const std::size_t n_live = view.live_count();
      spec.on_attention = [&, n_live, k, t](std::size_t layer, const AttentionWeights& w) {
        result->records.push_back({layer, chunk, k, opts.sequence_id, t, n_live,
                                   frame_mass(w, query_subsample(w.queries, opts.probe_queries), per)});
      };
    }
    if (opts.customize) opts.customize(chunk, k, view, spec);
    if (taped) {
      if (opts.gradient_path == GradientPath::kFinalStep && k > 0) x = boundary.cross(x);
      x0 = model_forward(p, x, spec).x0;
    } else {
      NoGradGuard ng;
      x0 = model_forward(p, x, spec).x0;
    }
    if (k + 1 < levels.size()) {
      const double tn = levels[k + 1];
      const Tensor noise = opts.reuse_noise ? eps : rng.normal_tensor({rows, c});
      if (taped) {
        x = add(scale(x0, 1.0 - tn), scale(noise, tn));
      } else {
        NoGradGuard ng;
        x = add(scale(x0, 1.0 - tn), scale(noise, tn));
      }
    }
  }
  ChunkSample s;
  if (f_live_state > 0) s.state = slice_rows(x0, 0, f_live_state * per);
  s.content = f_live_state > 0 ? slice_rows(x0, f_live_state * per, rows) : x0;
  return s;
}

/// The chunked generation loop. Chunk 0 comes from the scene sampler (or the
/// model with an empty cache); chunks 1..N_c-1 are denoised against the cache.
inline RolloutResult rollout(const ModelParams& p, const SceneSpec* scene, const RolloutOptions& opts,
                             SeededRng rng) {
  opts.validate();
  GradientBoundary local;
  GradientBoundary& boundary = opts.boundary ? *opts.boundary : local;
  const std::size_t per = p.config.tokens_per_frame(), c = p.config.channels;
  const std::size_t f = opts.cache.chunk_frames, fs = opts.cache.state_frames;
  const bool adaptive = opts.policy.has_state();
  const bool want_grad = grad_enabled();
  const std::size_t rerun_step = opts.schedule.steps();

  RolloutResult res;
  res.chunk_frames = f;
  res.tokens_per_frame = per;
  res.channels = c;
  AnchorCache cache(opts.cache, opts.policy);

  auto record_rerun = [&](ForwardSpec& spec, std::size_t chunk, const WindowView& view) {
    if (opts.record_attention && opts.record_rerun_attention) {
      const std::size_t n_live = view.live_count();
      spec.on_attention = [&, n_live, chunk](std::size_t layer, const AttentionWeights& w) {
        res.records.push_back({layer, chunk, rerun_step, opts.sequence_id, 0.0, n_live,
                               frame_mass(w, query_subsample(w.queries, opts.probe_queries), per)});
      };
    }
    if (opts.customize) opts.customize(chunk, rerun_step, view, spec);
  };
  auto rerun = [&](const WindowView& view, const Tensor& clean, const std::vector<FrameOrigin>& origins,
                   const std::vector<long>& sources, std::size_t chunk) {
    ForwardSpec spec = view.to_spec(0.0);
    record_rerun(spec, chunk, view);
    if (want_grad && opts.gradient_path == GradientPath::kFull) {
      return rerun_kv(p, view, clean, origins, sources, boundary, spec);
    }
    NoGradGuard ng;
    return rerun_kv(p, view, clean, origins, sources, boundary, spec);
  };
  auto finish_chunk = [&](std::size_t n) {
    std::vector<Tensor> anchor;
    for (const auto& a : cache.anchor()) anchor.push_back(a.latent);
    res.anchor_history.push_back(anchor.empty() ? Tensor() : concat_rows(anchor).detach());
    res.max_cached_frames = std::max(res.max_cached_frames, cache.cached_frames());
    if (opts.keep_snapshots) res.snapshots.push_back(cache);
    if (opts.on_chunk_end) opts.on_chunk_end(n, cache);
  };

  // Chunk 0.
  {
    const auto start = std::chrono::steady_clock::now();
    SeededRng r0 = rng.fork(0);
    Tensor content0;
    if (opts.teacher_first_chunk) {
      if (!scene) throw std::invalid_argument("rollout: teacher first chunk needs a scene");
      if (scene->dim() != per * c) {
        throw ShapeError("rollout: scene frames have " + std::to_string(scene->dim()) + " dims, model frames " +
                         std::to_string(per * c));
      }
      SceneSequence seq = gen_scene_sequence(*scene, f, r0);
      res.teacher_component = static_cast<long>(seq.component);
      content0 = rollout_detail::frames_to_tensor(seq.frames, c);
    } else {
      content0 = sample_chunk(p, cache, opts, r0, 0, &res, boundary).content;
    }
    const WindowView view = cache.visible_window(0.0, f);
    std::vector<long> sources(f);
    for (std::size_t i = 0; i < f; ++i) sources[i] = static_cast<long>(i);
    auto frames = rerun(view, content0, std::vector<FrameOrigin>(f, FrameOrigin::kContent), sources, 0);
    cache.init_from_first_chunk(frames);
    res.content.push_back(content0);
    if (adaptive) res.states.push_back(slice_rows(content0, 0, fs * per).detach());
    res.chunk_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    finish_chunk(0);
  }

  for (std::size_t n = 1; n < opts.chunks; ++n) {
    const auto start = std::chrono::steady_clock::now();
    ChunkSample s = sample_chunk(p, cache, opts, rng.fork(n), n, &res, boundary);
    const WindowView view = cache.visible_window(0.0, f);
    std::vector<FrameOrigin> origins;
    std::vector<long> sources;
    Tensor clean = s.content;
    if (adaptive) {
      Tensor carried;
      switch (opts.state_carry) {
        case StateCarry::kDetached: carried = boundary.cross(stop_gradient(s.state)); break;
        case StateCarry::kConstant: carried = boundary.cross(Tensor(s.state.shape(), s.state.values())); break;
        case StateCarry::kLive: carried = s.state; break;
      }
      clean = concat_rows({carried, s.content});
      origins.assign(fs, FrameOrigin::kState);
      sources.assign(fs, static_cast<long>(n));
      res.states.push_back(s.state.detach());
    }
    for (std::size_t i = 0; i < f; ++i) {
      origins.push_back(FrameOrigin::kContent);
      sources.push_back(static_cast<long>(n * f + i));
    }
    auto frames = rerun(view, clean, origins, sources, n);
    std::vector<CachedFrame> state_frames(frames.begin(), frames.begin() + static_cast<long>(adaptive ? fs : 0));
    std::vector<CachedFrame> content_frames(frames.begin() + static_cast<long>(adaptive ? fs : 0), frames.end());
    auto evicted = cache.append_content(content_frames);
    if (adaptive) cache.write_state_anchor(state_frames);
    cache.apply_anchor_policy(evicted, n);
    res.content.push_back(s.content);
    res.chunk_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    finish_chunk(n);
  }
  return res;
}

}  // namespace adastate
