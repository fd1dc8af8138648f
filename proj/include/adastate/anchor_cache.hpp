// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "adastate/model.hpp"
#include "adastate/ops.hpp"

namespace adastate {

struct CacheConfig {
  std::size_t chunk_frames = 3;   // F
  std::size_t state_frames = 1;   // F_s
  std::size_t window_frames = 3;  // W_p

  void validate() const {
    if (chunk_frames == 0) throw std::invalid_argument("cache.chunk_frames must be positive");
    if (state_frames == 0) throw std::invalid_argument("cache.state_frames must be positive");
    if (window_frames == 0) throw std::invalid_argument("cache.window_frames must be positive");
    if (state_frames > chunk_frames) {
      throw std::invalid_argument("cache.state_frames must not exceed cache.chunk_frames");
    }
  }
};

enum class PolicyKind { kAdaptiveState, kStaticSink, kEmaSink, kHeuristicReplace, kNoAnchor };

struct AnchorPolicy {
  PolicyKind kind = PolicyKind::kAdaptiveState;
  double ema_decay = 0.9;      // EmaSink lambda
  int replace_period = 2;      // HeuristicReplace P
  bool retain_static_sink = false;  // AdaptiveState only: keep a frozen sink ahead of the state

  static AnchorPolicy adaptive() { return {}; }
  static AnchorPolicy static_sink() { return {PolicyKind::kStaticSink}; }
  static AnchorPolicy ema_sink(double decay = 0.9) { return {PolicyKind::kEmaSink, decay}; }
  static AnchorPolicy heuristic_replace(int period = 2) {
    return {PolicyKind::kHeuristicReplace, 0.9, period};
  }
  static AnchorPolicy no_anchor() { return {PolicyKind::kNoAnchor}; }
  static AnchorPolicy sink_and_state() {
    AnchorPolicy p;
    p.retain_static_sink = true;
    return p;
  }

  bool has_state() const { return kind == PolicyKind::kAdaptiveState; }
  bool has_sink() const {
    return kind == PolicyKind::kStaticSink || kind == PolicyKind::kEmaSink ||
           kind == PolicyKind::kHeuristicReplace || (has_state() && retain_static_sink);
  }

  void validate() const {
    if (kind == PolicyKind::kEmaSink && !(ema_decay > 0.0 && ema_decay < 1.0)) {
      throw std::invalid_argument("policy.ema_decay must lie in (0,1)");
    }
    if (kind == PolicyKind::kHeuristicReplace && replace_period < 1) {
      throw std::invalid_argument("policy.replace_period must be >= 1");
    }
    if (retain_static_sink && kind != PolicyKind::kAdaptiveState) {
      throw std::invalid_argument("policy.retain_static_sink only applies to the adaptive policy");
    }
  }

  std::string name() const {
    switch (kind) {
      case PolicyKind::kAdaptiveState: return retain_static_sink ? "sink-state" : "adaptive";
      case PolicyKind::kStaticSink: return "static-sink";
      case PolicyKind::kEmaSink: return "ema-sink";
      case PolicyKind::kHeuristicReplace: return "heuristic-replace";
      case PolicyKind::kNoAnchor: return "no-anchor";
    }
    return "?";
  }

  static AnchorPolicy parse(const std::string& s) {
    if (s == "adaptive") return adaptive();
    if (s == "static-sink") return static_sink();
    if (s == "ema-sink") return ema_sink();
    if (s == "heuristic-replace") return heuristic_replace();
    if (s == "no-anchor") return no_anchor();
    if (s == "sink-state") return sink_and_state();
    throw std::invalid_argument("unknown policy '" + s +
                                "' (expected adaptive, static-sink, ema-sink, heuristic-replace, "
                                "no-anchor or sink-state)");
  }
};

enum class FrameOrigin : std::uint8_t { kContent, kState, kSink };

inline const char* origin_name(FrameOrigin o) {
  switch (o) {
    case FrameOrigin::kContent: return "content";
    case FrameOrigin::kState: return "state";
    case FrameOrigin::kSink: return "sink";
  }
  return "?";
}

/// One cached frame: its clean latent, per-layer KV, and where it came from.
struct CachedFrame {
  Tensor latent;  // [tokens_per_frame, channels]
  LayerKV kv;
  FrameOrigin origin = FrameOrigin::kContent;
  long source = -1;  // global content frame index, or chunk index for states
};

enum class SlotKind : std::uint8_t { kSink, kCachedState, kLiveState, kCachedContent, kLiveContent };

inline const char* slot_name(SlotKind k) {
  switch (k) {
    case SlotKind::kSink: return "sink";
    case SlotKind::kCachedState: return "cached-state";
    case SlotKind::kLiveState: return "live-state";
    case SlotKind::kCachedContent: return "cached-content";
    case SlotKind::kLiveContent: return "live-content";
  }
  return "?";
}

inline bool is_live(SlotKind k) { return k == SlotKind::kLiveState || k == SlotKind::kLiveContent; }
inline bool is_state(SlotKind k) { return k == SlotKind::kCachedState || k == SlotKind::kLiveState; }

struct WindowSlot {
  SlotKind kind;
  double noise = 0.0;
  int relative_index = 0;
  const CachedFrame* frame = nullptr;  // cached slots only
  std::size_t live_index = 0;          // live slots: row block in the live tensor
};

/// The visible window in slot order. Live slots index the live tensor, whose
/// frames are ordered [live state; live content].
struct WindowView {
  std::vector<WindowSlot> slots;

  std::size_t frame_count() const { return slots.size(); }
  std::size_t live_count() const {
    std::size_t n = 0;
    for (auto& s : slots) n += is_live(s.kind);
    return n;
  }
  std::size_t count(SlotKind k) const {
    std::size_t n = 0;
    for (auto& s : slots) n += s.kind == k;
    return n;
  }

  /// Slots in the order the model consumes them: cached slots first (window
  /// order), then live slots by live index.
  std::vector<const WindowSlot*> model_order() const {
    std::vector<const WindowSlot*> out;
    for (auto& s : slots)
      if (!is_live(s.kind)) out.push_back(&s);
    std::vector<const WindowSlot*> live(live_count(), nullptr);
    for (auto& s : slots)
      if (is_live(s.kind)) live.at(s.live_index) = &s;
    out.insert(out.end(), live.begin(), live.end());
    return out;
  }

  /// Forward description for the model; every live slot gets noise level t.
  ForwardSpec to_spec(double t) const {
    ForwardSpec spec;
    for (const WindowSlot* s : model_order()) {
      if (is_live(s->kind)) {
        spec.live.push_back({t, s->relative_index, -1});
      } else {
        spec.context.push_back({&s->frame->kv, s->relative_index});
      }
    }
    return spec;
  }

  /// Frame mask in model order from a visibility rule on (query slot, key slot).
  template <class Rule>
  std::vector<std::uint8_t> frame_mask(Rule visible) const {
    const auto order = model_order();
    const std::size_t n_live = live_count(), n = order.size(), first_live = n - n_live;
    std::vector<std::uint8_t> m(n_live * n);
    for (std::size_t q = 0; q < n_live; ++q)
      for (std::size_t k = 0; k < n; ++k) m[q * n + k] = visible(*order[first_live + q], *order[k]) ? 1 : 0;
    return m;
  }

  /// Structural summary: (kind, relative index, noise) per slot.
  struct SlotInfo {
    SlotKind kind;
    int relative_index;
    double noise;
    bool operator==(const SlotInfo&) const = default;
  };
  std::vector<SlotInfo> structure() const {
    std::vector<SlotInfo> out;
    for (auto& s : slots) out.push_back({s.kind, s.relative_index, s.noise});
    return out;
  }
};

/// Visible-window manager: anchor slot(s) plus a FIFO content window.
class AnchorCache {
 public:
  AnchorCache(CacheConfig config, AnchorPolicy policy) : config_(config), policy_(policy) {
    config_.validate();
    policy_.validate();
  }

  const CacheConfig& config() const { return config_; }
  const AnchorPolicy& policy() const { return policy_; }
  std::size_t chunk_counter() const { return n_; }
  bool initialized() const { return initialized_; }

  /// Anchor block at position 0: the state for the adaptive policy, the sink otherwise.
  const std::vector<CachedFrame>& anchor() const { return policy_.has_state() ? state_ : sink_; }
  const std::vector<CachedFrame>& state_anchor() const { return state_; }
  const std::vector<CachedFrame>& sink() const { return sink_; }
  const std::deque<CachedFrame>& content_window() const { return content_; }

  std::size_t cached_frames() const { return state_.size() + sink_.size() + content_.size(); }

  /// Seeds the cache from the clean first chunk (KV already computed).
  /// The anchor copies the first F_s content frames.
  void init_from_first_chunk(const std::vector<CachedFrame>& first_chunk) {
    if (first_chunk.size() != config_.chunk_frames) {
      throw std::invalid_argument("init_from_first_chunk: got " + std::to_string(first_chunk.size()) +
                                  " frames, expected " + std::to_string(config_.chunk_frames));
    }
    state_.clear();
    sink_.clear();
    content_.clear();
    for (std::size_t i = 0; i < config_.state_frames && policy_.kind != PolicyKind::kNoAnchor; ++i) {
      CachedFrame a = first_chunk[i];
      if (policy_.has_state()) {
        a.origin = FrameOrigin::kState;
        a.source = 0;
        state_.push_back(a);
      }
      if (policy_.has_sink()) {
        a.origin = FrameOrigin::kSink;
        sink_.push_back(a);
      }
    }
    append_content(first_chunk);
    n_ = 0;
    initialized_ = true;
  }

  /// Appends a chunk's clean content KV; returns what fell out of the window.
  std::vector<CachedFrame> append_content(const std::vector<CachedFrame>& chunk) {
    for (const auto& f : chunk) content_.push_back(f);
    std::vector<CachedFrame> evicted;
    while (content_.size() > config_.window_frames) {
      evicted.push_back(std::move(content_.front()));
      content_.pop_front();
    }
    return evicted;
  }

  /// Overwrites the state anchor with KV(s_n).
  void write_state_anchor(const std::vector<CachedFrame>& state) {
    if (!policy_.has_state()) {
      throw std::logic_error("write_state_anchor: policy " + policy_.name() + " has no state slot");
    }
    if (state.size() != config_.state_frames) {
      throw std::invalid_argument("write_state_anchor: got " + std::to_string(state.size()) +
                                  " frames, expected " + std::to_string(config_.state_frames));
    }
    state_ = state;
    for (auto& f : state_) f.origin = FrameOrigin::kState;
  }

  /// Sink maintenance after chunk n was appended.
  void apply_anchor_policy(const std::vector<CachedFrame>& evicted, std::size_t n) {
    n_ = n;
    switch (policy_.kind) {
      case PolicyKind::kAdaptiveState:
      case PolicyKind::kStaticSink:
      case PolicyKind::kNoAnchor:
        return;
      case PolicyKind::kEmaSink: {
        if (evicted.empty()) return;
        const CachedFrame mean = mean_frame(evicted);
        const double lam = policy_.ema_decay;
        for (auto& a : sink_) {
          a.latent = add(scale(a.latent, lam), scale(mean.latent, 1.0 - lam));
          for (std::size_t l = 0; l < a.kv.keys.size(); ++l) {
            a.kv.keys[l] = add(scale(a.kv.keys[l], lam), scale(mean.kv.keys[l], 1.0 - lam));
            a.kv.values[l] = add(scale(a.kv.values[l], lam), scale(mean.kv.values[l], 1.0 - lam));
          }
        }
        return;
      }
      case PolicyKind::kHeuristicReplace: {
        if (n % static_cast<std::size_t>(policy_.replace_period) != 0) return;
        const std::size_t k = std::min(config_.state_frames, content_.size());
        for (std::size_t i = 0; i < k; ++i) {
          CachedFrame f = content_[content_.size() - k + i];
          f.origin = FrameOrigin::kSink;
          sink_[sink_.size() - k + i] = f;
        }
        return;
      }
    }
  }

  /// Live slots for the next chunk: F_s state frames (adaptive only) then F content frames.
  std::size_t live_state_frames() const { return policy_.has_state() ? config_.state_frames : 0; }

  /// Window order: [sink; cached state; live state; cached content; live content],
  /// relative indices 0..frames-1. Cached slots are tagged noise 0, live slots t.
  WindowView visible_window(double t, std::size_t live_content_frames) const {
    WindowView v;
    int rel = 0;
    std::size_t live = 0;
    for (auto& f : sink_) v.slots.push_back({SlotKind::kSink, 0.0, rel++, &f, 0});
    for (auto& f : state_) v.slots.push_back({SlotKind::kCachedState, 0.0, rel++, &f, 0});
    for (std::size_t i = 0; i < live_state_frames() && initialized_; ++i)
      v.slots.push_back({SlotKind::kLiveState, t, rel++, nullptr, live++});
    for (auto& f : content_) v.slots.push_back({SlotKind::kCachedContent, 0.0, rel++, &f, 0});
    for (std::size_t i = 0; i < live_content_frames; ++i)
      v.slots.push_back({SlotKind::kLiveContent, t, rel++, nullptr, live++});
    return v;
  }

  /// Replaces the cached contents while keeping the chunk counter (used to
  /// present identical windows at different absolute chunk positions).
  void restore_contents(const AnchorCache& other) {
    state_ = other.state_;
    sink_ = other.sink_;
    content_ = other.content_;
    initialized_ = other.initialized_;
  }

 private:
  static CachedFrame mean_frame(const std::vector<CachedFrame>& frames) {
    CachedFrame m = frames.front();
    const double inv = 1.0 / static_cast<double>(frames.size());
    for (std::size_t i = 1; i < frames.size(); ++i) {
      m.latent = add(m.latent, frames[i].latent);
      for (std::size_t l = 0; l < m.kv.keys.size(); ++l) {
        m.kv.keys[l] = add(m.kv.keys[l], frames[i].kv.keys[l]);
        m.kv.values[l] = add(m.kv.values[l], frames[i].kv.values[l]);
      }
    }
    m.latent = scale(m.latent, inv);
    for (std::size_t l = 0; l < m.kv.keys.size(); ++l) {
      m.kv.keys[l] = scale(m.kv.keys[l], inv);
      m.kv.values[l] = scale(m.kv.values[l], inv);
    }
    return m;
  }

  CacheConfig config_;
  AnchorPolicy policy_;
  std::vector<CachedFrame> state_;
  std::vector<CachedFrame> sink_;
  std::deque<CachedFrame> content_;
  std::size_t n_ = 0;
  bool initialized_ = false;
};

}  // namespace adastate
