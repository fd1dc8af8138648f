// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "adastate/rollout.hpp"
#include "test_util.hpp"

namespace adastate {
namespace {

using testing::tiny_config;
using testing::tiny_scene;

struct Fixture {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, SeededRng(101));
  SceneSpec scene = tiny_scene();
};

RolloutResult run(const Fixture& fx, RolloutOptions o, std::uint64_t seed = 5) {
  NoGradGuard ng;
  return rollout(fx.params, &fx.scene, o, SeededRng(seed));
}

TEST(SampleChunk, SingleStepIsOneModelEvaluation) {
  Fixture fx;
  RolloutOptions o;
  o.schedule.levels = {1.0};
  AnchorCache cache(o.cache, o.policy);
  GradientBoundary b;
  NoGradGuard ng;
  ChunkSample s = sample_chunk(fx.params, cache, o, SeededRng(3), 0, nullptr, b);
  const std::size_t per = fx.cfg.tokens_per_frame();
  Tensor eps = SeededRng(3).normal_tensor({3 * per, fx.cfg.channels});
  Tensor expect = model_denoise(fx.params, eps, 1.0, cache.visible_window(1.0, 3).to_spec(1.0));
  EXPECT_EQ(s.content.values(), expect.values());
  EXPECT_EQ(s.state.numel(), 0u);
}

TEST(SampleChunk, ShapesSplitStateAndContent) {
  Fixture fx;
  RolloutOptions o;
  o.chunks = 2;
  o.keep_snapshots = true;
  RolloutResult r = run(fx, o);
  GradientBoundary b;
  NoGradGuard ng;
  ChunkSample s = sample_chunk(fx.params, r.snapshots[0], o, SeededRng(4), 1, nullptr, b);
  const std::size_t per = fx.cfg.tokens_per_frame();
  EXPECT_EQ(s.state.shape(), (Shape{1 * per, fx.cfg.channels}));
  EXPECT_EQ(s.content.shape(), (Shape{3 * per, fx.cfg.channels}));
}

TEST(SampleChunk, EmptyScheduleIsRejected) {
  Fixture fx;
  RolloutOptions o;
  o.schedule.levels.clear();
  AnchorCache cache(o.cache, o.policy);
  GradientBoundary b;
  EXPECT_THROW(sample_chunk(fx.params, cache, o, SeededRng(1), 0, nullptr, b), std::invalid_argument);
  EXPECT_THROW(run(fx, o), std::invalid_argument);
}

TEST(SampleChunk, NonDecreasingScheduleIsRejected) {
  NoiseSchedule s;
  s.levels = {1.0, 0.5, 0.5};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.levels = {1.2};
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Rollout, FixedSeedIsBitIdentical) {
  Fixture fx;
  RolloutOptions o;
  auto a = run(fx, o, 9), b = run(fx, o, 9);
  ASSERT_EQ(a.content.size(), b.content.size());
  for (std::size_t c = 0; c < a.content.size(); ++c) EXPECT_EQ(a.content[c].values(), b.content[c].values());
  auto d = run(fx, o, 10);
  EXPECT_NE(a.content[3].values(), d.content[3].values());
}

TEST(Rollout, SevenChunksGiveTwentyOneFrames) {
  Fixture fx;
  RolloutResult r = run(fx, {});
  EXPECT_EQ(r.content_latents().frames.size(), 21u);
  EXPECT_EQ(r.states.size(), 7u);
}

TEST(Rollout, SingleChunkNeverWritesState) {
  Fixture fx;
  RolloutOptions o;
  o.chunks = 1;
  o.keep_snapshots = true;
  RolloutResult r = run(fx, o);
  ASSERT_EQ(r.snapshots.size(), 1u);
  EXPECT_EQ(r.states.size(), 1u);
  // The anchor is still s_0, i.e. content frame 0.
  EXPECT_EQ(r.snapshots[0].anchor()[0].source, 0);
  EXPECT_EQ(r.snapshots[0].anchor()[0].latent.values(), r.states[0].values());
}

TEST(Rollout, DecodedFrameCountMatchesEveryPolicyAndLength) {
  Fixture fx;
  for (const auto& policy : testing::all_policies()) {
    RolloutOptions o;
    o.policy = policy;
    o.schedule.levels = {1.0};
    for (std::size_t n = 1; n <= 20; ++n) {
      o.chunks = n;
      RolloutResult r = run(fx, o);
      EXPECT_EQ(decode_content(r.content_latents()).size(), n * 3) << policy.name();
    }
  }
}

TEST(Rollout, ModelSampledFirstChunkNeedsNoScene) {
  Fixture fx;
  RolloutOptions o;
  o.teacher_first_chunk = false;
  o.chunks = 3;
  NoGradGuard ng;
  RolloutResult r = rollout(fx.params, nullptr, o, SeededRng(1));
  EXPECT_EQ(r.content.size(), 3u);
  o.teacher_first_chunk = true;
  EXPECT_THROW(rollout(fx.params, nullptr, o, SeededRng(1)), std::invalid_argument);
}

TEST(DecodeContent, PassesContentThrough) {
  Fixture fx;
  RolloutResult r = run(fx, {});
  auto lf = r.content_latents();
  EXPECT_EQ(decode_content(lf), lf.frames);
}

TEST(DecodeContent, RefusesStateFrames) {
  Fixture fx;
  RolloutResult r = run(fx, {});
  EXPECT_THROW(decode_content(r.state_latents()), StateFrameDecoded);
  auto mixed = r.content_latents();
  mixed.frames.push_back(r.state_latents().frames[0]);
  mixed.origin.push_back(FrameOrigin::kState);
  EXPECT_THROW(decode_content(mixed), StateFrameDecoded);
}

TEST(DecodeContent, RoundTripIsIdentity) {
  std::vector<std::vector<double>> frames{{1, 2}, {3, 4}, {5, 6}};
  EXPECT_EQ(decode_content(encode_content(frames)), frames);
}

TEST(Rollout, MemoryStaysBoundedForEveryPolicy) {
  Fixture fx;
  for (const auto& policy : testing::all_policies()) {
    RolloutOptions o;
    o.policy = policy;
    o.chunks = 50;
    o.schedule.levels = {1.0};
    o.on_chunk_end = [&](std::size_t, const AnchorCache& c) {
      EXPECT_LE(c.cached_frames(), o.cache.state_frames + o.cache.window_frames) << policy.name();
      EXPECT_LE(c.content_window().size(), o.cache.window_frames);
    };
    run(fx, o);
  }
}

TEST(Rollout, AnchorHoldsLatestState) {
  Fixture fx;
  RolloutOptions o;
  o.keep_snapshots = true;
  RolloutResult r = run(fx, o);
  for (std::size_t n = 0; n < r.snapshots.size(); ++n) {
    const auto& a = r.snapshots[n].anchor();
    ASSERT_EQ(a.size(), 1u);
    EXPECT_EQ(a[0].origin, FrameOrigin::kState);
    EXPECT_EQ(a[0].latent.values(), r.states[n].values()) << "chunk " << n;
  }
}

// KV(s_n) stored in the anchor equals a fresh clean pass over the rerun window.
TEST(Rollout, AnchorKvMatchesRerunOfState) {
  Fixture fx;
  RolloutOptions o;
  o.chunks = 3;
  o.keep_snapshots = true;
  RolloutResult r = run(fx, o);
  const AnchorCache& before = r.snapshots[1];
  const WindowView view = before.visible_window(0.0, 3);
  Tensor clean = concat_rows({r.states[2], r.content[2]});
  NoGradGuard ng;
  ForwardSpec spec = view.to_spec(0.0);
  spec.collect_kv = true;
  ForwardOutput out = model_forward(fx.params, clean, spec);
  const std::size_t per = fx.cfg.tokens_per_frame();
  for (std::size_t l = 0; l < fx.cfg.layers; ++l) {
    EXPECT_EQ(r.snapshots[2].anchor()[0].kv.keys[l].values(), slice_rows(out.live_kv.keys[l], 0, per).values());
    EXPECT_EQ(r.snapshots[2].anchor()[0].kv.values[l].values(),
              slice_rows(out.live_kv.values[l], 0, per).values());
  }
}

TEST(Rollout, LiveStateAttendsToAnchor) {
  Fixture fx;
  RolloutOptions o;
  o.chunks = 4;
  double min_mass = 1.0;
  std::size_t seen = 0;
  o.customize = [&](std::size_t chunk, std::size_t step, const WindowView& view, ForwardSpec& spec) {
    if (chunk == 0 || step >= o.schedule.steps()) return;
    (void)view;
    const std::size_t per = fx.cfg.tokens_per_frame();
    spec.on_attention = [&, per](std::size_t, const AttentionWeights& w) {
      // Live-state queries are the first live frame; the anchor is context frame 0.
      for (std::size_t h = 0; h < w.heads; ++h)
        for (std::size_t q = 0; q < per; ++q) {
          double m = 0;
          for (std::size_t k = 0; k < per; ++k) m += w.at(h, q, k);
          min_mass = std::min(min_mass, m);
          ++seen;
        }
    };
  };
  run(fx, o);
  EXPECT_GT(seen, 0u);
  EXPECT_GT(min_mass, 0.0);
}

TEST(Rollout, WindowStructureRepeatsFromChunkTwo) {
  Fixture fx;
  RolloutOptions o;
  o.chunks = 12;
  o.track_windows = true;
  RolloutResult r = run(fx, o);
  std::vector<std::vector<std::vector<WindowView::SlotInfo>>> by_chunk(o.chunks);
  for (std::size_t i = 0; i < r.windows.size(); ++i) by_chunk[r.window_chunk[i]].push_back(r.windows[i]);
  ASSERT_EQ(by_chunk[2].size(), o.schedule.steps());
  for (std::size_t n = 3; n < o.chunks; ++n) EXPECT_EQ(by_chunk[n], by_chunk[2]) << "chunk " << n;
  EXPECT_EQ(by_chunk[2][0].size(), 8u);
}

TEST(Rollout, PerChunkCostDoesNotGrow) {
  Fixture fx;
  RolloutOptions o;
  o.chunks = 21;
  double early = 1e9, late = 1e9;
  for (int rep = 0; rep < 5; ++rep) {
    RolloutResult r = run(fx, o, 40 + rep);
    early = std::min(early, r.chunk_seconds[2]);
    late = std::min(late, r.chunk_seconds[20]);
  }
  EXPECT_LT(late / early, 1.5);
}

// Under every anchored policy the first cached block is frame 0 of the first
// chunk; cached content is identical across all policies.
TEST(Rollout, PoliciesShareFirstChunkCache) {
  Fixture fx;
  std::vector<AnchorCache> first;
  for (const auto& policy : testing::all_policies()) {
    RolloutOptions o;
    o.policy = policy;
    o.chunks = 1;
    o.keep_snapshots = true;
    first.push_back(run(fx, o).snapshots[0]);
  }
  for (const auto& c : first) {
    ASSERT_EQ(c.content_window().size(), first[0].content_window().size());
    for (std::size_t i = 0; i < c.content_window().size(); ++i)
      EXPECT_TRUE(testing::same_kv(c.content_window()[i].kv, first[0].content_window()[i].kv));
    if (!c.anchor().empty()) EXPECT_TRUE(testing::same_kv(c.anchor()[0].kv, first[0].anchor()[0].kv));
  }
}

std::vector<double> param_grad(const Fixture& fx, StateCarry carry, GradientPath path) {
  ModelParams p = fx.params.clone();
  RolloutOptions o;
  o.chunks = 3;
  o.state_carry = carry;
  o.gradient_path = path;
  RolloutResult r = rollout(p, &fx.scene, o, SeededRng(77));
  backward(sum(square(r.content[2])));
  std::vector<double> g;
  for (auto& [name, t] : p.named()) g.insert(g.end(), t->grad().begin(), t->grad().end());
  return g;
}

TEST(Rollout, DetachedStateMatchesConstantState) {
  Fixture fx;
  for (auto path : {GradientPath::kFinalStep, GradientPath::kFull}) {
    EXPECT_EQ(param_grad(fx, StateCarry::kDetached, path), param_grad(fx, StateCarry::kConstant, path));
  }
}

TEST(Rollout, LiveStateChangesFullPathGradient) {
  Fixture fx;
  EXPECT_NE(param_grad(fx, StateCarry::kLive, GradientPath::kFull),
            param_grad(fx, StateCarry::kConstant, GradientPath::kFull));
}

TEST(Rollout, NextChunkLossHasNoGradientThroughState) {
  Fixture fx;
  RolloutOptions o;
  o.chunks = 3;
  o.gradient_path = GradientPath::kFull;
  ModelParams p = fx.params.clone();
  RolloutResult r = rollout(p, &fx.scene, o, SeededRng(3));
  EXPECT_FALSE(r.states[1].requires_grad());
  EXPECT_TRUE(r.content[2].requires_grad());
}

}  // namespace
}  // namespace adastate
