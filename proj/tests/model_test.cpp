// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "adastate/model.hpp"
#include "adastate/rollout.hpp"
#include "test_util.hpp"

namespace adastate {
namespace {

using testing::tiny_config;

TEST(RopePhase, IndexZeroIsIdentity) {
  SeededRng rng(1);
  auto key = rng.normal_vector(16);
  auto rotated = key;
  rope_phase(0, 8).apply(rotated, 8);
  EXPECT_EQ(rotated, key);
}

TEST(RopePhase, OddHeadDimIsRejected) { EXPECT_THROW(rope_phase(3, 7), ShapeError); }

TEST(RopePhase, NegativeIndexIsRejected) { EXPECT_THROW(rope_phase(-1, 8), std::invalid_argument); }

TEST(RopePhase, PreservesNorm) {
  SeededRng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto key = rng.normal_vector(8);
    double before = 0, after = 0;
    for (double v : key) before += v * v;
    rope_phase(1 + trial, 8).apply(key, 8);
    for (double v : key) after += v * v;
    EXPECT_NEAR(std::sqrt(after), std::sqrt(before), 1e-10);
  }
}

TEST(RopePhase, AnglesFollowGeometricSchedule) {
  auto p = rope_phase(3, 8, 10000.0);
  ASSERT_EQ(p.angles.size(), 4u);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(p.angles[j], 3.0 * std::pow(10000.0, -2.0 * j / 8.0));
}

TEST(RopePhase, MatchesTensorRope) {
  SeededRng rng(3);
  Tensor x = rng.normal_tensor({2, 8});
  Tensor y = rope(x, {5, 5}, 4);
  auto v = x.values();
  rope_phase(5, 4).apply(v, 4);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(v[i], y[i], 1e-15);
}

// A cached frame rotated for slot 2 is the same whether the window belongs to
// chunk 3 or chunk 30: phases depend only on the slot.
TEST(RopePhase, DependsOnlyOnSlot) {
  SeededRng rng(4);
  const auto key = rng.normal_vector(16);
  auto at_chunk3 = key, at_chunk30 = key;
  rope_phase(2, 16).apply(at_chunk3, 16);
  rope_phase(2, 16).apply(at_chunk30, 16);
  EXPECT_EQ(at_chunk3, at_chunk30);
}

TEST(Attention, UniformLogitsGiveEqualWeights) {
  Tensor q = Tensor::zeros({1, 4});
  SeededRng rng(5);
  Tensor k = rng.normal_tensor({4, 4});
  Tensor v = rng.normal_tensor({4, 4});
  AttentionWeights w;
  attention(q, k, v, 1, {}, &w);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(w.at(0, 0, j), 0.25);
}

TEST(Attention, RowsAreProbabilityVectors) {
  SeededRng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    AttentionWeights w;
    attention(rng.normal_tensor({5, 8}), rng.normal_tensor({7, 8}), rng.normal_tensor({7, 8}), 2, {}, &w);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t q = 0; q < 5; ++q) {
        double s = 0;
        for (std::size_t k = 0; k < 7; ++k) {
          EXPECT_GE(w.at(h, q, k), 0.0);
          s += w.at(h, q, k);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

// Dense-mask oracle: hiding a key group gives exactly the result of leaving it out.
TEST(Attention, MaskedGroupEqualsAbsentGroup) {
  SeededRng rng(7);
  Tensor q = rng.normal_tensor({3, 4});
  Tensor k = rng.normal_tensor({6, 4});
  Tensor v = rng.normal_tensor({6, 4});
  std::vector<std::uint8_t> mask(3 * 6, 1);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 4; c < 6; ++c) mask[r * 6 + c] = 0;
  Tensor masked = attention(q, k, v, 2, mask);
  Tensor absent = attention(q, slice_rows(k, 0, 4), slice_rows(v, 0, 4), 2);
  for (std::size_t i = 0; i < masked.numel(); ++i) EXPECT_NEAR(masked[i], absent[i], 1e-14);
}

TEST(Attention, EmptyWindowIsRejected) {
  EXPECT_THROW(attention(Tensor::zeros({1, 4}), Tensor::zeros({0, 4}), Tensor::zeros({0, 4}), 1), ShapeError);
}

ForwardSpec live_only(std::size_t frames, double t) {
  ForwardSpec spec;
  for (std::size_t i = 0; i < frames; ++i) spec.live.push_back({t, static_cast<int>(i), -1});
  return spec;
}

TEST(ModelDenoise, ZeroParamsGiveZeroOutput) {
  const auto cfg = tiny_config();
  ModelParams p = ModelParams::zeros(cfg);
  SeededRng rng(8);
  Tensor x = rng.normal_tensor({3 * cfg.tokens_per_frame(), cfg.channels});
  Tensor y = model_denoise(p, x, 0.5, live_only(3, 0.5));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(ModelDenoise, OutputShapeMatchesLiveFrames) {
  ModelConfig cfg;
  SeededRng rng(9);
  ModelParams p = ModelParams::init(cfg, rng);
  for (std::size_t frames : {1u, 4u}) {
    Tensor x = rng.normal_tensor({frames * cfg.tokens_per_frame(), cfg.channels});
    EXPECT_EQ(model_denoise(p, x, 0.3, live_only(frames, 0.3)).shape(), x.shape());
  }
}

TEST(ModelDenoise, RepeatedEvaluationIsBitIdentical) {
  const auto cfg = tiny_config();
  SeededRng rng(10);
  ModelParams p = ModelParams::init(cfg, rng);
  Tensor x = rng.normal_tensor({2 * cfg.tokens_per_frame(), cfg.channels});
  EXPECT_EQ(model_denoise(p, x, 0.7, live_only(2, 0.7)).values(),
            model_denoise(p, x, 0.7, live_only(2, 0.7)).values());
}

TEST(ModelDenoise, NoiseLevelOutsideUnitIntervalIsRejected) {
  const auto cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, SeededRng(11));
  Tensor x = Tensor::zeros({cfg.tokens_per_frame(), cfg.channels});
  EXPECT_THROW(model_denoise(p, x, 1.5, live_only(1, 0.0)), std::invalid_argument);
  EXPECT_THROW(model_denoise(p, x, -0.1, live_only(1, 0.0)), std::invalid_argument);
}

TEST(ModelDenoise, NanLogitsNameTheLayer) {
  const auto cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, SeededRng(12));
  p.layers[1].wq.mutable_data()[0] = std::nan("");
  Tensor x = Tensor::full({cfg.tokens_per_frame(), cfg.channels}, 1.0);
  try {
    model_denoise(p, x, 0.5, live_only(1, 0.5));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(ModelConfig, ValidationRejectsBadShapes) {
  ModelConfig c;
  c.head_dim = 7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.layers = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(ModelConfig{}.tokens_per_frame(), 16u);
  EXPECT_EQ(ModelConfig{}.model_dim(), 64u);
}

TEST(ModelParams, ReportsParameterCountAndClonesDeeply) {
  const auto cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, SeededRng(13));
  std::size_t n = 0;
  for (auto& [name, t] : p.named()) n += t->numel();
  EXPECT_EQ(p.parameter_count(), n);
  ModelParams q = p.clone();
  q.in_w.mutable_data()[0] += 1.0;
  EXPECT_NE(q.in_w[0], p.in_w[0]);
}

// Every parameter tensor receives a nonzero gradient from a generic rollout loss.
TEST(ModelParams, NoDeadParameters) {
  const auto cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, SeededRng(14));
  auto scene = testing::tiny_scene();
  RolloutOptions o;
  o.chunks = 3;
  RolloutResult r = rollout(p, &scene, o, SeededRng(15));
  Tensor loss = Tensor::scalar(0.0);
  for (std::size_t c = 1; c < r.content.size(); ++c) loss = add(loss, sum(square(add_scalar(r.content[c], 0.3))));
  backward(loss);
  for (auto& [name, t] : p.named()) {
    double s = 0;
    for (double g : t->grad()) s += std::abs(g);
    EXPECT_GT(s, 0.0) << name;
  }
}

TEST(ModelParams, CriticFrameEmbeddingReceivesGradient) {
  auto cfg = tiny_config();
  cfg.frame_index_embedding = true;
  ModelParams p = ModelParams::init(cfg, SeededRng(16));
  ForwardSpec spec;
  spec.live = {{0.4, 0, 5}, {0.6, 1, 6}};
  SeededRng rng(17);
  backward(sum(square(model_forward(p, rng.normal_tensor({2 * cfg.tokens_per_frame(), cfg.channels}), spec).x0)));
  double s = 0;
  for (double g : p.frame_w.grad()) s += std::abs(g);
  EXPECT_GT(s, 0.0);
}

}  // namespace
}  // namespace adastate
