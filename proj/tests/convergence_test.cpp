// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

// Slow end-to-end check: DMD training on a stationary single Gaussian moves the
// generated frame distribution toward the teacher.

#include <gtest/gtest.h>

#include "adastate/experiment.hpp"

namespace adastate {
namespace {

std::vector<std::vector<double>> generated_frames(const ModelParams& p, const SceneSpec& scene,
                                                  const RolloutOptions& ro, std::size_t n) {
  NoGradGuard ng;
  std::vector<std::vector<double>> out;
  const SeededRng rng(5);
  for (std::uint64_t k = 0; out.size() < n; ++k) {
    const LatentFrames lf = rollout(p, &scene, ro, rng.fork(k)).content_latents();
    // Chunk 0 is teacher context when teacher_first_chunk is set; skip it.
    for (std::size_t i = ro.cache.chunk_frames; i < lf.frames.size() && out.size() < n; ++i)
      out.push_back(lf.frames[i]);
  }
  return out;
}

TEST(Convergence, StationaryGaussianEnergyDistanceHalves) {
  const ExperimentConfig cfg = load_config(ADASTATE_CONFIG_DIR "/stationary_gaussian.json");
  const SceneSpec scene = cfg.scene_spec();
  const RolloutOptions ro = cfg.rollout_options();
  ASSERT_TRUE(ro.teacher_first_chunk);

  SeededRng trng(99);
  std::vector<std::vector<double>> teacher;
  for (int i = 0; i < 256; ++i) teacher.push_back(gen_scene_sequence(scene, 1, trng).frames[0]);

  TrainState st = TrainState::create(cfg.model, cfg.training, cfg.seed);
  const double before = energy_distance(generated_frames(st.generator, scene, ro, 256), teacher);
  const SeededRng rng(cfg.seed, 0x7a11);
  for (std::size_t i = 0; i < cfg.training.iterations; ++i) train_iteration(st, scene, ro, cfg.training, rng.fork(i));
  const double after = energy_distance(generated_frames(st.generator, scene, ro, 256), teacher);
  RecordProperty("energy_distance_init", std::to_string(before));
  RecordProperty("energy_distance_trained", std::to_string(after));
  std::cout << "energy distance " << before << " -> " << after << "\n";
  EXPECT_LE(after, 0.5 * before);
}

}  // namespace
}  // namespace adastate
