// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "adastate/experiment.hpp"
#include "test_util.hpp"

namespace adastate {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("adastate_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

json tiny_config_json() {
  return {{"model",
           {{"layers", 2}, {"heads", 2}, {"head_dim", 4}, {"channels", 2}, {"height", 2}, {"width", 2},
            {"time_dim", 4}, {"ffn_mult", 2}}},
          {"training", {{"iterations", 4}, {"checkpoint_every", 2}}},
          {"eval", {{"sequences", 3}}},
          {"probe", {{"sequences", 2}}},
          {"compare", {{"policies", {"adaptive", "static-sink"}}, {"seeds", {3, 4}}}},
          {"seed", 5}};
}

ExperimentConfig tiny_experiment() { return config_from_json(tiny_config_json()); }

std::size_t count_lines(const fs::path& p, const std::string& needle) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) n += line.find(needle) != std::string::npos;
  return n;
}

TEST(ExperimentConfig, DefaultsMatchWindowStructure) {
  const ExperimentConfig c = config_from_json(json::object());
  EXPECT_EQ(c.cache.chunk_frames, 3u);
  EXPECT_EQ(c.cache.state_frames, 1u);
  EXPECT_EQ(c.cache.window_frames, 3u);
  EXPECT_EQ(c.schedule.steps(), 4u);
  EXPECT_EQ(c.chunks, 7u);
  EXPECT_EQ(c.scene_spec().dim(), 64u);
}

TEST(ExperimentConfig, UnknownKeysNameTheField) {
  auto j = tiny_config_json();
  j["training"]["alhpa"] = 2.0;
  try {
    config_from_json(j);
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "training.alhpa");
  }
  j = tiny_config_json();
  j["extra"] = 1;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(ExperimentConfig, WrongTypesAndInvalidValuesAreFieldErrors) {
  auto j = tiny_config_json();
  j["cache"]["window_frames"] = -3;
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "cache.window_frames");
  }
  j = tiny_config_json();
  j["policy"]["name"] = "sometimes";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = tiny_config_json();
  j["scene"]["dim"] = 7;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(ExperimentConfig, EchoRoundTripsExactly) {
  auto j = tiny_config_json();
  j["scene"] = {{"preset", "explicit"},
                {"mode", "stationary"},
                {"components", {{{"weight", 1.0}, {"mean", std::vector<double>(8, 0.5)}, {"var", std::vector<double>(8, 1.0)}}}}};
  const ExperimentConfig c = config_from_json(j);
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  EXPECT_EQ(c.scene_spec().components[0].mean[3], 0.5);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const fs::path d = scratch_dir("ckpt");
  const ExperimentConfig c = tiny_experiment();
  TrainState st = TrainState::create(c.model, c.training, 9);
  train_iteration(st, c.scene_spec(), c.rollout_options(), c.training, SeededRng(1));
  save_checkpoint(d, st);
  TrainState back = load_checkpoint(d, c.training);
  EXPECT_EQ(back.iteration, st.iteration);
  auto a = st.generator.named(), b = back.generator.named();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].second->values(), b[i].second->values()) << a[i].first;
    EXPECT_TRUE(b[i].second->requires_grad()) << a[i].first;
  }
  EXPECT_EQ(back.critic_opt.first_moments(), st.critic_opt.first_moments());
  EXPECT_EQ(back.generator_opt.steps(), st.generator_opt.steps());
}

TEST(TrainExperiment, EmitsOneMetricsLinePerIterationAndCheckpoints) {
  const fs::path d = scratch_dir("train");
  const auto res = train_experiment(tiny_experiment(), d);
  EXPECT_EQ(res.iterations_run, 4u);
  EXPECT_EQ(count_lines(d / "metrics.jsonl", "\"iter\""), 4u);
  EXPECT_TRUE(fs::exists(d / "checkpoint" / "manifest.json"));
  EXPECT_TRUE(fs::exists(d / "checkpoints" / "iter000002" / "manifest.json"));
  EXPECT_TRUE(fs::exists(d / "config.json"));
  EXPECT_TRUE(fs::exists(d / "run.json"));
  std::ifstream in(d / "metrics.jsonl");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(json::parse(header).at("alpha").get<double>(), 2.0);
}

TEST(TrainExperiment, ResumeMatchesUninterruptedRun) {
  const fs::path a = scratch_dir("resume_a"), b = scratch_dir("resume_b");
  const ExperimentConfig full = tiny_experiment();
  const auto straight = train_experiment(full, a);
  ExperimentConfig half = full;
  half.training.iterations = 2;
  train_experiment(half, b);
  const auto resumed = train_experiment(full, b, b / "checkpoint");
  EXPECT_EQ(resumed.iterations_run, 2u);
  EXPECT_EQ(resumed.state.iteration, 4u);
  auto x = straight.state.ema.named(), y = resumed.state.ema.named();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i].second->values(), y[i].second->values()) << x[i].first;
}

TEST(Records, JsonLinesRoundTrip) {
  std::vector<AttentionRecord> recs(2);
  recs[0] = {1, 2, 3, 4, 0.5, 3, {0.1, 0.2, 0.3, 0.4}};
  recs[1] = {0, 1, 4, 0, 0.0, 3, {0.25, 0.25, 0.5}};
  std::stringstream ss;
  write_records(ss, recs);
  const auto back = read_records(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].masses, recs[0].masses);
  EXPECT_EQ(back[1].t, 0.0);
  EXPECT_EQ(back[0].seq, 4);
  std::stringstream bad("{\"layer\": 1}\n");
  EXPECT_THROW(read_records(bad), FormatError);
}

TEST(CacheSnapshot, ManifestListsSlotsWithNoiseAndIndices) {
  const fs::path d = scratch_dir("snapshot");
  ModelParams p = ModelParams::init(testing::tiny_config(), SeededRng(2));
  RolloutOptions o;
  o.chunks = 3;
  o.keep_snapshots = true;
  NoGradGuard ng;
  const auto scene = testing::tiny_scene();
  const RolloutResult r = rollout(p, &scene, o, SeededRng(3));
  dump_cache_snapshot(d, r.snapshots.back());
  const json m = read_json(d / "manifest.json");
  ASSERT_EQ(m.at("slots").size(), 4u);
  EXPECT_EQ(m["slots"][0]["kind"], "cached-state");
  EXPECT_EQ(m["slots"][0]["origin"], "state");
  // Indices as the next chunk reads them: the live state sits at 1.
  const int expected[] = {0, 2, 3, 4};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(m["slots"][i]["relative_index"], expected[i]);
    EXPECT_EQ(m["slots"][i]["noise"], 0.0);
  }
  const Tensor k0 = load_tensor(d / m["slots"][1]["kv"][0]["keys"].get<std::string>());
  EXPECT_EQ(k0.values(), r.snapshots.back().content_window()[0].kv.keys[0].values());
}

TEST(Evaluate, SameSeedSamePolicyIsDeterministic) {
  const ExperimentConfig c = tiny_experiment();
  const ModelParams p = ModelParams::init(c.model, SeededRng(4));
  const auto a = evaluate(p, c.scene_spec(), c.rollout_options(), c.eval, 1);
  const auto b = evaluate(p, c.scene_spec(), c.rollout_options(), c.eval, 3);
  EXPECT_EQ(a.dynamics, b.dynamics);
  EXPECT_EQ(a.consistency, b.consistency);
  EXPECT_EQ(a.drift_error, b.drift_error);
  EXPECT_GE(a.dynamics, 0.0);
}

TEST(ComparePolicies, RowsCoverRequestSummaryAndAreReproducible) {
  ExperimentConfig c = tiny_experiment();
  c.training.iterations = 2;
  const auto a = compare_policies(c, scratch_dir("cmp_a"), std::nullopt, 2);
  const auto b = compare_policies(c, scratch_dir("cmp_b"), std::nullopt, 1);
  ASSERT_EQ(a.rows.size(), 4u);
  EXPECT_EQ(a.rows[0].policy, "adaptive");
  EXPECT_EQ(a.rows[3].policy, "static-sink");
  EXPECT_EQ(a.rows[3].seed, 4u);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].metrics.drift_error, b.rows[i].metrics.drift_error);
    EXPECT_EQ(a.rows[i].metrics.dynamics, b.rows[i].metrics.dynamics);
  }
  ASSERT_EQ(a.summary.size(), 2u);
  EXPECT_NEAR(a.summary[0].dynamics_mean, 0.5 * (a.rows[0].metrics.dynamics + a.rows[1].metrics.dynamics), 1e-15);
}

TEST(ComparePolicies, MissingCheckpointsAreListed) {
  const ExperimentConfig c = tiny_experiment();
  try {
    compare_policies(c, scratch_dir("cmp_missing"), scratch_dir("cmp_empty"));
    FAIL();
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("adaptive/seed3"), std::string::npos);
    EXPECT_NE(msg.find("static-sink/seed4"), std::string::npos);
  }
}

TEST(Probe, UntrainedModelEmitsNormalizedShares) {
  const ExperimentConfig c = tiny_experiment();
  const ModelParams p = ModelParams::init(c.model, SeededRng(6));
  const auto records = probe_records(p, c);
  const ProbeRun run = run_probe(records, c.probe.depths, false);
  const ProbeRun with_t0 = run_probe(records, c.probe.depths, true);
  ASSERT_FALSE(run.aggregate.buckets.empty());
  for (const auto& b : run.aggregate.buckets) {
    double s = 0.0;
    for (double v : b.shares) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  // The clean rerun adds one record per layer and sequence to each depth.
  for (std::size_t i = 0; i < run.aggregate.buckets.size(); ++i) {
    EXPECT_EQ(with_t0.aggregate.buckets[i].records,
              run.aggregate.buckets[i].records + c.model.layers * c.probe.sequences);
  }
}

TEST(Gradcheck, DefaultChecksPass) {
  for (const auto& c : run_gradchecks(GradcheckOptions::toy())) EXPECT_TRUE(c.passed) << c.name << " " << c.max_error;
}

TEST(Gradcheck, BrokenDetachFailsTheDetachCheck) {
  GradcheckOptions o = GradcheckOptions::toy();
  o.carry_under_test = StateCarry::kLive;
  const CheckResult r = check_state_detach(o);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_error, 0.0);
}

TEST(ThreadBudget, EnvironmentCapsWorkers) {
  setenv("ADASTATE_THREADS", "3", 1);
  EXPECT_EQ(thread_budget(), 3u);
  setenv("ADASTATE_THREADS", "zero", 1);
  EXPECT_THROW(thread_budget(), ConfigError);
  unsetenv("ADASTATE_THREADS");
  EXPECT_GE(thread_budget(), 1u);
}

}  // namespace
}  // namespace adastate
