// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

// adastate: train, generate, probe, compare and gradcheck workflows.
// Exit codes: 0 success, 1 runtime failure, 2 config error, 3 verification failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "adastate/experiment.hpp"

namespace fs = std::filesystem;
using namespace adastate;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kConfigError = 2;
constexpr int kVerificationFailure = 3;

struct Flags {
  std::string config;
  std::string checkpoint;
  std::vector<std::string> policies;
  std::optional<std::size_t> chunks;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool include_t0 = false;
  std::optional<double> alpha;
  std::string trace;
};

ExperimentConfig resolve_config(const Flags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (!f.policies.empty()) c.policy.name = f.policies.front();
  if (f.chunks) c.chunks = *f.chunks;
  if (f.seed) c.seed = *f.seed;
  if (!f.out.empty()) c.out = f.out;
  if (f.alpha) c.training.alpha = *f.alpha;
  if (f.include_t0) c.probe.include_t0 = true;
  c.validate();
  return c;
}

/// The config a checkpoint was trained under, if its run directory has one.
std::optional<ExperimentConfig> training_config_of(const fs::path& checkpoint) {
  const fs::path cfg = checkpoint.parent_path() / "config.json";
  if (!fs::exists(cfg)) return std::nullopt;
  try {
    return load_config(cfg);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

int cmd_train(const Flags& f) {
  const ExperimentConfig c = resolve_config(f);
  std::optional<fs::path> resume;
  if (!f.checkpoint.empty()) resume = f.checkpoint;
  const auto res = train_experiment(c, c.out, resume, &std::cerr);
  std::cout << "trained " << res.iterations_run << " iterations (now at " << res.state.iteration << "); checkpoint "
            << (fs::path(c.out) / "checkpoint").string() << "\n";
  return 0;
}

int cmd_generate(const Flags& f) {
  const ExperimentConfig c = resolve_config(f);
  if (f.checkpoint.empty()) throw ConfigError("--checkpoint", "generate needs a checkpoint");
  const TrainState st = load_checkpoint(f.checkpoint, c.training);
  if (st.ema.config != c.model) throw ConfigError("model", "checkpoint model does not match the configured model");
  if (auto trained = training_config_of(f.checkpoint)) {
    if (trained->policy.name != c.policy.name) {
      std::cerr << "warning: checkpoint was trained with policy " << trained->policy.name << ", sampling with "
                << c.policy.name << "\n";
    }
    if (trained->chunks != c.chunks) {
      std::cerr << "warning: checkpoint was trained on " << trained->chunks << " chunks, sampling " << c.chunks << "\n";
    }
  }
  const fs::path out = c.out;
  echo_config(out, c);
  const SceneSpec scene = c.scene_spec();
  const RolloutOptions ro = c.rollout_options();
  const SeededRng base(c.eval.seed, 0xe7a1);
  std::ofstream manifest(out / "rollouts.jsonl");
  std::vector<SceneSequence> seqs;
  double dyn = 0.0, cons = 0.0;
  std::size_t max_cached = 0;
  for (std::size_t k = 0; k < c.eval.sequences; ++k) {
    NoGradGuard ng;
    RolloutOptions o = ro;
    o.sequence_id = static_cast<long>(k);
    const RolloutResult r = rollout(st.ema, &scene, o, base.fork(k));
    json line = dump_rollout(out / "tensors", "r" + std::to_string(k), r);
    line["rollout"] = k;
    line["policy"] = c.policy.name;
    line["seed"] = c.seed;
    line["eval_seed"] = c.eval.seed;
    line["schedule"] = c.schedule.levels;
    manifest << line.dump() << "\n";
    SceneSequence s;
    s.component = static_cast<std::size_t>(std::max(0L, r.teacher_component));
    s.frames = decode_content(r.content_latents());
    dyn += dynamics_metric(s.frames) / static_cast<double>(c.eval.sequences);
    cons += consistency_metric(s.frames, scene.mean(s.component, 0)) / static_cast<double>(c.eval.sequences);
    max_cached = std::max(max_cached, r.max_cached_frames);
    seqs.push_back(std::move(s));
  }
  const long last = static_cast<long>(seqs.front().frames.size()) - 1;
  const double drift =
      drift_tracking_error(scene, seqs, std::min(c.eval.drift_from, last), std::min(c.eval.drift_to, last));
  const json metrics = {{"rollouts", c.eval.sequences},
                        {"frames_per_rollout", seqs.front().frames.size()},
                        {"dynamics", dyn},
                        {"consistency", cons},
                        {"drift_error", drift},
                        {"max_cached_frames", max_cached}};
  write_json(out / "metrics.json", metrics);
  std::cout << metrics.dump(2) << "\n";
  return 0;
}

int cmd_probe(const Flags& f) {
  const ExperimentConfig c = resolve_config(f);
  std::vector<AttentionRecord> records;
  if (!f.trace.empty()) {
    std::ifstream in(f.trace);
    if (!in) throw std::runtime_error("cannot open trace " + f.trace);
    records = read_records(in);
  } else {
    ModelParams p = f.checkpoint.empty() ? ModelParams::init(c.model, SeededRng(c.seed, 0x1417).fork(1))
                                         : load_checkpoint(f.checkpoint, c.training).ema;
    records = probe_records(p, c, thread_budget());
  }
  const ProbeRun run = run_probe(std::move(records), c.probe.depths, c.probe.include_t0);
  write_probe(c.out, run);
  for (const auto& w : run.aggregate.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << probe_summary(run).dump(2) << "\n";
  return 0;
}

int cmd_compare(const Flags& f) {
  ExperimentConfig c = resolve_config(f);
  if (!f.policies.empty()) c.compare.policies = f.policies;
  c.validate();
  std::optional<fs::path> ckpt;
  if (!f.checkpoint.empty()) ckpt = f.checkpoint;
  const CompareReport rep = compare_policies(c, c.out, ckpt, thread_budget(), &std::cerr);
  write_compare_report(c.out, rep);
  print_compare_report(std::cout, rep);
  return 0;
}

int cmd_gradcheck(const Flags& f) {
  const ExperimentConfig c = resolve_config(f);
  GradcheckOptions o = GradcheckOptions::toy();
  o.cache = c.cache;
  o.schedule = c.schedule;
  o.alpha = c.training.alpha;
  o.seed = c.seed;
  const auto checks = run_gradchecks(o);
  print_checks(std::cout, checks);
  for (const auto& ch : checks)
    if (!ch.passed) return kVerificationFailure;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptive-state streaming diffusion toolkit"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "Override the experiment seed");
    sub->add_option("--out", f.out, "Output directory");
  };
  auto* train = app.add_subcommand("train", "Train a generator with horizon-weighted DMD");
  common(train);
  train->add_option("--checkpoint", f.checkpoint, "Resume from this checkpoint directory");
  train->add_option("--alpha", f.alpha, "Horizon weight slope");
  train->add_option("--policy", f.policies, "Anchor policy")->expected(1);
  train->add_option("--chunks", f.chunks, "Rollout length in chunks");

  auto* gen = app.add_subcommand("generate", "Sample rollouts from a checkpoint");
  common(gen);
  gen->add_option("--checkpoint", f.checkpoint, "Checkpoint directory")->required();
  gen->add_option("--policy", f.policies, "Anchor policy")->expected(1);
  gen->add_option("--chunks", f.chunks, "Rollout length in chunks");

  auto* probe = app.add_subcommand("probe", "Attention-mass probe by cache depth");
  common(probe);
  probe->add_option("--checkpoint", f.checkpoint, "Checkpoint directory (untrained model if absent)");
  probe->add_option("--trace", f.trace, "Analyze a JSON-lines record dump instead of running a model")
      ->check(CLI::ExistingFile);
  probe->add_flag("--include-t0", f.include_t0, "Keep clean cache-rerun records");
  probe->add_option("--chunks", f.chunks, "Rollout length in chunks");

  auto* cmp = app.add_subcommand("compare", "Compare anchor policies across seeds");
  common(cmp);
  cmp->add_option("--checkpoint", f.checkpoint, "Root of pre-trained checkpoints");
  cmp->add_option("--policy", f.policies, "Policies to compare (repeatable)");
  cmp->add_option("--alpha", f.alpha, "Horizon weight slope");
  cmp->add_option("--chunks", f.chunks, "Rollout length in chunks");

  auto* gc = app.add_subcommand("gradcheck", "Gradient and oracle checks at toy dimensions");
  common(gc);
  gc->add_option("--alpha", f.alpha, "Horizon weight slope");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*train) return cmd_train(f);
    if (*gen) return cmd_generate(f);
    if (*probe) return cmd_probe(f);
    if (*cmp) return cmd_compare(f);
    if (*gc) return cmd_gradcheck(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kRuntimeFailure;
}
