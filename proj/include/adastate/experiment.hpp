// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "adastate/dmd.hpp"
#include "adastate/gradcheck.hpp"
#include "adastate/io.hpp"
#include "adastate/probe.hpp"
#include "adastate/rollout.hpp"
#include "adastate/scene.hpp"

namespace adastate {

// ---------------------------------------------------------------------------
// Parallelism

/// Worker count: ADASTATE_THREADS if set, else the hardware concurrency.
inline std::size_t thread_budget() {
  if (const char* env = std::getenv("ADASTATE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError("ADASTATE_THREADS", std::string("expected a positive integer, got '") + env + "'");
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(0..n-1) on up to `threads` workers. Jobs must write disjoint
/// outputs; the first exception is rethrown after all workers stop.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Training

struct TrainOutcome {
  TrainState state;
  std::size_t iterations_run = 0;
};

/// Trains from scratch (or from `resume`) up to cfg.training.iterations.
/// Writes config echo, metrics.jsonl (header line, then one line per
/// iteration), periodic checkpoints under checkpoints/ and the final
/// checkpoint under checkpoint/. Iteration k always draws from
/// fork(k) of the seed stream, so a resumed run matches an uninterrupted one.
inline TrainOutcome train_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                     const std::optional<std::filesystem::path>& resume = std::nullopt,
                                     std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  echo_config(out, cfg);
  TrainOutcome res;
  res.state = resume ? load_checkpoint(*resume, cfg.training) : TrainState::create(cfg.model, cfg.training, cfg.seed);
  if (res.state.generator.config != cfg.model) {
    throw ConfigError("model", "checkpoint model does not match the configured model");
  }
  const SceneSpec scene = cfg.scene_spec();
  const RolloutOptions ro = cfg.rollout_options();
  std::ofstream metrics(out / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + (out / "metrics.jsonl").string());
  metrics << json{{"header", true},
                  {"alpha", cfg.training.alpha},
                  {"policy", cfg.policy.name},
                  {"seed", cfg.seed},
                  {"start_iteration", res.state.iteration},
                  {"iterations", cfg.training.iterations},
                  {"version", ADASTATE_VERSION}}
                 .dump()
          << "\n";
  SeededRng stream(cfg.seed, 0x7a1);
  while (res.state.iteration < cfg.training.iterations) {
    const std::size_t it = res.state.iteration;
    IterationMetrics m;
    try {
      m = train_iteration(res.state, scene, ro, cfg.training, stream.fork(it));
    } catch (const NumericError&) {
      save_checkpoint(out / "diagnostic", res.state);
      throw;
    }
    metrics << metrics_json(m).dump() << "\n";
    ++res.iterations_run;
    if (log && (it % 100 == 0 || res.state.iteration == cfg.training.iterations)) {
      *log << "iter " << it << " loss " << m.loss << " critic " << m.critic_loss << " |g| " << m.grad_norm << "\n";
    }
    if (cfg.checkpoint_every > 0 && res.state.iteration % cfg.checkpoint_every == 0 &&
        res.state.iteration < cfg.training.iterations) {
      std::ostringstream name;
      name << "iter" << std::setw(6) << std::setfill('0') << res.state.iteration;
      save_checkpoint(out / "checkpoints" / name.str(), res.state);
    }
  }
  metrics.flush();
  save_checkpoint(out / "checkpoint", res.state);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalMetrics {
  double dynamics = 0.0;
  double consistency = 0.0;
  double drift_error = 0.0;
  std::size_t sequences = 0;
};

/// Toy metrics over `ec.sequences` rollouts of `params` (sequence k uses
/// fork(k) of the evaluation seed, so policies see the same first chunks).
/// Consistency uses the generating component's frame-0 mean as template.
inline EvalMetrics evaluate(const ModelParams& params, const SceneSpec& scene, const RolloutOptions& ro,
                            const EvalConfig& ec, std::size_t threads = 1) {
  std::vector<SceneSequence> seqs(ec.sequences);
  std::vector<double> dyn(ec.sequences), cons(ec.sequences);
  const SeededRng base(ec.seed, 0xe7a1);
  parallel_for(ec.sequences, threads, [&](std::size_t k) {
    NoGradGuard ng;
    RolloutOptions o = ro;
    o.sequence_id = static_cast<long>(k);
    const RolloutResult r = rollout(params, &scene, o, base.fork(k));
    if (r.teacher_component < 0) throw std::invalid_argument("evaluate: needs a scene-sampled first chunk");
    seqs[k].component = static_cast<std::size_t>(r.teacher_component);
    seqs[k].frames = decode_content(r.content_latents());
    dyn[k] = dynamics_metric(seqs[k].frames);
    cons[k] = consistency_metric(seqs[k].frames, scene.mean(seqs[k].component, 0));
  });
  EvalMetrics m;
  m.sequences = ec.sequences;
  for (std::size_t k = 0; k < ec.sequences; ++k) {
    m.dynamics += dyn[k] / static_cast<double>(ec.sequences);
    m.consistency += cons[k] / static_cast<double>(ec.sequences);
  }
  const long last = static_cast<long>(seqs.front().frames.size()) - 1;
  m.drift_error = drift_tracking_error(scene, seqs, std::min(ec.drift_from, last), std::min(ec.drift_to, last));
  return m;
}

// ---------------------------------------------------------------------------
// Policy comparison

struct CompareRow {
  std::string policy;
  std::uint64_t seed = 0;
  EvalMetrics metrics;
};

struct CompareSummary {
  std::string policy;
  double dynamics_mean = 0, dynamics_std = 0;
  double consistency_mean = 0, consistency_std = 0;
  double drift_mean = 0, drift_std = 0;
};

struct CompareReport {
  std::vector<CompareRow> rows;  // policy-major in requested order, then seed order
  std::vector<CompareSummary> summary;

  const CompareRow& row(const std::string& policy, std::uint64_t seed) const {
    for (const auto& r : rows)
      if (r.policy == policy && r.seed == seed) return r;
    throw std::out_of_range("compare: no row for " + policy + " seed " + std::to_string(seed));
  }
};

namespace experiment_detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace experiment_detail

inline std::vector<CompareSummary> summarize(const std::vector<CompareRow>& rows,
                                             const std::vector<std::string>& policies) {
  std::vector<CompareSummary> out;
  for (const auto& p : policies) {
    std::vector<double> d, c, e;
    for (const auto& r : rows) {
      if (r.policy != p) continue;
      d.push_back(r.metrics.dynamics);
      c.push_back(r.metrics.consistency);
      e.push_back(r.metrics.drift_error);
    }
    if (d.empty()) continue;
    CompareSummary s;
    s.policy = p;
    std::tie(s.dynamics_mean, s.dynamics_std) = experiment_detail::mean_std(d);
    std::tie(s.consistency_mean, s.consistency_std) = experiment_detail::mean_std(c);
    std::tie(s.drift_mean, s.drift_std) = experiment_detail::mean_std(e);
    out.push_back(s);
  }
  return out;
}

/// Every (policy, seed) pair of cfg.compare. With `checkpoints`, trained
/// states are read from <checkpoints>/<policy>/seed<k>/checkpoint (per-policy
/// training) or <checkpoints>/seed<k>/checkpoint (shared, policy swapped);
/// missing ones are listed in one error. Without, each job trains its own
/// model under <out>/<policy>/seed<k>. Rows are ordered independently of
/// thread scheduling.
inline CompareReport compare_policies(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                      const std::optional<std::filesystem::path>& checkpoints = std::nullopt,
                                      std::size_t threads = 1, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  const auto& policies = cfg.compare.policies;
  const auto& seeds = cfg.compare.seeds;
  const bool per_policy = cfg.compare.train_per_policy;
  auto train_dir = [&](const fs::path& root, const std::string& policy, std::uint64_t seed) {
    return per_policy ? root / policy / ("seed" + std::to_string(seed)) : root / ("seed" + std::to_string(seed));
  };
  if (checkpoints) {
    std::vector<std::string> missing;
    for (const auto& p : policies)
      for (auto s : seeds) {
        const fs::path d = train_dir(*checkpoints, p, s) / "checkpoint";
        if (!fs::exists(d / "manifest.json")) missing.push_back(d.string());
      }
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    if (!missing.empty()) {
      std::string msg = "compare: missing checkpoints:";
      for (const auto& m : missing) msg += "\n  " + m;
      throw std::runtime_error(msg);
    }
  }
  echo_config(out, cfg);

  // Training jobs: one per (policy, seed), or one per seed when shared.
  std::vector<std::pair<std::string, std::uint64_t>> jobs;
  for (auto s : seeds) {
    if (per_policy) {
      for (const auto& p : policies) jobs.emplace_back(p, s);
    } else {
      jobs.emplace_back(cfg.policy.name, s);
    }
  }
  std::vector<ModelParams> trained(jobs.size());
  std::mutex log_mu;
  parallel_for(jobs.size(), threads, [&](std::size_t j) {
    const auto& [policy, seed] = jobs[j];
    if (checkpoints) {
      trained[j] = load_checkpoint(train_dir(*checkpoints, policy, seed) / "checkpoint", cfg.training).ema;
      return;
    }
    ExperimentConfig c = cfg;
    c.policy.name = policy;
    c.seed = seed;
    trained[j] = train_experiment(c, train_dir(out, policy, seed)).state.ema;
    if (log) {
      std::lock_guard<std::mutex> lock(log_mu);
      *log << "trained " << policy << " seed " << seed << "\n";
    }
  });

  CompareReport rep;
  for (const auto& p : policies)
    for (auto s : seeds) rep.rows.push_back({p, s, {}});
  parallel_for(rep.rows.size(), threads, [&](std::size_t i) {
    CompareRow& row = rep.rows[i];
    std::size_t j = 0;
    while (!(jobs[j].second == row.seed && (!per_policy || jobs[j].first == row.policy))) ++j;
    ExperimentConfig c = cfg;
    c.policy.name = row.policy;
    row.metrics = evaluate(trained[j], cfg.scene_spec(), c.rollout_options(), cfg.eval);
  });
  rep.summary = summarize(rep.rows, policies);
  return rep;
}

inline void write_compare_report(const std::filesystem::path& dir, const CompareReport& rep) {
  std::filesystem::create_directories(dir);
  std::ofstream rows(dir / "compare_rows.csv");
  rows << std::setprecision(17) << "policy,seed,dynamics,consistency,drift_error,sequences\n";
  for (const auto& r : rep.rows) {
    rows << r.policy << "," << r.seed << "," << r.metrics.dynamics << "," << r.metrics.consistency << ","
         << r.metrics.drift_error << "," << r.metrics.sequences << "\n";
  }
  std::ofstream sum(dir / "compare_summary.csv");
  sum << std::setprecision(17)
      << "policy,dynamics_mean,dynamics_std,consistency_mean,consistency_std,drift_mean,drift_std\n";
  for (const auto& s : rep.summary) {
    sum << s.policy << "," << s.dynamics_mean << "," << s.dynamics_std << "," << s.consistency_mean << ","
        << s.consistency_std << "," << s.drift_mean << "," << s.drift_std << "\n";
  }
}

inline void print_compare_report(std::ostream& os, const CompareReport& rep) {
  os << std::fixed << std::setprecision(4);
  os << "policy              seed   dynamics  consistency  drift_err\n";
  for (const auto& r : rep.rows) {
    os << std::left << std::setw(18) << r.policy << std::right << std::setw(6) << r.seed << std::setw(11)
       << r.metrics.dynamics << std::setw(13) << r.metrics.consistency << std::setw(11) << r.metrics.drift_error
       << "\n";
  }
  os << "\npolicy              dynamics           consistency        drift_err\n";
  for (const auto& s : rep.summary) {
    os << std::left << std::setw(18) << s.policy << std::right << "  " << s.dynamics_mean << " +- " << s.dynamics_std
       << "  " << s.consistency_mean << " +- " << s.consistency_std << "  " << s.drift_mean << " +- " << s.drift_std
       << "\n";
  }
  os.unsetf(std::ios::floatfield);
}

// ---------------------------------------------------------------------------
// Attention probe

struct ProbeRun {
  std::vector<AttentionRecord> records;
  AggregateResult aggregate;
};

/// Growing-window rollouts of `params` under cfg.probe with attention recording.
inline std::vector<AttentionRecord> probe_records(const ModelParams& params, const ExperimentConfig& cfg,
                                                  std::size_t threads = 1) {
  const SceneSpec scene = cfg.scene_spec();
  RolloutOptions o = cfg.rollout_options();
  o.policy = AnchorPolicy::parse(cfg.probe.policy);
  o.cache.window_frames = cfg.probe.window_frames;
  o.record_attention = true;
  o.probe_queries = cfg.probe.queries;
  std::vector<std::vector<AttentionRecord>> per(cfg.probe.sequences);
  const SeededRng base(cfg.seed, 0x9b0e);
  parallel_for(cfg.probe.sequences, threads, [&](std::size_t k) {
    NoGradGuard ng;
    RolloutOptions ok = o;
    ok.sequence_id = static_cast<long>(k);
    per[k] = rollout(params, &scene, ok, base.fork(k)).records;
  });
  std::vector<AttentionRecord> all;
  for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
  return all;
}

inline ProbeRun run_probe(std::vector<AttentionRecord> records, const std::vector<std::size_t>& depths,
                          bool include_t0) {
  ProbeRun r;
  r.records = std::move(records);
  r.aggregate = aggregate_depth(r.records, std::set<std::size_t>(depths.begin(), depths.end()), !include_t0);
  return r;
}

inline json probe_summary(const ProbeRun& run) {
  json buckets = json::array();
  for (const auto& b : run.aggregate.buckets) {
    buckets.push_back({{"depth", b.depth},
                       {"records", b.records},
                       {"anchor_rank", anchor_rank(b)},
                       {"freshest_rank", anchor_rank(b, b.depth - 1)}});
  }
  return {{"records", run.records.size()}, {"buckets", buckets}, {"warnings", run.aggregate.warnings}};
}

inline void write_probe(const std::filesystem::path& dir, const ProbeRun& run) {
  std::filesystem::create_directories(dir);
  std::ofstream rec(dir / "records.jsonl");
  write_records(rec, run.records);
  std::ofstream csv(dir / "buckets.csv");
  write_bucket_csv(csv, run.aggregate.buckets);
  write_json(dir / "summary.json", probe_summary(run));
}

// ---------------------------------------------------------------------------
// Gradient and oracle checks

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct GradcheckOptions {
  ModelConfig model;  // toy dimensions: every parameter is finite-differenced
  CacheConfig cache;
  NoiseSchedule schedule;
  double alpha = 2.0;
  std::size_t chunks = 3;
  std::uint64_t seed = 0;
  double fd_step = 1e-5;
  double fd_tolerance = 1e-4;
  StateCarry carry_under_test = StateCarry::kDetached;  // kLive is the negative control

  static GradcheckOptions toy() {
    GradcheckOptions o;
    o.model.layers = 2;
    o.model.heads = 2;
    o.model.head_dim = 4;
    o.model.channels = 2;
    o.model.height = 2;
    o.model.width = 2;
    o.model.time_dim = 4;
    o.model.ffn_mult = 2;
    return o;
  }
};

namespace experiment_detail {

inline std::vector<double> flat_grad(const ModelParams& p) {
  std::vector<double> g;
  for (const auto& [name, t] : p.named()) {
    auto gt = t->grad();
    if (gt.empty()) {
      g.insert(g.end(), t->numel(), 0.0);
    } else {
      g.insert(g.end(), gt.begin(), gt.end());
    }
  }
  return g;
}

/// Weighted DMD loss of one rollout; the boundary records on the first call
/// and replays afterwards, so finite differences see the surrogate the tape
/// differentiates.
struct DmdObjective {
  const GradcheckOptions& o;
  SceneSpec scene;
  ModelParams critic;
  RolloutOptions ro;
  HorizonWeights w;
  DmdLossOptions lo;
  GradientBoundary boundary{GradientBoundary::Mode::kRecord};

  DmdObjective(const GradcheckOptions& opts, GradientPath path)
      : o(opts),
        scene(SceneSpec::desk(opts.model.frame_dim(), 7, 0.25, 0.1)),
        critic(ModelParams::init(critic_config(opts.model), SeededRng(opts.seed, 0xc1))),
        w(horizon_weights(opts.chunks * opts.cache.chunk_frames, opts.alpha)) {
    ro.cache = opts.cache;
    ro.schedule = opts.schedule;
    ro.chunks = opts.chunks;
    ro.gradient_path = path;
    ro.boundary = &boundary;
    lo.gamma = static_cast<double>(opts.model.frame_dim());
    lo.boundary = &boundary;
  }

  Tensor loss(const ModelParams& p) {
    if (boundary.mode() != GradientBoundary::Mode::kRecord) boundary.set_mode(GradientBoundary::Mode::kReplay);
    const RolloutResult r = rollout(p, &scene, ro, SeededRng(o.seed, 0x5a));
    return weighted_dmd_loss(r, w, scene, critic, lo, SeededRng(o.seed, 0xd3)).loss;
  }
};

}  // namespace experiment_detail

/// Autodiff vs central differences of the weighted DMD loss over every
/// generator parameter.
inline CheckResult check_dmd_gradient(const GradcheckOptions& o, GradientPath path) {
  ModelParams p = ModelParams::init(o.model, SeededRng(o.seed, 0x9e));
  experiment_detail::DmdObjective obj(o, path);
  backward(obj.loss(p));
  const std::vector<double> ad = experiment_detail::flat_grad(p);
  obj.boundary.set_mode(GradientBoundary::Mode::kReplay);
  std::vector<double> fd;
  double scale = 0.0;
  for (double g : ad) scale = std::max(scale, std::abs(g));
  for (auto& [name, t] : p.named()) {
    auto data = t->mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + o.fd_step;
      const double up = obj.loss(p).item();
      data[i] = orig - o.fd_step;
      const double down = obj.loss(p).item();
      data[i] = orig;
      fd.push_back((up - down) / (2.0 * o.fd_step));
    }
  }
  // Entries far below the gradient's scale are compared against that scale.
  const double err = max_relative_error(ad, fd, 1e-6 * std::max(1.0, scale));
  CheckResult r;
  r.name = path == GradientPath::kFull ? "dmd_fd_full_path" : "dmd_fd_final_step";
  r.max_error = err;
  r.tolerance = o.fd_tolerance;
  r.passed = err < o.fd_tolerance;
  r.detail = std::to_string(ad.size()) + " generator parameters, error floor 1e-6 * max(1, max abs grad)";
  return r;
}

/// Gradients with the carried state detached must equal those with the state
/// rebuilt as a constant.
inline CheckResult check_state_detach(const GradcheckOptions& o) {
  const ModelParams base = ModelParams::init(o.model, SeededRng(o.seed, 0x9e));
  const SceneSpec scene = SceneSpec::desk(o.model.frame_dim(), 7, 0.25, 0.1);
  auto grads = [&](StateCarry carry) {
    ModelParams p = base.clone();
    RolloutOptions ro;
    ro.cache = o.cache;
    ro.schedule = o.schedule;
    ro.chunks = std::max<std::size_t>(o.chunks, 3);
    ro.gradient_path = GradientPath::kFull;
    ro.state_carry = carry;
    const RolloutResult r = rollout(p, &scene, ro, SeededRng(o.seed, 0x5b));
    backward(sum(square(r.content.back())));
    return experiment_detail::flat_grad(p);
  };
  const auto a = grads(o.carry_under_test), b = grads(StateCarry::kConstant);
  double err = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) err = std::max(err, std::abs(a[i] - b[i]));
  return {"state_detach", err, 0.0, err == 0.0, "max |g_test - g_constant|"};
}

/// Per-frame gradient norms under alpha vs alpha = 0 differ by exactly w_i.
inline CheckResult check_weight_linearity(const GradcheckOptions& o) {
  const std::size_t f = o.cache.chunk_frames, n = o.chunks * f;
  const SceneSpec scene = SceneSpec::desk(o.model.frame_dim(), 7, 0.25, 0.1);
  const ModelParams critic = ModelParams::init(critic_config(o.model), SeededRng(o.seed, 0xc1));
  auto frame_norms = [&](double alpha) {
    SeededRng rng(o.seed, 0x11);
    RolloutResult r;
    r.chunk_frames = f;
    r.tokens_per_frame = o.model.tokens_per_frame();
    r.channels = o.model.channels;
    for (std::size_t c = 0; c < o.chunks; ++c) {
      Tensor x = rng.normal_tensor({f * r.tokens_per_frame, r.channels});
      x.set_requires_grad(true);
      r.content.push_back(x);
    }
    DmdLossOptions lo;
    lo.gamma = static_cast<double>(o.model.frame_dim());
    backward(weighted_dmd_loss(r, horizon_weights(n, alpha), scene, critic, lo, SeededRng(o.seed, 0x12)).loss);
    std::vector<double> norms(n);
    const std::size_t d = o.model.frame_dim();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += std::pow(r.content[i / f].grad()[(i % f) * d + j], 2);
      norms[i] = std::sqrt(s);
    }
    return norms;
  };
  const auto flat = frame_norms(0.0), ramp = frame_norms(o.alpha);
  const auto w = horizon_weights(n, o.alpha);
  double err = 0.0;
  for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(ramp[i] / flat[i] - w.w[i]));
  return {"weight_linearity", err, 1e-10, err < 1e-10, "max |ratio - w_i| over " + std::to_string(n) + " frames"};
}

/// Analytic mixture score vs central differences of the log density.
inline CheckResult check_teacher_score(std::uint64_t seed, std::size_t pairs = 100) {
  const SceneSpec scene = SceneSpec::desk();
  SeededRng rng(seed, 0x7e);
  double err = 0.0;
  for (std::size_t k = 0; k < pairs; ++k) {
    const double t = rng.uniform(0.02, 1.0);
    const long frame = static_cast<long>(rng.uniform(0.0, 21.0));
    std::vector<double> x(scene.dim());
    const auto mu = scene.mean(k % 2, frame);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = (1.0 - t) * mu[j] + t * rng.normal() + 0.1 * rng.normal();
    const auto g = teacher_score(scene, x, frame, t);
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& y) { return scene_log_density(scene, y.data(), frame, t); }, Tensor::vector(x), 1e-5);
    for (std::size_t j = 0; j < x.size(); ++j)
      err = std::max(err, std::abs(fd[j] - g[j]) / std::max(1.0, std::abs(g[j])));
  }
  return {"teacher_score", err, 1e-5, err < 1e-5, std::to_string(pairs) + " random (x, t) pairs"};
}

/// frame_mass against an exhaustive sum on small token counts, plus share sums.
inline CheckResult check_probe_oracle(std::uint64_t seed) {
  SeededRng rng(seed, 0xab);
  double err = 0.0;
  for (std::size_t tokens = 2; tokens <= 8; ++tokens) {
    for (std::size_t per = 1; per <= tokens; ++per) {
      if (tokens % per != 0 || tokens / per < 2) continue;
      AttentionWeights w{2, tokens, tokens, std::vector<double>(2 * tokens * tokens)};
      for (std::size_t r = 0; r < 2 * tokens; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < tokens; ++k) s += w.data[r * tokens + k] = std::exp(rng.normal());
        for (std::size_t k = 0; k < tokens; ++k) w.data[r * tokens + k] /= s;
      }
      std::vector<std::size_t> q(tokens);
      for (std::size_t i = 0; i < tokens; ++i) q[i] = i;
      const auto m = frame_mass(w, q, per);
      double total = 0.0;
      for (std::size_t f = 0; f < tokens / per; ++f) {
        double brute = 0.0;
        for (std::size_t h = 0; h < 2; ++h)
          for (std::size_t qi = 0; qi < tokens; ++qi)
            for (std::size_t k = 0; k < tokens; ++k)
              if (k / per == f) brute += w.at(h, qi, k);
        err = std::max(err, std::abs(m[f] - brute / static_cast<double>(2 * tokens)));
        total += m[f];
      }
      err = std::max(err, std::abs(total - 1.0));
      const auto s = offdiag_share(m, 1);
      double ssum = 0.0;
      for (double v : s) ssum += v;
      err = std::max(err, std::abs(ssum - 1.0));
    }
  }
  return {"probe_oracle", err, 1e-12, err < 1e-12, "frame_mass vs exhaustive sums, share normalization"};
}

inline std::vector<CheckResult> run_gradchecks(const GradcheckOptions& o) {
  return {check_dmd_gradient(o, GradientPath::kFinalStep),
          check_dmd_gradient(o, GradientPath::kFull),
          check_state_detach(o),
          check_weight_linearity(o),
          check_teacher_score(o.seed),
          check_probe_oracle(o.seed)};
}

inline void print_checks(std::ostream& os, const std::vector<CheckResult>& checks) {
  for (const auto& c : checks) {
    os << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(20) << c.name << std::right
       << " max_err=" << std::scientific << std::setprecision(3) << c.max_error << " tol=" << c.tolerance
       << std::defaultfloat << "  " << c.detail << "\n";
  }
}

}  // namespace adastate
