// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "adastate/anchor_cache.hpp"
#include "adastate/dmd.hpp"
#include "adastate/probe.hpp"
#include "adastate/rollout.hpp"
#include "adastate/scene.hpp"
#include "adastate/tensor_io.hpp"

#ifndef ADASTATE_VERSION
#define ADASTATE_VERSION "0.0.0"
#endif

namespace adastate {

using json = nlohmann::json;

/// Invalid configuration; `path` names the offending field ("training.alpha").
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& msg)
      : std::runtime_error(path.empty() ? msg : path + ": " + msg), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// ---------------------------------------------------------------------------
// Experiment configuration

struct PolicyConfig {
  std::string name = "adaptive";
  double ema_decay = 0.9;
  int period = 2;

  AnchorPolicy resolve() const {
    AnchorPolicy p = AnchorPolicy::parse(name);
    if (p.kind == PolicyKind::kEmaSink) p.ema_decay = ema_decay;
    if (p.kind == PolicyKind::kHeuristicReplace) p.replace_period = period;
    return p;
  }
};

struct SceneConfig {
  std::string preset = "desk";  // "desk" or "explicit"
  std::size_t dim = 0;          // 0: the model's frame dimension
  std::uint64_t seed = 7;
  double sigma = 0.25;
  double speed = 0.1;
  std::string mode = "drifting";
  SceneSpec explicit_spec;

  SceneSpec resolve(std::size_t frame_dim) const {
    if (preset == "explicit") return explicit_spec;
    const SceneMode m = mode == "stationary" ? SceneMode::kStationary : SceneMode::kDrifting;
    return SceneSpec::desk(dim == 0 ? frame_dim : dim, seed, sigma, speed, m);
  }
};

struct EvalConfig {
  std::size_t sequences = 64;
  long drift_from = 15;
  long drift_to = 20;
  std::uint64_t seed = 1234;
};

struct ProbeConfig {
  std::size_t sequences = 5;
  std::size_t window_frames = 18;
  std::string policy = "no-anchor";
  std::vector<std::size_t> depths{3, 6, 9, 12, 15, 18};
  bool include_t0 = false;
  std::size_t queries = 32;
};

struct CompareConfig {
  std::vector<std::string> policies{"adaptive", "static-sink", "sink-state"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  bool train_per_policy = true;  // false: one checkpoint, policy swapped at sampling
};

struct ExperimentConfig {
  ModelConfig model;
  CacheConfig cache;
  PolicyConfig policy;
  NoiseSchedule schedule;
  std::size_t chunks = 7;
  bool teacher_first_chunk = true;
  DmdConfig training;
  std::size_t checkpoint_every = 500;
  SceneConfig scene;
  EvalConfig eval;
  ProbeConfig probe;
  CompareConfig compare;
  std::uint64_t seed = 0;
  std::string out = "runs/default";

  SceneSpec scene_spec() const { return scene.resolve(model.frame_dim()); }

  RolloutOptions rollout_options() const {
    RolloutOptions o;
    o.cache = cache;
    o.policy = policy.resolve();
    o.schedule = schedule;
    o.chunks = chunks;
    o.teacher_first_chunk = teacher_first_chunk;
    return o;
  }

  void validate() const {
    auto wrap = [](const char* section, auto&& fn) {
      try {
        fn();
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError(section, e.what());
      }
    };
    wrap("model", [&] { model.validate(); });
    wrap("cache", [&] { cache.validate(); });
    wrap("policy", [&] { policy.resolve().validate(); });
    wrap("schedule", [&] { schedule.validate(); });
    wrap("training", [&] { training.validate(); });
    if (chunks == 0) throw ConfigError("rollout.chunks", "must be >= 1");
    if (scene.mode != "drifting" && scene.mode != "stationary") {
      throw ConfigError("scene.mode", "expected drifting or stationary, got '" + scene.mode + "'");
    }
    if (scene.preset != "desk" && scene.preset != "explicit") {
      throw ConfigError("scene.preset", "expected desk or explicit, got '" + scene.preset + "'");
    }
    const SceneSpec s = scene_spec();
    wrap("scene", [&] { s.validate(); });
    if (s.dim() != model.frame_dim()) {
      throw ConfigError("scene", "frame dimension " + std::to_string(s.dim()) + " differs from the model's " +
                                     std::to_string(model.frame_dim()));
    }
    if (eval.sequences == 0) throw ConfigError("eval.sequences", "must be positive");
    if (eval.drift_from < 0 || eval.drift_to < eval.drift_from) {
      throw ConfigError("eval.drift_from", "need 0 <= drift_from <= drift_to");
    }
    wrap("probe.policy", [&] { AnchorPolicy::parse(probe.policy); });
    if (probe.sequences == 0) throw ConfigError("probe.sequences", "must be positive");
    for (const auto& p : compare.policies) wrap("compare.policies", [&] { AnchorPolicy::parse(p); });
    if (compare.policies.empty()) throw ConfigError("compare.policies", "empty");
    if (compare.seeds.empty()) throw ConfigError("compare.seeds", "empty");
  }
};

namespace io_detail {

/// Strict reader over one JSON object: every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer() || (!it->is_number_unsigned() && it->template get<long long>() < 0)) {
          throw ConfigError(field(key), "expected a non-negative integer");
        }
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer()) throw ConfigError(field(key), "expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(field(key), "expected a number");
      }
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(field(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Reader sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    auto it = j_.find(key);
    return Reader(it == j_.end() ? empty : *it, field(key));
  }

  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace io_detail

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  io_detail::Reader root(j, "");
  {
    auto r = root.sub("model");
    r.get("layers", c.model.layers);
    r.get("heads", c.model.heads);
    r.get("head_dim", c.model.head_dim);
    r.get("channels", c.model.channels);
    r.get("height", c.model.height);
    r.get("width", c.model.width);
    r.get("time_dim", c.model.time_dim);
    r.get("ffn_mult", c.model.ffn_mult);
    r.get("rope_base", c.model.rope_base);
    r.finish();
  }
  {
    auto r = root.sub("cache");
    r.get("chunk_frames", c.cache.chunk_frames);
    r.get("state_frames", c.cache.state_frames);
    r.get("window_frames", c.cache.window_frames);
    r.finish();
  }
  {
    auto r = root.sub("policy");
    r.get("name", c.policy.name);
    r.get("ema_decay", c.policy.ema_decay);
    r.get("period", c.policy.period);
    r.finish();
  }
  {
    auto r = root.sub("schedule");
    r.get("levels", c.schedule.levels);
    r.finish();
  }
  {
    auto r = root.sub("rollout");
    r.get("chunks", c.chunks);
    r.get("teacher_first_chunk", c.teacher_first_chunk);
    r.finish();
  }
  {
    auto r = root.sub("training");
    auto& t = c.training;
    r.get("iterations", t.iterations);
    r.get("alpha", t.alpha);
    r.get("generator_lr", t.generator_lr);
    r.get("critic_lr", t.critic_lr);
    r.get("critic_steps", t.critic_steps);
    r.get("critic_warmup", t.critic_warmup);
    r.get("batch", t.batch);
    r.get("gamma", t.gamma);
    r.get("ema_decay", t.ema_decay);
    r.get("ema_start", t.ema_start);
    r.get("t_min", t.t_min);
    r.get("t_max", t.t_max);
    r.get("weight_first_chunk", t.weight_first_chunk);
    r.get("beta1", t.beta1);
    r.get("beta2", t.beta2);
    r.get("adam_eps", t.adam_eps);
    r.get("weight_decay", t.weight_decay);
    r.get("checkpoint_every", c.checkpoint_every);
    r.finish();
  }
  {
    auto r = root.sub("scene");
    r.get("preset", c.scene.preset);
    r.get("dim", c.scene.dim);
    r.get("seed", c.scene.seed);
    r.get("sigma", c.scene.sigma);
    r.get("speed", c.scene.speed);
    r.get("mode", c.scene.mode);
    if (r.has("components") || r.has("velocity")) {
      if (c.scene.preset != "explicit") throw ConfigError("scene.components", "only valid with preset \"explicit\"");
      SceneSpec& s = c.scene.explicit_spec;
      s.components.clear();
      const json& comps = r.raw("components");
      if (!comps.is_array()) throw ConfigError("scene.components", "expected an array");
      for (std::size_t k = 0; k < comps.size(); ++k) {
        io_detail::Reader cr(comps[k], "scene.components[" + std::to_string(k) + "]");
        SceneComponent comp;
        cr.get("weight", comp.weight);
        cr.get("mean", comp.mean);
        cr.get("var", comp.var);
        cr.finish();
        s.components.push_back(std::move(comp));
      }
      r.get("velocity", s.velocity);
    }
    c.scene.explicit_spec.mode = c.scene.mode == "stationary" ? SceneMode::kStationary : SceneMode::kDrifting;
    r.finish();
  }
  {
    auto r = root.sub("eval");
    r.get("sequences", c.eval.sequences);
    r.get("drift_from", c.eval.drift_from);
    r.get("drift_to", c.eval.drift_to);
    r.get("seed", c.eval.seed);
    r.finish();
  }
  {
    auto r = root.sub("probe");
    r.get("sequences", c.probe.sequences);
    r.get("window_frames", c.probe.window_frames);
    r.get("policy", c.probe.policy);
    r.get("depths", c.probe.depths);
    r.get("include_t0", c.probe.include_t0);
    r.get("queries", c.probe.queries);
    r.finish();
  }
  {
    auto r = root.sub("compare");
    r.get("policies", c.compare.policies);
    r.get("seeds", c.compare.seeds);
    r.get("train_per_policy", c.compare.train_per_policy);
    r.finish();
  }
  root.get("seed", c.seed);
  root.get("out", c.out);
  root.finish();
  c.validate();
  return c;
}

inline json config_to_json(const ExperimentConfig& c) {
  const auto& t = c.training;
  json scene = {{"preset", c.scene.preset}, {"dim", c.scene.dim},     {"seed", c.scene.seed},
                {"sigma", c.scene.sigma},   {"speed", c.scene.speed}, {"mode", c.scene.mode}};
  if (c.scene.preset == "explicit") {
    json comps = json::array();
    for (const auto& k : c.scene.explicit_spec.components)
      comps.push_back({{"weight", k.weight}, {"mean", k.mean}, {"var", k.var}});
    scene["components"] = comps;
    scene["velocity"] = c.scene.explicit_spec.velocity;
  }
  return {
      {"model",
       {{"layers", c.model.layers},
        {"heads", c.model.heads},
        {"head_dim", c.model.head_dim},
        {"channels", c.model.channels},
        {"height", c.model.height},
        {"width", c.model.width},
        {"time_dim", c.model.time_dim},
        {"ffn_mult", c.model.ffn_mult},
        {"rope_base", c.model.rope_base}}},
      {"cache",
       {{"chunk_frames", c.cache.chunk_frames},
        {"state_frames", c.cache.state_frames},
        {"window_frames", c.cache.window_frames}}},
      {"policy", {{"name", c.policy.name}, {"ema_decay", c.policy.ema_decay}, {"period", c.policy.period}}},
      {"schedule", {{"levels", c.schedule.levels}}},
      {"rollout", {{"chunks", c.chunks}, {"teacher_first_chunk", c.teacher_first_chunk}}},
      {"training",
       {{"iterations", t.iterations},
        {"alpha", t.alpha},
        {"generator_lr", t.generator_lr},
        {"critic_lr", t.critic_lr},
        {"critic_steps", t.critic_steps},
        {"critic_warmup", t.critic_warmup},
        {"batch", t.batch},
        {"gamma", t.gamma},
        {"ema_decay", t.ema_decay},
        {"ema_start", t.ema_start},
        {"t_min", t.t_min},
        {"t_max", t.t_max},
        {"weight_first_chunk", t.weight_first_chunk},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"weight_decay", t.weight_decay},
        {"checkpoint_every", c.checkpoint_every}}},
      {"scene", scene},
      {"eval",
       {{"sequences", c.eval.sequences},
        {"drift_from", c.eval.drift_from},
        {"drift_to", c.eval.drift_to},
        {"seed", c.eval.seed}}},
      {"probe",
       {{"sequences", c.probe.sequences},
        {"window_frames", c.probe.window_frames},
        {"policy", c.probe.policy},
        {"depths", c.probe.depths},
        {"include_t0", c.probe.include_t0},
        {"queries", c.probe.queries}}},
      {"compare",
       {{"policies", c.compare.policies},
        {"seeds", c.compare.seeds},
        {"train_per_policy", c.compare.train_per_policy}}},
      {"seed", c.seed},
      {"out", c.out},
  };
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("", path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Resolved config, code version and seed written into an output directory.
inline void echo_config(const std::filesystem::path& dir, const ExperimentConfig& c) {
  std::filesystem::create_directories(dir);
  write_json(dir / "config.json", config_to_json(c));
  write_json(dir / "run.json", {{"version", ADASTATE_VERSION}, {"seed", c.seed}});
}

// ---------------------------------------------------------------------------
// Checkpoints

inline json model_config_json(const ModelConfig& m) {
  return {{"layers", m.layers},       {"heads", m.heads},       {"head_dim", m.head_dim},
          {"channels", m.channels},   {"height", m.height},     {"width", m.width},
          {"time_dim", m.time_dim},   {"ffn_mult", m.ffn_mult}, {"rope_base", m.rope_base},
          {"frame_index_embedding", m.frame_index_embedding}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  try {
    m.layers = j.at("layers");
    m.heads = j.at("heads");
    m.head_dim = j.at("head_dim");
    m.channels = j.at("channels");
    m.height = j.at("height");
    m.width = j.at("width");
    m.time_dim = j.at("time_dim");
    m.ffn_mult = j.at("ffn_mult");
    m.rope_base = j.at("rope_base");
    m.frame_index_embedding = j.at("frame_index_embedding");
  } catch (const json::exception& e) {
    throw FormatError(std::string("model manifest: ") + e.what());
  }
  m.validate();
  return m;
}

/// Writes every tensor of `p` as `<dir>/<prefix>.<name>.adst`; returns the manifest entries.
inline json save_params(const std::filesystem::path& dir, const std::string& prefix, const ModelParams& p) {
  json entries = json::array();
  for (const auto& [name, t] : p.named()) {
    const std::string file = prefix + "." + name + ".adst";
    save_tensor(dir / file, *t);
    entries.push_back({{"name", name}, {"shape", t->shape()}, {"file", file}});
  }
  return {{"config", model_config_json(p.config)}, {"tensors", entries}};
}

inline ModelParams load_params(const std::filesystem::path& dir, const json& entry) {
  ModelParams p = ModelParams::zeros(model_config_from_json(entry.at("config")));
  auto named = p.named();
  const json& tensors = entry.at("tensors");
  if (tensors.size() != named.size()) throw FormatError("checkpoint: tensor count differs from the model");
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (tensors[i].at("name") != named[i].first) {
      throw FormatError("checkpoint: expected tensor " + named[i].first + ", found " +
                        tensors[i].at("name").get<std::string>());
    }
    Tensor t = load_tensor(dir / tensors[i].at("file").get<std::string>());
    if (t.shape() != named[i].second->shape()) throw FormatError("checkpoint: shape mismatch at " + named[i].first);
    const auto& v = t.values();
    std::copy(v.begin(), v.end(), named[i].second->mutable_data().begin());
  }
  return p;
}

namespace io_detail {

inline json save_moments(const std::filesystem::path& dir, const std::string& prefix, AdamW& opt) {
  json files = json::array();
  auto save = [&](const std::vector<std::vector<double>>& ms, const char* tag) {
    for (std::size_t i = 0; i < ms.size(); ++i) {
      const std::string file = prefix + "." + tag + "." + std::to_string(i) + ".adst";
      save_tensor(dir / file, Tensor::vector(ms[i]));
      files.push_back(file);
    }
  };
  save(opt.first_moments(), "m");
  save(opt.second_moments(), "v");
  return {{"steps", opt.steps()}, {"files", files}};
}

inline void load_moments(const std::filesystem::path& dir, const json& j, AdamW& opt) {
  const json& files = j.at("files");
  if (files.size() % 2 != 0) throw FormatError("checkpoint: odd optimizer moment count");
  const std::size_t n = files.size() / 2;
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  m.clear();
  v.clear();
  for (std::size_t i = 0; i < n; ++i) m.push_back(load_tensor(dir / files[i].get<std::string>()).values());
  for (std::size_t i = 0; i < n; ++i) v.push_back(load_tensor(dir / files[n + i].get<std::string>()).values());
  opt.set_steps(j.at("steps"));
}

}  // namespace io_detail

/// Directory of tensor dumps plus manifest.json: generator, critic, EMA,
/// both optimizers' moments and the iteration counter.
inline void save_checkpoint(const std::filesystem::path& dir, TrainState& st) {
  std::filesystem::create_directories(dir);
  json manifest = {{"format", "adastate-checkpoint"},
                   {"version", ADASTATE_VERSION},
                   {"iteration", st.iteration},
                   {"generator", save_params(dir, "generator", st.generator)},
                   {"critic", save_params(dir, "critic", st.critic)},
                   {"ema", save_params(dir, "ema", st.ema)},
                   {"generator_opt", io_detail::save_moments(dir, "generator_opt", st.generator_opt)},
                   {"critic_opt", io_detail::save_moments(dir, "critic_opt", st.critic_opt)}};
  write_json(dir / "manifest.json", manifest);
}

inline TrainState load_checkpoint(const std::filesystem::path& dir, const DmdConfig& dc) {
  const json manifest = read_json(dir / "manifest.json");
  try {
    if (manifest.at("format") != "adastate-checkpoint") throw FormatError("not an adastate checkpoint: " + dir.string());
    TrainState st;
    st.generator = load_params(dir, manifest.at("generator"));
    st.critic = load_params(dir, manifest.at("critic"));
    st.ema = load_params(dir, manifest.at("ema"));
    st.generator_opt = AdamW(dc.beta1, dc.beta2, dc.adam_eps, dc.weight_decay);
    st.critic_opt = AdamW(dc.beta1, dc.beta2, dc.adam_eps, dc.weight_decay);
    io_detail::load_moments(dir, manifest.at("generator_opt"), st.generator_opt);
    io_detail::load_moments(dir, manifest.at("critic_opt"), st.critic_opt);
    st.iteration = manifest.at("iteration");
    return st;
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest " + dir.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Cache snapshots and rollout dumps

/// Manifest plus one latent and per-layer KV dump per cached slot (live slots are not part of the cache).
inline void dump_cache_snapshot(const std::filesystem::path& dir, const AnchorCache& cache, double t = 0.0) {
  std::filesystem::create_directories(dir);
  const WindowView view = cache.visible_window(t, 0);
  json slots = json::array();
  for (std::size_t i = 0; i < view.slots.size(); ++i) {
    const WindowSlot& s = view.slots[i];
    if (is_live(s.kind)) continue;
    json e = {{"slot", i}, {"kind", slot_name(s.kind)}, {"relative_index", s.relative_index}, {"noise", s.noise}};
    if (s.frame) {
      const std::string stem = "slot" + std::to_string(i);
      save_tensor(dir / (stem + ".latent.adst"), s.frame->latent);
      json kv = json::array();
      for (std::size_t l = 0; l < s.frame->kv.keys.size(); ++l) {
        const std::string k = stem + ".k" + std::to_string(l) + ".adst", v = stem + ".v" + std::to_string(l) + ".adst";
        save_tensor(dir / k, s.frame->kv.keys[l]);
        save_tensor(dir / v, s.frame->kv.values[l]);
        kv.push_back({{"keys", k}, {"values", v}});
      }
      e["origin"] = origin_name(s.frame->origin);
      e["source"] = s.frame->source;
      e["latent"] = stem + ".latent.adst";
      e["kv"] = kv;
    }
    slots.push_back(e);
  }
  write_json(dir / "manifest.json", {{"format", "adastate-cache"},
                                     {"policy", cache.policy().name()},
                                     {"chunk", cache.chunk_counter()},
                                     {"slots", slots}});
}

/// Rollout tensors as dumps in `dir`; returns the rollout's manifest line.
inline json dump_rollout(const std::filesystem::path& dir, const std::string& stem, const RolloutResult& r) {
  std::filesystem::create_directories(dir);
  json content = json::array(), states = json::array(), anchors = json::array();
  for (std::size_t c = 0; c < r.content.size(); ++c) {
    const std::string f = stem + ".content" + std::to_string(c) + ".adst";
    save_tensor(dir / f, r.content[c]);
    content.push_back(f);
  }
  for (std::size_t c = 0; c < r.states.size(); ++c) {
    const std::string f = stem + ".state" + std::to_string(c) + ".adst";
    save_tensor(dir / f, r.states[c]);
    states.push_back(f);
  }
  for (std::size_t c = 0; c < r.anchor_history.size(); ++c) {
    const std::string f = stem + ".anchor" + std::to_string(c) + ".adst";
    save_tensor(dir / f, r.anchor_history[c]);
    anchors.push_back(f);
  }
  return {{"chunks", r.content.size()},
          {"frames", r.content_frame_count()},
          {"chunk_frames", r.chunk_frames},
          {"tokens_per_frame", r.tokens_per_frame},
          {"channels", r.channels},
          {"chunk_seconds", r.chunk_seconds},
          {"max_cached_frames", r.max_cached_frames},
          {"teacher_component", r.teacher_component},
          {"content", content},
          {"states", states},
          {"anchors", anchors}};
}

// ---------------------------------------------------------------------------
// JSON lines

inline json record_json(const AttentionRecord& r) {
  return {{"layer", r.layer}, {"chunk", r.chunk}, {"step", r.step}, {"seq", r.seq},
          {"t", r.t},         {"n_self", r.n_self}, {"masses", r.masses}};
}

inline AttentionRecord record_from_json(const json& j) {
  AttentionRecord r;
  r.layer = j.at("layer");
  r.chunk = j.at("chunk");
  r.step = j.at("step");
  r.seq = j.at("seq");
  r.masses = j.at("masses").get<std::vector<double>>();
  // Traces without a live-chunk size treat the last F frames as self.
  r.n_self = j.value("n_self", std::size_t{3});
  r.t = j.value("t", 0.5);
  return r;
}

inline void write_records(std::ostream& os, const std::vector<AttentionRecord>& records) {
  for (const auto& r : records) os << record_json(r).dump() << "\n";
}

inline std::vector<AttentionRecord> read_records(std::istream& in) {
  std::vector<AttentionRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError("record line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline json metrics_json(const IterationMetrics& m) {
  return {{"iter", m.iter},
          {"loss", m.loss},
          {"per_frame_loss", m.per_frame_loss},
          {"critic_loss", m.critic_loss},
          {"grad_norm", m.grad_norm},
          {"seconds", m.seconds}};
}

}  // namespace adastate
