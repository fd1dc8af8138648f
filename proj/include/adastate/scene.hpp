// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "adastate/rng.hpp"
#include "adastate/tensor.hpp"

namespace adastate {

enum class SceneMode { kStationary, kDrifting };

/// Diagonal-covariance mixture component; the mean moves with frame index
/// in drifting mode.
struct SceneComponent {
  double weight = 1.0;
  std::vector<double> mean;  // mu_k at frame 0
  std::vector<double> var;   // diagonal of Sigma_k
};

struct SceneSpec {
  SceneMode mode = SceneMode::kDrifting;
  std::vector<SceneComponent> components;
  std::vector<double> velocity;  // per-frame mean shift (drifting mode)

  std::size_t dim() const { return components.empty() ? 0 : components.front().mean.size(); }

  void validate() const {
    if (components.empty()) throw std::invalid_argument("scene: no mixture components");
    const std::size_t d = dim();
    if (d == 0) throw std::invalid_argument("scene: zero-dimensional frames");
    double total = 0.0;
    for (const auto& c : components) {
      if (c.mean.size() != d || c.var.size() != d) {
        throw std::invalid_argument("scene: component dimensions disagree");
      }
      if (!(c.weight > 0.0)) throw std::invalid_argument("scene: component weight must be positive");
      for (double v : c.var)
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("scene: variances must be finite and >= 0");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("scene: mixture weights sum to " + std::to_string(total));
    }
    if (mode == SceneMode::kDrifting && velocity.size() != d) {
      throw std::invalid_argument("scene: velocity must have one entry per dimension");
    }
  }

  /// mu_k(i) = mu_k + i * v (drifting) or mu_k (stationary).
  std::vector<double> mean(std::size_t k, long frame) const {
    std::vector<double> m = components.at(k).mean;
    if (mode == SceneMode::kDrifting)
      for (std::size_t j = 0; j < m.size(); ++j) m[j] += static_cast<double>(frame) * velocity[j];
    return m;
  }

  /// Default desk scene: `dim` dims, two equally weighted components with
  /// means drawn once from N(0, I), per-dimension std `sigma`, and drift of
  /// speed `speed` along a fixed random unit direction.
  static SceneSpec desk(std::size_t dim = 64, std::uint64_t seed = 7, double sigma = 0.25,
                        double speed = 0.1, SceneMode mode = SceneMode::kDrifting) {
    SeededRng rng(seed, 0x5ce9e);
    SceneSpec s;
    s.mode = mode;
    for (int k = 0; k < 2; ++k)
      s.components.push_back({0.5, rng.normal_vector(dim), std::vector<double>(dim, sigma * sigma)});
    auto dir = rng.normal_vector(dim);
    double n = 0.0;
    for (double v : dir) n += v * v;
    n = std::sqrt(n);
    s.velocity.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) s.velocity[j] = speed * dir[j] / n;
    return s;
  }

  static SceneSpec single_gaussian(std::vector<double> mean, std::vector<double> var) {
    SceneSpec s;
    s.mode = SceneMode::kStationary;
    s.components.push_back({1.0, std::move(mean), std::move(var)});
    return s;
  }
};

struct SceneSequence {
  std::size_t component = 0;
  std::vector<std::vector<double>> frames;
};

/// Frames first_frame..first_frame+n-1 of one sequence; the mixture
/// component is drawn once per sequence, each frame independently given it.
inline SceneSequence gen_scene_sequence(const SceneSpec& spec, std::size_t n, SeededRng& rng,
                                        long first_frame = 0) {
  std::vector<double> w;
  for (const auto& c : spec.components) w.push_back(c.weight);
  SceneSequence seq;
  seq.component = rng.categorical(w);
  const auto& comp = spec.components[seq.component];
  for (std::size_t i = 0; i < n; ++i) {
    auto mu = spec.mean(seq.component, first_frame + static_cast<long>(i));
    for (std::size_t j = 0; j < mu.size(); ++j) mu[j] += std::sqrt(comp.var[j]) * rng.normal();
    seq.frames.push_back(std::move(mu));
  }
  return seq;
}

namespace scene_detail {

/// Per-component log N(x; (1-t)mu_k(i), (1-t)^2 Sigma_k + t^2 I) plus log w_k,
/// and the per-component variance vectors.
inline std::vector<double> component_log_terms(const SceneSpec& spec, std::span<const double> x, long frame,
                                               double t, std::vector<std::vector<double>>* vars = nullptr,
                                               std::vector<std::vector<double>>* means = nullptr) {
  const std::size_t d = spec.dim();
  if (x.size() != d) throw ShapeError("scene: point has " + std::to_string(x.size()) + " dims, expected " + std::to_string(d));
  std::vector<double> terms;
  for (std::size_t k = 0; k < spec.components.size(); ++k) {
    auto mu = spec.mean(k, frame);
    std::vector<double> s(d);
    double lt = std::log(spec.components[k].weight);
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] *= 1.0 - t;
      s[j] = (1.0 - t) * (1.0 - t) * spec.components[k].var[j] + t * t;
      if (!(s[j] > 0.0)) throw std::domain_error("scene: degenerate covariance at t = " + std::to_string(t));
      const double r = x[j] - mu[j];
      lt += -0.5 * (std::log(2.0 * std::numbers::pi * s[j]) + r * r / s[j]);
    }
    terms.push_back(lt);
    if (vars) vars->push_back(std::move(s));
    if (means) means->push_back(std::move(mu));
  }
  return terms;
}

inline double logsumexp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace scene_detail

/// log p_t(x) for frame `frame` under x_t = (1-t) x_0 + t eps.
inline double scene_log_density(const SceneSpec& spec, std::span<const double> x, long frame, double t) {
  if (!(t >= 0.0 && t < 1.0 + 1e-15)) throw std::invalid_argument("scene_log_density: t outside [0,1]");
  return scene_detail::logsumexp(scene_detail::component_log_terms(spec, x, frame, t));
}

/// grad_x log p_t(x): responsibility-weighted Gaussian scores.
inline std::vector<double> teacher_score(const SceneSpec& spec, std::span<const double> x, long frame, double t) {
  if (!(t > 0.0 && t <= 1.0)) {
    if (t == 0.0) {
      for (const auto& c : spec.components)
        for (double v : c.var)
          if (v == 0.0) throw std::domain_error("teacher_score: t = 0 with degenerate covariance");
    } else {
      throw std::invalid_argument("teacher_score: t outside (0,1]");
    }
  }
  std::vector<std::vector<double>> vars, means;
  auto terms = scene_detail::component_log_terms(spec, x, frame, t, &vars, &means);
  const double lse = scene_detail::logsumexp(terms);
  std::vector<double> g(x.size(), 0.0);
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const double r = std::exp(terms[k] - lse);
    for (std::size_t j = 0; j < x.size(); ++j) g[j] -= r * (x[j] - means[k][j]) / vars[k][j];
  }
  return g;
}

/// Joint log density of consecutive frames first_frame.. of one sequence, each
/// noised at its own level: the component is shared across frames.
inline double scene_log_density_joint(const SceneSpec& spec, std::span<const double> frames, long first_frame,
                                      const std::vector<double>& t) {
  const std::size_t d = spec.dim();
  if (frames.size() != t.size() * d) throw ShapeError("scene_log_density_joint: frame/noise count mismatch");
  std::vector<double> terms(spec.components.size(), 0.0);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!(t[i] >= 0.0 && t[i] < 1.0 + 1e-15)) throw std::invalid_argument("scene_log_density_joint: t outside [0,1]");
    auto ti = scene_detail::component_log_terms(spec, frames.subspan(i * d, d), first_frame + static_cast<long>(i), t[i]);
    for (std::size_t k = 0; k < ti.size(); ++k) terms[k] += ti[k] - (i > 0 ? std::log(spec.components[k].weight) : 0.0);
  }
  return scene_detail::logsumexp(terms);
}

/// Gradient of scene_log_density_joint with respect to the frames after the
/// first `n_context`: per-frame Gaussian scores weighted by the component
/// posterior given every frame. Context frames may be clean (t = 0); they
/// condition the score the way a prompt conditions a teacher.
inline std::vector<double> teacher_score_joint(const SceneSpec& spec, std::span<const double> frames, long first_frame,
                                               const std::vector<double>& t, std::size_t n_context = 0) {
  const std::size_t d = spec.dim(), n_k = spec.components.size();
  if (frames.size() != t.size() * d) throw ShapeError("teacher_score_joint: frame/noise count mismatch");
  if (n_context > t.size()) throw std::invalid_argument("teacher_score_joint: more context than frames");
  std::vector<double> terms(n_k);
  for (std::size_t k = 0; k < n_k; ++k) terms[k] = std::log(spec.components[k].weight);
  std::vector<std::vector<std::vector<double>>> vars(t.size()), means(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const bool scored = i >= n_context;
    if (scored ? !(t[i] > 0.0 && t[i] <= 1.0) : !(t[i] >= 0.0 && t[i] <= 1.0)) {
      throw std::invalid_argument("teacher_score_joint: t = " + std::to_string(t[i]) + " out of range");
    }
    auto ti = scene_detail::component_log_terms(spec, frames.subspan(i * d, d), first_frame + static_cast<long>(i), t[i],
                                                &vars[i], &means[i]);
    for (std::size_t k = 0; k < n_k; ++k) terms[k] += ti[k] - std::log(spec.components[k].weight);
  }
  const double lse = scene_detail::logsumexp(terms);
  std::vector<double> g((t.size() - n_context) * d, 0.0);
  for (std::size_t k = 0; k < n_k; ++k) {
    const double r = std::exp(terms[k] - lse);
    for (std::size_t i = n_context; i < t.size(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        g[(i - n_context) * d + j] -= r * (frames[i * d + j] - means[i][k][j]) / vars[i][k][j];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Toy metrics

inline double frame_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return std::sqrt(s);
}

/// mean_i ||f_{i+1} - f_i|| / sqrt(d)
inline double dynamics_metric(const std::vector<std::vector<double>>& frames) {
  if (frames.size() < 2) throw std::invalid_argument("dynamics_metric: need at least 2 frames");
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < frames.size(); ++i) s += frame_distance(frames[i + 1], frames[i]);
  return s / static_cast<double>(frames.size() - 1) / std::sqrt(static_cast<double>(frames[0].size()));
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    ma += a[j];
    mb += b[j];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    sab += (a[j] - ma) * (b[j] - mb);
    saa += (a[j] - ma) * (a[j] - ma);
    sbb += (b[j] - mb) * (b[j] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return saa == sbb ? 1.0 : 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// mean_i corr(f_i, template)
inline double consistency_metric(const std::vector<std::vector<double>>& frames, std::span<const double> tmpl) {
  if (frames.size() < 2) throw std::invalid_argument("consistency_metric: need at least 2 frames");
  double s = 0.0;
  for (const auto& f : frames) s += pearson(f, tmpl);
  return s / static_cast<double>(frames.size());
}

/// For frames [first, last]: || mean_m (f_i^m - mu_{k_m}(i)) || / sqrt(d), averaged over i.
inline double drift_tracking_error(const SceneSpec& spec, const std::vector<SceneSequence>& seqs,
                                   std::size_t first, std::size_t last) {
  if (seqs.empty()) throw std::invalid_argument("drift_tracking_error: no sequences");
  const std::size_t d = spec.dim();
  double total = 0.0;
  for (std::size_t i = first; i <= last; ++i) {
    std::vector<double> acc(d, 0.0);
    for (const auto& s : seqs) {
      if (i >= s.frames.size()) throw std::out_of_range("drift_tracking_error: sequence too short");
      const auto mu = spec.mean(s.component, static_cast<long>(i));
      for (std::size_t j = 0; j < d; ++j) acc[j] += s.frames[i][j] - mu[j];
    }
    double n = 0.0;
    for (double v : acc) n += (v / static_cast<double>(seqs.size())) * (v / static_cast<double>(seqs.size()));
    total += std::sqrt(n / static_cast<double>(d));
  }
  return total / static_cast<double>(last - first + 1);
}

/// Energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| between two frame sets.
inline double energy_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  auto mean_dist = [](const auto& x, const auto& y, bool same) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = same ? i + 1 : 0; j < y.size(); ++j, ++n) s += frame_distance(x[i], y[j]);
    return s / static_cast<double>(n);
  };
  return 2.0 * mean_dist(a, b, false) - mean_dist(a, a, true) - mean_dist(b, b, true);
}

}  // namespace adastate
