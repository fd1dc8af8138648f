// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "adastate/ops.hpp"

namespace adastate {

/// Per-frame attention mass for one (layer, chunk, step, sequence). Frames
/// are ordered cached-first; the last `n_self` frames are the live chunk.
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t chunk = 0;
  std::size_t step = 0;
  long seq = 0;
  double t = 0.0;  // noise level of the queries; 0 marks the clean cache rerun
  std::size_t n_self = 0;
  std::vector<double> masses;

  std::size_t depth() const { return masses.size() - n_self; }
};

/// floor(j*T/|Q|) for j < |Q|, |Q| = min(max_queries, T).
inline std::vector<std::size_t> query_subsample(std::size_t total, std::size_t max_queries = 32) {
  const std::size_t q = std::min(max_queries, total);
  std::vector<std::size_t> idx(q);
  for (std::size_t j = 0; j < q; ++j) idx[j] = j * total / q;
  return idx;
}

/// Mean over the given queries and all heads of the summed weight on each
/// frame's token span.
inline std::vector<double> frame_mass(const AttentionWeights& w, const std::vector<std::size_t>& queries,
                                      std::size_t tokens_per_frame) {
  if (tokens_per_frame == 0 || w.keys % tokens_per_frame != 0) {
    throw std::invalid_argument("frame_mass: " + std::to_string(w.keys) +
                                " keys not divisible by tokens_per_frame " +
                                std::to_string(tokens_per_frame));
  }
  if (queries.empty()) throw std::invalid_argument("frame_mass: empty query set");
  const std::size_t frames = w.keys / tokens_per_frame;
  std::vector<double> m(frames, 0.0);
  for (std::size_t h = 0; h < w.heads; ++h) {
    for (std::size_t q : queries) {
      if (q >= w.queries) throw std::out_of_range("frame_mass: query index out of range");
      const double* row = w.data.data() + (h * w.queries + q) * w.keys;
      for (std::size_t f = 0; f < frames; ++f) {
        double s = 0.0;
        for (std::size_t k = f * tokens_per_frame; k < (f + 1) * tokens_per_frame; ++k) s += row[k];
        m[f] += s;
      }
    }
  }
  const double norm = 1.0 / static_cast<double>(queries.size() * w.heads);
  for (double& v : m) v *= norm;
  return m;
}

class DegenerateRecord : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shares of the first F_c - n_self frames, renormalized to sum to one.
inline std::vector<double> offdiag_share(const std::vector<double>& masses, std::size_t n_self) {
  if (n_self >= masses.size()) {
    throw std::invalid_argument("offdiag_share: no cached frames (" + std::to_string(masses.size()) +
                                " frames, " + std::to_string(n_self) + " live)");
  }
  const std::size_t off = masses.size() - n_self;
  double total = 0.0;
  for (std::size_t f = 0; f < off; ++f) total += masses[f];
  if (!(total > 0.0)) throw DegenerateRecord("offdiag_share: zero off-diagonal mass");
  std::vector<double> s(masses.begin(), masses.begin() + static_cast<long>(off));
  for (double& v : s) v /= total;
  return s;
}

struct DepthBucket {
  std::size_t depth = 0;
  std::vector<double> shares;
  std::size_t records = 0;
};

struct AggregateResult {
  std::vector<DepthBucket> buckets;
  std::vector<std::string> warnings;
};

/// Groups records by cache depth and averages their off-diagonal shares.
/// Records at t = 0 are skipped when `exclude_t0` is set.
inline AggregateResult aggregate_depth(const std::vector<AttentionRecord>& records,
                                       const std::set<std::size_t>& depths, bool exclude_t0 = true) {
  std::map<std::size_t, DepthBucket> acc;
  AggregateResult result;
  for (const auto& r : records) {
    if (exclude_t0 && r.t == 0.0) continue;
    if (r.masses.size() <= r.n_self) continue;
    const std::size_t depth = r.depth();
    if (!depths.count(depth)) continue;
    std::vector<double> s;
    try {
      s = offdiag_share(r.masses, r.n_self);
    } catch (const DegenerateRecord&) {
      result.warnings.push_back("degenerate record at layer " + std::to_string(r.layer) + ", chunk " +
                                std::to_string(r.chunk));
      continue;
    }
    auto& b = acc[depth];
    if (b.records == 0) {
      b.depth = depth;
      b.shares.assign(depth, 0.0);
    }
    for (std::size_t f = 0; f < depth; ++f) b.shares[f] += s[f];
    ++b.records;
  }
  for (std::size_t d : depths) {
    auto it = acc.find(d);
    if (it == acc.end()) {
      result.warnings.push_back("no records at depth " + std::to_string(d));
      continue;
    }
    for (double& v : it->second.shares) v /= static_cast<double>(it->second.records);
    result.buckets.push_back(std::move(it->second));
  }
  return result;
}

/// 1-based descending rank of the share at `position` (default: the anchor).
/// Ties count in its favour.
inline std::size_t anchor_rank(const DepthBucket& b, std::size_t position = 0) {
  if (b.shares.empty()) throw std::invalid_argument("anchor_rank: empty bucket");
  std::size_t rank = 1;
  for (double s : b.shares) rank += s > b.shares.at(position);
  return rank;
}

inline void write_bucket_csv(std::ostream& os, const std::vector<DepthBucket>& buckets) {
  os << "depth,frame_position,mean_share,records\n";
  for (const auto& b : buckets)
    for (std::size_t f = 0; f < b.shares.size(); ++f)
      os << b.depth << ',' << f << ',' << b.shares[f] << ',' << b.records << '\n';
}

}  // namespace adastate
