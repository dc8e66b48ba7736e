#pragma once

// In-context example sampling for training mixtures and evaluation prompts.

#include <algorithm>
#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsmt/common.hpp"
#include "fsmt/corpus.hpp"
#include "fsmt/templates.hpp"

namespace fsmt {

enum class MixtureVariant {
  Balanced,    // shots ~ Uniform{0..5}
  Unbalanced,  // P(0) = 0.5, otherwise Uniform{1..5}
};

inline std::string_view to_string(MixtureVariant v) {
  return v == MixtureVariant::Balanced ? "balanced" : "unbalanced";
}

inline MixtureVariant variant_from_string(std::string_view s) {
  if (s == "balanced") return MixtureVariant::Balanced;
  if (s == "unbalanced") return MixtureVariant::Unbalanced;
  throw Error("invalid_policy", "unknown mixture variant '" + std::string(s) + "'");
}

struct MixturePolicy {
  MixtureVariant variant = MixtureVariant::Balanced;
  std::size_t max_shots = kMaxShots;
};

/// Probability of each shot count 0..max_shots under the policy.
inline std::vector<double> shot_count_distribution(const MixturePolicy& policy) {
  std::vector<double> p(policy.max_shots + 1, 0.0);
  if (policy.variant == MixtureVariant::Balanced) {
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(p.size()));
  } else {
    p[0] = 0.5;
    for (std::size_t k = 1; k < p.size(); ++k) p[k] = 0.5 / static_cast<double>(policy.max_shots);
  }
  return p;
}

inline std::size_t draw_shot_count(const MixturePolicy& policy, Rng& rng) {
  if (policy.variant == MixtureVariant::Balanced) {
    return uniform_below(rng, policy.max_shots + 1);
  }
  if (uniform_below(rng, 2) == 0) return 0;
  return 1 + uniform_below(rng, policy.max_shots);
}

struct ShotDraw {
  std::size_t n_shots = 0;
  std::vector<std::string> examples;  // ids, in draw order
  std::vector<std::size_t> indices;   // positions in the pool, same order
};

/// `k` distinct pool entries drawn uniformly without replacement, never the
/// entry whose id equals `exclude_id`. Draw order is kept.
inline ShotDraw sample_examples(std::span<const ParallelSegment> pool, std::string_view exclude_id,
                                std::size_t k, Rng& rng) {
  const auto excluded = static_cast<std::size_t>(std::count_if(
      pool.begin(), pool.end(), [&](const ParallelSegment& s) { return s.id == exclude_id; }));
  const auto eligible = pool.size() - excluded;
  if (eligible < k) {
    throw Error("insufficient_examples", "need " + std::to_string(k) + " examples, pool has " +
                                             std::to_string(eligible) + " eligible");
  }
  ShotDraw draw;
  draw.n_shots = k;
  if (k == 0) return draw;
  if (2 * k > eligible) {
    // Dense request: shuffle the eligible indices instead of rejecting.
    std::vector<std::size_t> idx;
    idx.reserve(eligible);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (pool[i].id != exclude_id) idx.push_back(i);
    }
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(idx[i], idx[i + uniform_below(rng, idx.size() - i)]);
    }
    idx.resize(k);
    draw.indices = std::move(idx);
  } else {
    while (draw.indices.size() < k) {
      const auto i = uniform_below(rng, pool.size());
      if (pool[i].id == exclude_id) continue;
      if (std::find(draw.indices.begin(), draw.indices.end(), i) != draw.indices.end()) continue;
      if (std::any_of(draw.indices.begin(), draw.indices.end(),
                      [&](std::size_t j) { return pool[j].id == pool[i].id; })) {
        continue;
      }
      draw.indices.push_back(i);
    }
  }
  for (auto i : draw.indices) draw.examples.push_back(pool[i].id);
  return draw;
}

/// Shots for one training record: the count follows the policy, the
/// examples come from the pair's held-out example pool.
inline ShotDraw draw_training_shots(const MixturePolicy& policy,
                                    std::span<const ParallelSegment> pool,
                                    std::string_view target_id, Rng& rng) {
  const auto excluded = static_cast<std::size_t>(std::count_if(
      pool.begin(), pool.end(), [&](const ParallelSegment& s) { return s.id == target_id; }));
  if (pool.size() - excluded < policy.max_shots) {
    throw Error("insufficient_examples", "example pool has " + std::to_string(pool.size() - excluded) +
                                             " eligible entries, policy needs " +
                                             std::to_string(policy.max_shots));
  }
  const auto n = draw_shot_count(policy, rng);
  return sample_examples(pool, target_id, n, rng);
}

/// Exactly `k` examples for an evaluation prompt.
inline ShotDraw draw_eval_shots(std::span<const ParallelSegment> pool, std::string_view target_id,
                                std::size_t k, Rng& rng) {
  return sample_examples(pool, target_id, k, rng);
}

/// Per-segment generator: a pure function of (seed, segment id, occurrence).
inline Rng shot_rng(std::uint64_t seed, std::string_view segment_id, std::uint64_t occurrence = 0) {
  return make_rng(seed, segment_id, occurrence);
}

}  // namespace fsmt
