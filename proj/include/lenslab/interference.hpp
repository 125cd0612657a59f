#pragma once

#include <span>

#include "lenslab/core.hpp"
#include "lenslab/policy.hpp"

namespace lenslab {

// Per-position interference scores for one prompt plus the selected top-k
// positions. `degenerate` flags the all-tie case (max score below 1e-12,
// e.g. right after initialization when theta == ref); callers skip
// purification when it is set.
struct InterferenceProfile {
  std::vector<double> scores;
  int k = 0;
  std::vector<int> selected;  // ascending position indices
  bool degenerate = false;
};

// ceil(gamma * length) with a 1e-9 nudge so decimal gammas round the way the
// exact rational value would (0.03 * 100 must give 3, not 4).
int prune_count(double gamma, int length);

// score_j = |log pi_theta(t_j | t_<j) - log pi_ref(t_j | t_<j)|, teacher
// forced over the prompt itself; position 0 is conditioned on bos.
std::vector<double> interference_scores(const PolicyParams& theta,
                                        const PolicyParams& ref,
                                        const PolicyConfig& config,
                                        const Prompt& prompt);

// Top-k = ceil(gamma*n) positions by score, ties to the smaller index.
InterferenceProfile select_interference_set(std::span<const double> scores,
                                            double gamma);

// Removes the profile's selected positions; relative order and the
// distractor mask of survivors are preserved.
Prompt purify(const Prompt& prompt, const InterferenceProfile& profile);

// Removes `positions` (ascending, unique, in range) from the prompt.
Prompt remove_positions(const Prompt& prompt, std::span<const int> positions);

// Baseline: removes ceil(gamma*n) uniformly chosen distinct positions.
Prompt random_prune(const Prompt& prompt, double gamma, RngStream& rng);

// Per-position saliency: Euclidean norm of the gradient of the prompt's
// teacher-forced total log-likelihood w.r.t. that position's embedding
// contribution (each occurrence treated as an independent variable).
std::vector<double> prompt_saliency(const PolicyParams& theta,
                                    const PolicyConfig& config,
                                    const Prompt& prompt);

// Baseline: removes the ceil(gamma*n) positions with smallest saliency,
// ties to the smaller index.
Prompt gradient_prune(const PolicyParams& theta, const PolicyConfig& config,
                      const Prompt& prompt, double gamma);

}  // namespace lenslab
