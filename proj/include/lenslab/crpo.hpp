#pragma once

#include <optional>
#include <span>

#include "lenslab/core.hpp"
#include "lenslab/env.hpp"
#include "lenslab/interference.hpp"
#include "lenslab/policy.hpp"

namespace lenslab {

enum class RollVariant { kOriginal, kDenoised };

// Which partition a rollout belongs to: an original success (Y+), a surviving
// original failure (Y- minus the replaced set R), or an injected success
// sampled from a reconstructed prompt (P).
enum class Origin { kSuccess, kFailure, kInjected };

struct Rollout {
  std::vector<TokenId> response;
  RollVariant variant = RollVariant::kOriginal;
  Origin origin = Origin::kFailure;
  double behavior_log_prob = 0.0;  // log prob under the policy+prompt that sampled it
  int reward = 0;
};

struct RolloutGroup {
  Instance instance;
  std::optional<Prompt> denoised_prompt;
  std::vector<Rollout> rollouts;
  // Success rate of the original m rollouts; never recomputed after
  // replacement.
  double a_bar = 0.0;
  int gate = 0;
  std::optional<double> denoised_acc;
  bool denoise_sampled = false;  // extra rollouts were actually drawn
  // Sampling statistics over the original m rollouts, for metrics.
  double entropy_sum = 0.0;
  long response_positions = 0;

  int size() const { return static_cast<int>(rollouts.size()); }
};

// Samples m rollouts from (pol_old, instance.prompt), scoring each with the
// verifier. gate starts at 0 and a_bar is fixed here.
RolloutGroup rollout_group(const PolicyParams& pol_old, const PolicyConfig& config,
                           const Instance& instance, int m, int max_len,
                           RngStream& rng);

enum class PruneSelector { kInterference, kRandom, kGradient };

// When the group's success rate is below tau, prunes the prompt (by the
// chosen selector), samples m rollouts from the pruned prompt, and — only if
// they beat a_bar strictly — replaces a uniformly chosen subset of failures
// with the injected successes. Group size is always preserved and a_bar is
// never recomputed. The interference selector skips degenerate (all-tie)
// score vectors.
RolloutGroup maybe_denoise(const PolicyParams& theta, const PolicyParams& ref,
                           const PolicyConfig& config, RolloutGroup group,
                           double tau, double gamma, int m, int max_len,
                           RngStream& rng,
                           PruneSelector selector = PruneSelector::kInterference);

struct WeightedGroup {
  RolloutGroup group;
  std::vector<double> w_tilde;  // a_bar for Y+, 1 - a_bar otherwise
  std::vector<double> w;        // w_tilde / sum(w_tilde)
};

WeightedGroup compute_weights(RolloutGroup group, bool uniform);

// Weighted group-relative advantages: (r - mu_w) / sigma_w with the weighted
// mean/std taken under the normalized weights; all zero when sigma_w falls
// below eps_sigma.
std::vector<double> compute_advantages(const WeightedGroup& weighted,
                                       double eps_sigma);

// log rho = log pi_theta(y | x_i) - behavior_log_prob. The numerator always
// conditions on the original prompt; the denominator is whatever sampled y.
double importance_log_ratio(const PolicyParams& theta, const PolicyConfig& config,
                            const Prompt& original_prompt, const Rollout& rollout);

struct ObjectiveOptions {
  double eps_clip = 0.2;
  double beta = 0.001;
  double eps_sigma = 1e-8;
  // Surrogate multiplier: unnormalized w_tilde by default; the normalized
  // alternative is a flag so both readings can be A/B tested.
  bool surrogate_normalized_weights = false;
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
  long ratio_clamp_events = 0;  // |log rho| clamped at 20 before exp
};

// Clipped surrogate with exact full-vocabulary KL to the reference policy,
// averaged over response positions per group and summed over groups.
// Advantages are constants: no gradient flows through them.
LossGrad crpo_loss_grad(const PolicyParams& theta, const PolicyParams& ref,
                        const PolicyConfig& config,
                        std::span<const WeightedGroup> groups,
                        const ObjectiveOptions& options);

// Same objective at uniform weights over original rollouts.
LossGrad grpo_loss_grad(const PolicyParams& theta, const PolicyParams& ref,
                        const PolicyConfig& config,
                        std::span<const RolloutGroup> groups,
                        const ObjectiveOptions& options);

// Drops groups whose rollouts all share one reward. Idempotent.
std::vector<RolloutGroup> dapo_filter(std::vector<RolloutGroup> groups);

// Baseline: m extra rollouts from the same prompt; successful extras replace
// uniformly chosen failures up to availability. a_bar stays untouched.
RolloutGroup resample_baseline(const PolicyParams& pol_old, const PolicyConfig& config,
                               RolloutGroup group, int m, int max_len,
                               RngStream& rng);

}  // namespace lenslab
