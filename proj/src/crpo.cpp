#include "lenslab/crpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lenslab {

namespace {

constexpr double kLogRatioClamp = 20.0;

// Uniformly chosen size-k subset of `candidates`, order preserved.
std::vector<int> sample_subset(std::span<const int> candidates, int k, RngStream& rng) {
  std::vector<int> pool(candidates.begin(), candidates.end());
  const int n = static_cast<int>(pool.size());
  for (int i = 0; i < k; ++i) {
    int j = i + rng.uniform_int(n - i);
    std::swap(pool[i], pool[j]);
  }
  std::vector<int> picked(pool.begin(), pool.begin() + k);
  std::sort(picked.begin(), picked.end());
  return picked;
}

// Replaces uniformly chosen failure slots with injected successes drawn in
// sampling order. Shared by the denoised-replacement path and the
// resampling baseline.
void replace_failures(RolloutGroup& group, std::span<const Rollout> injected,
                      RngStream& rng) {
  std::vector<int> failure_slots;
  for (int i = 0; i < group.size(); ++i) {
    if (group.rollouts[i].reward == 0) failure_slots.push_back(i);
  }
  const int count = std::min<int>(static_cast<int>(failure_slots.size()),
                                  static_cast<int>(injected.size()));
  if (count == 0) return;
  std::vector<int> replaced = sample_subset(failure_slots, count, rng);
  for (int i = 0; i < count; ++i) group.rollouts[replaced[i]] = injected[i];
}

}  // namespace

RolloutGroup rollout_group(const PolicyParams& pol_old, const PolicyConfig& config,
                           const Instance& instance, int m, int max_len,
                           RngStream& rng) {
  if (m < 2) throw std::invalid_argument("group size m must be >= 2");
  RolloutGroup group;
  group.instance = instance;
  group.rollouts.reserve(m);
  int successes = 0;
  for (int i = 0; i < m; ++i) {
    SampleResult sample =
        sample_response(pol_old, config, instance.prompt.tokens, max_len, rng);
    Rollout rollout;
    rollout.response = std::move(sample.tokens);
    rollout.variant = RollVariant::kOriginal;
    rollout.behavior_log_prob = sample.log_prob;
    rollout.reward = verify(rollout.response, instance);
    rollout.origin = rollout.reward ? Origin::kSuccess : Origin::kFailure;
    successes += rollout.reward;
    group.entropy_sum += sample.entropy_sum;
    group.response_positions += static_cast<long>(rollout.response.size());
    group.rollouts.push_back(std::move(rollout));
  }
  group.a_bar = static_cast<double>(successes) / m;
  return group;
}

RolloutGroup maybe_denoise(const PolicyParams& theta, const PolicyParams& ref,
                           const PolicyConfig& config, RolloutGroup group,
                           double tau, double gamma, int m, int max_len,
                           RngStream& rng, PruneSelector selector) {
  if (group.a_bar >= tau) return group;

  const Prompt& original = group.instance.prompt;
  Prompt pruned;
  switch (selector) {
    case PruneSelector::kInterference: {
      std::vector<double> scores = interference_scores(theta, ref, config, original);
      InterferenceProfile profile = select_interference_set(scores, gamma);
      if (profile.degenerate) return group;
      pruned = purify(original, profile);
      break;
    }
    case PruneSelector::kRandom:
      pruned = random_prune(original, gamma, rng);
      break;
    case PruneSelector::kGradient:
      pruned = gradient_prune(theta, config, original, gamma);
      break;
  }

  std::vector<Rollout> injected;
  int successes = 0;
  for (int i = 0; i < m; ++i) {
    SampleResult sample = sample_response(theta, config, pruned.tokens, max_len, rng);
    const int reward = verify(sample.tokens, group.instance);
    successes += reward;
    if (reward == 1) {
      Rollout rollout;
      rollout.response = std::move(sample.tokens);
      rollout.variant = RollVariant::kDenoised;
      rollout.origin = Origin::kInjected;
      rollout.behavior_log_prob = sample.log_prob;
      rollout.reward = 1;
      injected.push_back(std::move(rollout));
    }
  }
  group.denoise_sampled = true;
  group.denoised_prompt = std::move(pruned);
  group.denoised_acc = static_cast<double>(successes) / m;

  if (*group.denoised_acc > group.a_bar) {
    group.gate = 1;
    replace_failures(group, injected, rng);
  }
  return group;
}

WeightedGroup compute_weights(RolloutGroup group, bool uniform) {
  WeightedGroup weighted;
  const int m = group.size();
  weighted.w_tilde.resize(m);
  weighted.w.resize(m);
  if (uniform) {
    std::fill(weighted.w_tilde.begin(), weighted.w_tilde.end(), 1.0);
  } else {
    for (int i = 0; i < m; ++i) {
      weighted.w_tilde[i] = group.rollouts[i].origin == Origin::kSuccess
                                ? group.a_bar
                                : 1.0 - group.a_bar;
    }
  }
  double total = std::accumulate(weighted.w_tilde.begin(), weighted.w_tilde.end(), 0.0);
  if (total <= 0.0) {
    // Unreachable for groups built by rollout_group/maybe_denoise; kept as a
    // uniform fallback for hand-built groups.
    std::fill(weighted.w_tilde.begin(), weighted.w_tilde.end(), 1.0);
    total = static_cast<double>(m);
  }
  for (int i = 0; i < m; ++i) weighted.w[i] = weighted.w_tilde[i] / total;
  weighted.group = std::move(group);
  return weighted;
}

std::vector<double> compute_advantages(const WeightedGroup& weighted,
                                       double eps_sigma) {
  const int m = weighted.group.size();
  double mean = 0.0;
  for (int i = 0; i < m; ++i) mean += weighted.w[i] * weighted.group.rollouts[i].reward;
  double var = 0.0;
  for (int i = 0; i < m; ++i) {
    const double dev = weighted.group.rollouts[i].reward - mean;
    var += weighted.w[i] * dev * dev;
  }
  const double sigma = std::sqrt(var);
  std::vector<double> advantages(m, 0.0);
  if (sigma < eps_sigma) return advantages;
  for (int i = 0; i < m; ++i) {
    advantages[i] = (weighted.group.rollouts[i].reward - mean) / sigma;
  }
  return advantages;
}

double importance_log_ratio(const PolicyParams& theta, const PolicyConfig& config,
                            const Prompt& original_prompt, const Rollout& rollout) {
  return sequence_log_prob(theta, config, original_prompt.tokens, rollout.response) -
         rollout.behavior_log_prob;
}

namespace {

// Surrogate + KL contribution of one group. Returns the group's loss and
// accumulates its exact gradient.
double accumulate_group_loss(const PolicyParams& theta, const PolicyParams& ref,
                             const PolicyConfig& config, const WeightedGroup& weighted,
                             const ObjectiveOptions& options, std::span<double> grad,
                             long& clamp_events) {
  const RolloutGroup& group = weighted.group;
  const std::vector<TokenId>& prompt = group.instance.prompt.tokens;
  const std::vector<double> advantages = compute_advantages(weighted, options.eps_sigma);

  double loss = 0.0;
  for (int i = 0; i < group.size(); ++i) {
    const Rollout& rollout = group.rollouts[i];
    double log_rho =
        sequence_log_prob(theta, config, prompt, rollout.response) -
        rollout.behavior_log_prob;
    bool clamped = false;
    if (std::abs(log_rho) > kLogRatioClamp) {
      log_rho = std::clamp(log_rho, -kLogRatioClamp, kLogRatioClamp);
      clamped = true;
      ++clamp_events;
    }
    const double rho = std::exp(log_rho);
    const double rho_clipped =
        std::clamp(rho, 1.0 - options.eps_clip, 1.0 + options.eps_clip);
    const double advantage = advantages[i];
    const double unclipped = rho * advantage;
    const double clipped = rho_clipped * advantage;
    const double surrogate = std::min(unclipped, clipped);
    const double w_prime =
        options.surrogate_normalized_weights ? weighted.w[i] : weighted.w_tilde[i];
    loss -= w_prime * surrogate;

    // Gradient flows only through the smooth branch of the min; the clipped
    // branch is constant in theta wherever it is strictly active.
    if (unclipped <= clipped && !clamped && advantage != 0.0 && w_prime != 0.0) {
      const double coeff = -w_prime * advantage * rho;
      accumulate_grad_sequence_log_prob(theta, config, prompt, rollout.response,
                                        coeff, grad);
    }
  }

  // Exact per-position KL(pi_theta || pi_ref), prefixes rooted at the
  // original prompt, averaged over all response positions of the group.
  if (options.beta > 0.0) {
    long total_positions = 0;
    for (const Rollout& r : group.rollouts) {
      total_positions += static_cast<long>(r.response.size());
    }
    if (total_positions > 0) {
      const int V = theta.vocab_size;
      const double scale = options.beta / static_cast<double>(total_positions);
      double kl_sum = 0.0;
      std::vector<TokenId> context;
      std::vector<double> dlogits(V);
      for (const Rollout& rollout : group.rollouts) {
        context.assign(prompt.begin(), prompt.end());
        context.insert(context.end(), rollout.response.begin(), rollout.response.end());
        for (size_t j = 0; j < rollout.response.size(); ++j) {
          std::span<const TokenId> prefix(context.data(), prompt.size() + j);
          const std::vector<double> lp_theta = token_log_probs(theta, config, prefix);
          const std::vector<double> lp_ref = token_log_probs(ref, config, prefix);
          double kl = 0.0;
          for (int a = 0; a < V; ++a) {
            kl += std::exp(lp_theta[a]) * (lp_theta[a] - lp_ref[a]);
          }
          kl_sum += kl;
          // dKL/dz_a = p_a (log p_a - log q_a - KL).
          for (int a = 0; a < V; ++a) {
            dlogits[a] =
                scale * std::exp(lp_theta[a]) * (lp_theta[a] - lp_ref[a] - kl);
          }
          accumulate_logit_backprop(theta, config, prefix, dlogits, grad);
        }
      }
      loss += options.beta * kl_sum / static_cast<double>(total_positions);
    }
  }
  return loss;
}

}  // namespace

LossGrad crpo_loss_grad(const PolicyParams& theta, const PolicyParams& ref,
                        const PolicyConfig& config,
                        std::span<const WeightedGroup> groups,
                        const ObjectiveOptions& options) {
  LossGrad result;
  result.grad.assign(theta.flat_size(), 0.0);
  for (size_t i = 0; i < groups.size(); ++i) {
    const double group_loss = accumulate_group_loss(
        theta, ref, config, groups[i], options, result.grad, result.ratio_clamp_events);
    if (!std::isfinite(group_loss)) {
      throw std::runtime_error("non-finite loss in group " + std::to_string(i));
    }
    result.loss += group_loss;
  }
  if (!std::isfinite(result.loss)) throw std::runtime_error("non-finite total loss");
  return result;
}

LossGrad grpo_loss_grad(const PolicyParams& theta, const PolicyParams& ref,
                        const PolicyConfig& config,
                        std::span<const RolloutGroup> groups,
                        const ObjectiveOptions& options) {
  std::vector<WeightedGroup> weighted;
  weighted.reserve(groups.size());
  for (const RolloutGroup& g : groups) weighted.push_back(compute_weights(g, true));
  return crpo_loss_grad(theta, ref, config, weighted, options);
}

std::vector<RolloutGroup> dapo_filter(std::vector<RolloutGroup> groups) {
  std::erase_if(groups, [](const RolloutGroup& g) {
    if (g.rollouts.empty()) return true;
    const int first = g.rollouts.front().reward;
    return std::all_of(g.rollouts.begin(), g.rollouts.end(),
                       [first](const Rollout& r) { return r.reward == first; });
  });
  return groups;
}

RolloutGroup resample_baseline(const PolicyParams& pol_old, const PolicyConfig& config,
                               RolloutGroup group, int m, int max_len,
                               RngStream& rng) {
  std::vector<Rollout> extras;
  for (int i = 0; i < m; ++i) {
    SampleResult sample =
        sample_response(pol_old, config, group.instance.prompt.tokens, max_len, rng);
    const int reward = verify(sample.tokens, group.instance);
    if (reward == 1) {
      Rollout rollout;
      rollout.response = std::move(sample.tokens);
      rollout.variant = RollVariant::kOriginal;  // same prompt sampled it
      rollout.origin = Origin::kInjected;
      rollout.behavior_log_prob = sample.log_prob;
      rollout.reward = 1;
      extras.push_back(std::move(rollout));
    }
  }
  group.denoise_sampled = true;
  replace_failures(group, extras, rng);
  return group;
}

}  // namespace lenslab
