#include "lenslab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace lenslab {

namespace {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long updates = 0;

  explicit AdamState(size_t n) : m(n, 0.0), v(n, 0.0) {}

  void update(std::span<double> params, std::span<const double> grad, double lr) {
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    ++updates;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(updates));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(updates));
    for (size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

// Runs fn(i) for i in [0, n) across `threads` workers on contiguous chunks.
// Work items only write to their own slot, so any thread count gives the
// same result.
void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        while (true) {
          const int i = next.fetch_add(1);
          if (i >= n) break;
          fn(i);
        }
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

PruneSelector selector_for(Method method) {
  switch (method) {
    case Method::kRandomPrune: return PruneSelector::kRandom;
    case Method::kGradPrune: return PruneSelector::kGradient;
    default: return PruneSelector::kInterference;
  }
}

bool uses_denoise_stage(Method method) {
  return method == Method::kLens || method == Method::kResample ||
         method == Method::kRandomPrune || method == Method::kGradPrune;
}

}  // namespace

Bins bin_groups(std::span<const RolloutGroup> groups) {
  Bins bins;
  for (const RolloutGroup& g : groups) {
    if (g.a_bar == 0.0) {
      ++bins.failure;
    } else if (g.a_bar <= 0.5) {
      ++bins.mid;
    } else {
      ++bins.high;
    }
  }
  return bins;
}

std::optional<int> steps_to_threshold(std::span<const double> series, double target,
                                      int window) {
  if (window < 1) throw std::invalid_argument("window must be >= 1");
  const int n = static_cast<int>(series.size());
  double running = 0.0;
  for (int i = 0; i < n; ++i) {
    running += series[i];
    if (i >= window) running -= series[i - window];
    if (i + 1 >= window && running / window >= target) return i + 1;
  }
  return std::nullopt;
}

std::optional<int> steps_to_threshold(std::span<const MetricsRow> metrics,
                                      double target, int window) {
  std::vector<double> series;
  series.reserve(metrics.size());
  for (const MetricsRow& row : metrics) series.push_back(row.mean_reward);
  return steps_to_threshold(series, target, window);
}

VocabLayout vocab_from(const ExperimentConfig& config) {
  return make_vocab_layout(config.key_count, config.value_count,
                           config.distractor_count);
}

TaskConfig task_from(const ExperimentConfig& config) {
  return TaskConfig{config.pairs, config.distractor_rate, vocab_from(config)};
}

PolicyConfig policy_config_from(const ExperimentConfig& config) {
  const VocabLayout vocab = vocab_from(config);
  PolicyConfig pcfg;
  pcfg.vocab_size = vocab.vocab_size;
  pcfg.embed_dim = config.embed_dim;
  pcfg.window = config.window;
  pcfg.temperature = config.temperature;
  pcfg.bos = vocab.bos;
  pcfg.eos = vocab.eos;
  return pcfg;
}

PolicyParams init_policy(const ExperimentConfig& config) {
  const VocabLayout vocab = vocab_from(config);
  RngStream rng = derive_rng(config.seed, 0, 0, kLaneInit);
  return PolicyParams::random_init(vocab.vocab_size, config.embed_dim,
                                   config.init_std, rng);
}

TrainResult train(const ExperimentConfig& config, const TrainHooks& hooks) {
  {
    const std::vector<std::string> errors = validate_config(config);
    if (!errors.empty()) {
      std::string joined;
      for (const auto& e : errors) {
        if (!joined.empty()) joined += "; ";
        joined += e;
      }
      throw ConfigError(joined);
    }
  }

  const TaskConfig task = task_from(config);
  const PolicyConfig pcfg = policy_config_from(config);
  const int B = config.batch_size;
  const int m = config.rollouts;
  const int L = config.max_response_len;

  TrainResult result;
  result.params = init_policy(config);
  result.ref = result.params;  // frozen for the whole run
  AdamState adam(result.params.flat.size());

  const ObjectiveOptions objective{config.eps_clip, config.beta, config.eps_sigma,
                                   config.surrogate_normalized_weights};

  for (int step = 1; step <= config.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const PolicyParams pol_old = result.params;  // snapshot, refreshed once per step

    std::vector<RolloutGroup> groups(B);
    parallel_for(B, config.threads, [&](int i) {
      RngStream env_rng = derive_rng(config.seed, step, i, kLaneEnv);
      const Instance instance = generate_instance(task, env_rng);
      RngStream roll_rng = derive_rng(config.seed, step, i, kLaneRollout);
      RolloutGroup group = rollout_group(pol_old, pcfg, instance, m, L, roll_rng);
      if (uses_denoise_stage(config.method)) {
        RngStream denoise_rng = derive_rng(config.seed, step, i, kLaneDenoise);
        if (config.method == Method::kResample) {
          if (group.a_bar < config.tau) {
            group = resample_baseline(pol_old, pcfg, std::move(group), m, L,
                                      denoise_rng);
          }
        } else {
          group = maybe_denoise(pol_old, result.ref, pcfg, std::move(group),
                                config.tau, config.gamma, m, L, denoise_rng,
                                selector_for(config.method));
        }
      }
      groups[i] = std::move(group);
    });

    // Metrics over the pre-replacement group statistics.
    MetricsRow row;
    row.step = step;
    const Bins bins = bin_groups(groups);
    row.bin_failure = bins.failure;
    row.bin_mid = bins.mid;
    row.bin_high = bins.high;
    double entropy_sum = 0.0;
    long positions = 0;
    for (const RolloutGroup& g : groups) {
      row.mean_reward += g.a_bar;
      row.zero_reward_ratio += g.a_bar == 0.0 ? 1.0 : 0.0;
      row.denoise_trigger_count += g.denoise_sampled ? 1 : 0;
      row.gate_success_count += g.gate;
      entropy_sum += g.entropy_sum;
      positions += g.response_positions;
    }
    row.mean_reward /= B;
    row.zero_reward_ratio /= B;
    row.mean_entropy = positions > 0 ? entropy_sum / positions : 0.0;
    row.mean_response_length =
        static_cast<double>(positions) / (static_cast<double>(B) * m);

    // Per-group losses computed independently (possibly in parallel), then
    // reduced in prompt order so the sum is schedule-independent.
    std::vector<RolloutGroup> active;
    if (config.method == Method::kDapoFilter) {
      active = dapo_filter(std::move(groups));
    } else {
      active = std::move(groups);
    }

    bool have_update = !active.empty();
    double loss = 0.0;
    std::vector<double> grad(result.params.flat.size(), 0.0);
    std::string failure;
    if (have_update) {
      const int n_active = static_cast<int>(active.size());
      std::vector<LossGrad> partials(n_active);
      parallel_for(n_active, config.threads, [&](int i) {
        std::span<const RolloutGroup> one(&active[i], 1);
        if (config.method == Method::kGrpo || config.method == Method::kDapoFilter) {
          partials[i] = grpo_loss_grad(result.params, result.ref, pcfg, one, objective);
        } else {
          std::vector<WeightedGroup> weighted;
          weighted.push_back(compute_weights(active[i], config.uniform_weights));
          partials[i] = crpo_loss_grad(result.params, result.ref, pcfg, weighted,
                                       objective);
        }
      });
      for (const LossGrad& part : partials) {
        loss += part.loss;
        for (size_t k = 0; k < grad.size(); ++k) grad[k] += part.grad[k];
      }
      if (!std::isfinite(loss)) {
        result.aborted = true;
        result.abort_step = step;
        result.abort_reason = "non-finite loss at step " + std::to_string(step);
      }
    }

    if (result.aborted) {
      result.metrics.push_back(row);
      return result;
    }

    if (have_update) {
      adam.update(result.params.flat, grad, config.learning_rate);
      if (!result.params.all_finite()) {
        result.aborted = true;
        result.abort_step = step;
        result.abort_reason = "non-finite parameters after update at step " +
                              std::to_string(step);
        result.metrics.push_back(row);
        return result;
      }
    }

    row.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    result.metrics.push_back(row);

    if (hooks.on_checkpoint && step % config.checkpoint_interval == 0) {
      hooks.on_checkpoint(step, result.params);
    }
  }

  if (hooks.on_checkpoint) hooks.on_checkpoint(config.steps, result.params);
  return result;
}

}  // namespace lenslab
