#pragma once

#include <functional>
#include <span>

#include "lenslab/crpo.hpp"

namespace lenslab {

// One training-step record. wall_ms is carried here but written to a
// separate timings file so metrics CSVs stay byte-reproducible.
struct MetricsRow {
  int step = 0;  // 1-indexed
  double mean_reward = 0.0;        // mean of pre-replacement group success rates
  double zero_reward_ratio = 0.0;  // fraction of groups with a_bar == 0
  int bin_failure = 0;             // a_bar == 0
  int bin_mid = 0;                 // 0 < a_bar <= 0.5
  int bin_high = 0;                // a_bar > 0.5
  double mean_entropy = 0.0;       // per-position sampling entropy, original rollouts
  double mean_response_length = 0.0;
  int denoise_trigger_count = 0;  // groups that actually drew extra rollouts
  int gate_success_count = 0;     // groups with gate == 1
  double wall_ms = 0.0;
};

struct Bins {
  int failure = 0;
  int mid = 0;
  int high = 0;
};

Bins bin_groups(std::span<const RolloutGroup> groups);

// First 1-indexed step whose trailing `window`-step mean of `series` reaches
// `target`; nullopt when never reached.
std::optional<int> steps_to_threshold(std::span<const double> series, double target,
                                      int window);
std::optional<int> steps_to_threshold(std::span<const MetricsRow> metrics,
                                      double target, int window);

struct TrainHooks {
  // Called every checkpoint_interval steps and once at normal exit.
  std::function<void(int step, const PolicyParams& params)> on_checkpoint;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  PolicyParams params;
  PolicyParams ref;
  bool aborted = false;
  int abort_step = 0;
  std::string abort_reason;
};

VocabLayout vocab_from(const ExperimentConfig& config);
TaskConfig task_from(const ExperimentConfig& config);
PolicyConfig policy_config_from(const ExperimentConfig& config);
// theta at step 0; the frozen reference policy is a copy of this.
PolicyParams init_policy(const ExperimentConfig& config);

// Full training loop: per iteration, snapshot pi_old, sample a batch of
// instances on method-independent streams, build groups via the configured
// method, take one optimizer update, record a MetricsRow. Identical
// (config, seed) gives a bit-identical metrics series at any thread count.
TrainResult train(const ExperimentConfig& config, const TrainHooks& hooks = {});

}  // namespace lenslab
