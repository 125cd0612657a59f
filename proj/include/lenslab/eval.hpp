#pragma once

#include <filesystem>

#include "lenslab/trainer.hpp"

namespace lenslab {

// All CSV output uses round-trip decimal formatting and is written to a temp
// file then renamed, so identical runs produce byte-identical files.
void write_metrics_csv(const std::filesystem::path& path,
                       std::span<const MetricsRow> metrics);
void write_timings_csv(const std::filesystem::path& path,
                       std::span<const MetricsRow> metrics);
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

struct RunSummary {
  Method method = Method::kGrpo;
  std::uint64_t seed = 0;
  std::optional<int> steps_to_target;
  double final_reward = 0.0;
  double peak_windowed_reward = 0.0;
  bool aborted = false;
  std::string abort_reason;
  std::vector<MetricsRow> metrics;
};

// Trains once and, when out_dir is non-empty, writes
// metrics_<tag>.csv / timings_<tag>.csv / checkpoint_<tag>*.ckpt there.
RunSummary run_experiment(const ExperimentConfig& config,
                          const std::filesystem::path& out_dir,
                          const std::string& tag);

struct MethodMedian {
  Method method = Method::kGrpo;
  // +inf when half or more of the runs never reach the target.
  double median_steps_to_target = 0.0;
};

struct CompareResult {
  std::vector<RunSummary> runs;
  std::vector<MethodMedian> medians;
};

// Runs every (method, seed) cell with matched instance streams; per-run
// metrics files plus summary.csv under out_dir when non-empty.
CompareResult compare(const ExperimentConfig& base, std::span<const Method> methods,
                      std::span<const std::uint64_t> seeds,
                      const std::filesystem::path& out_dir);

struct SweepRow {
  double value = 0.0;
  std::uint64_t seed = 0;
  double final_reward = 0.0;
  double peak_windowed_reward = 0.0;
};

// key is "gamma" or "tau"; runs lens at each value with shared seeds.
std::vector<SweepRow> sweep(const ExperimentConfig& base, const std::string& key,
                            std::span<const double> values,
                            std::span<const std::uint64_t> seeds,
                            const std::filesystem::path& out_dir);

struct DiagnoseRow {
  int prompt_id = 0;
  int position = 0;
  TokenId token_id = 0;
  double score = 0.0;
  int is_distractor = 0;
  int selected = 0;
};

std::vector<DiagnoseRow> diagnose(const ExperimentConfig& config,
                                  const PolicyParams& theta, const PolicyParams& ref,
                                  int n_prompts);
void write_diagnose_csv(const std::filesystem::path& path,
                        std::span<const DiagnoseRow> rows);

struct PurifyEvalRow {
  int prompt_id = 0;
  double original_acc = 0.0;
  double denoised_acc = 0.0;
  int improved = 0;
  int k = 0;
  int selected_distractors = 0;
  int prompt_len = 0;
  int n_distractors = 0;
};

struct PurifyEvalSummary {
  int n_scanned = 0;      // instances drawn while looking for low-success prompts
  int n_low_success = 0;  // instances with original Average@m below tau
  int n_degenerate = 0;   // skipped: all-tie scores
  int n_evaluated = 0;
  double fraction_improved = 0.0;
  double mean_improvement = 0.0;
  double pruned_precision = 0.0;  // distractor fraction of score-selected positions
  double random_precision_mean = 0.0;
  double random_precision_se = 0.0;  // Monte Carlo standard error of the control
  double distractor_base_rate = 0.0;
};

struct PurifyEvalResult {
  std::vector<PurifyEvalRow> rows;
  PurifyEvalSummary summary;
};

// Evaluates purification on n_prompts low-success instances: per-prompt
// original vs denoised Average@m, plus pruned-token distractor precision
// against a uniformly-random pruning control of the same size.
PurifyEvalResult purify_eval(const ExperimentConfig& config,
                             const PolicyParams& theta, const PolicyParams& ref,
                             int n_prompts);
void write_purify_eval_csv(const std::filesystem::path& rows_path,
                           const std::filesystem::path& summary_path,
                           const PurifyEvalResult& result);

struct GradCheckReport {
  std::string name;
  int cases = 0;
  double max_rel_err = 0.0;
  std::string worst_case;
  bool pass = false;
};

struct GradCheckSuite {
  std::vector<GradCheckReport> reports;
  bool pass = false;
};

// Central finite differences (step fd_step) against the analytic gradients
// of sequence_log_prob and of both loss objectives; per-component error is
// |analytic - fd| / max(1, |fd|). `perturb` is a fault-injection hook that
// offsets the first analytic gradient component.
GradCheckSuite run_gradcheck(std::uint64_t seed, int cases, double fd_step,
                             double tol, double perturb = 0.0);

}  // namespace lenslab
