#include "lenslab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace lenslab {

namespace {

double trailing_peak(std::span<const MetricsRow> metrics, int window) {
  const int n = static_cast<int>(metrics.size());
  if (n == 0) return 0.0;
  double running = 0.0;
  double peak = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    running += metrics[i].mean_reward;
    if (i >= window) running -= metrics[i - window].mean_reward;
    if (i + 1 >= window) peak = std::max(peak, running / window);
  }
  if (n < window) {
    double total = 0.0;
    for (const MetricsRow& row : metrics) total += row.mean_reward;
    return total / n;
  }
  return peak;
}

std::string metrics_to_csv(std::span<const MetricsRow> metrics) {
  std::ostringstream out;
  out << "step,mean_reward,zero_reward_ratio,bin_failure,bin_mid,bin_high,"
         "mean_entropy,mean_response_length,denoise_trigger_count,"
         "gate_success_count\n";
  for (const MetricsRow& r : metrics) {
    out << r.step << ',' << format_double(r.mean_reward) << ','
        << format_double(r.zero_reward_ratio) << ',' << r.bin_failure << ','
        << r.bin_mid << ',' << r.bin_high << ',' << format_double(r.mean_entropy)
        << ',' << format_double(r.mean_response_length) << ','
        << r.denoise_trigger_count << ',' << r.gate_success_count << '\n';
  }
  return out.str();
}

}  // namespace

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_metrics_csv(const std::filesystem::path& path,
                       std::span<const MetricsRow> metrics) {
  write_text_atomic(path, metrics_to_csv(metrics));
}

void write_timings_csv(const std::filesystem::path& path,
                       std::span<const MetricsRow> metrics) {
  std::ostringstream out;
  out << "step,wall_ms\n";
  for (const MetricsRow& r : metrics) {
    out << r.step << ',' << format_double(r.wall_ms) << '\n';
  }
  write_text_atomic(path, out.str());
}

RunSummary run_experiment(const ExperimentConfig& config,
                          const std::filesystem::path& out_dir,
                          const std::string& tag) {
  const bool write_files = !out_dir.empty();
  if (write_files) std::filesystem::create_directories(out_dir);

  TrainHooks hooks;
  if (write_files) {
    hooks.on_checkpoint = [&](int step, const PolicyParams& params) {
      const bool final = step == config.steps;
      std::ostringstream name;
      name << "checkpoint_" << tag;
      if (final) {
        name << "_final.ckpt";
      } else {
        name << "_step" << step << ".ckpt";
      }
      save_checkpoint(out_dir / name.str(), params, config.window);
    };
  }

  TrainResult trained = train(config, hooks);

  RunSummary summary;
  summary.method = config.method;
  summary.seed = config.seed;
  summary.steps_to_target = steps_to_threshold(
      std::span<const MetricsRow>(trained.metrics), config.threshold_target,
      config.threshold_window);
  summary.final_reward =
      trained.metrics.empty() ? 0.0 : trained.metrics.back().mean_reward;
  summary.peak_windowed_reward =
      trailing_peak(trained.metrics, config.threshold_window);
  summary.aborted = trained.aborted;
  summary.abort_reason = trained.abort_reason;
  summary.metrics = std::move(trained.metrics);

  if (write_files) {
    write_metrics_csv(out_dir / ("metrics_" + tag + ".csv"), summary.metrics);
    write_timings_csv(out_dir / ("timings_" + tag + ".csv"), summary.metrics);
  }
  return summary;
}

namespace {

double median_steps(std::span<const RunSummary> runs, Method method) {
  std::vector<double> values;
  for (const RunSummary& run : runs) {
    if (run.method != method) continue;
    values.push_back(run.steps_to_target
                         ? static_cast<double>(*run.steps_to_target)
                         : std::numeric_limits<double>::infinity());
  }
  if (values.empty()) return std::numeric_limits<double>::infinity();
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

CompareResult compare(const ExperimentConfig& base, std::span<const Method> methods,
                      std::span<const std::uint64_t> seeds,
                      const std::filesystem::path& out_dir) {
  CompareResult result;
  for (const Method method : methods) {
    for (const std::uint64_t seed : seeds) {
      ExperimentConfig config = base;
      config.method = method;
      config.seed = seed;
      const std::string tag = to_string(method) + "_seed" + std::to_string(seed);
      result.runs.push_back(run_experiment(config, out_dir, tag));
    }
  }
  for (const Method method : methods) {
    result.medians.push_back({method, median_steps(result.runs, method)});
  }

  if (!out_dir.empty()) {
    std::ostringstream out;
    out << "method,seed,steps_to_threshold,final_reward,peak_windowed_reward,aborted\n";
    for (const RunSummary& run : result.runs) {
      out << to_string(run.method) << ',' << run.seed << ',';
      if (run.steps_to_target) out << *run.steps_to_target;
      out << ',' << format_double(run.final_reward) << ','
          << format_double(run.peak_windowed_reward) << ',' << (run.aborted ? 1 : 0)
          << '\n';
    }
    for (const MethodMedian& median : result.medians) {
      out << to_string(median.method) << ",median,";
      if (std::isfinite(median.median_steps_to_target)) {
        out << format_double(median.median_steps_to_target);
      }
      out << ",,,\n";
    }
    write_text_atomic(out_dir / "summary.csv", out.str());
  }
  return result;
}

std::vector<SweepRow> sweep(const ExperimentConfig& base, const std::string& key,
                            std::span<const double> values,
                            std::span<const std::uint64_t> seeds,
                            const std::filesystem::path& out_dir) {
  if (key != "gamma" && key != "tau") {
    throw std::invalid_argument("sweep key must be gamma or tau");
  }
  std::vector<SweepRow> rows;
  for (const double value : values) {
    for (const std::uint64_t seed : seeds) {
      ExperimentConfig config = base;
      config.method = Method::kLens;
      config.seed = seed;
      if (key == "gamma") {
        config.gamma = value;
      } else {
        config.tau = value;
      }
      const std::vector<std::string> errors = validate_config(config);
      if (!errors.empty()) throw ConfigError(errors.front());
      const std::string tag =
          key + format_double(value) + "_seed" + std::to_string(seed);
      RunSummary summary = run_experiment(config, out_dir, tag);
      rows.push_back({value, seed, summary.final_reward, summary.peak_windowed_reward});
    }
  }
  if (!out_dir.empty()) {
    std::ostringstream out;
    out << key << ",seed,final_reward,peak_windowed_reward\n";
    for (const SweepRow& row : rows) {
      out << format_double(row.value) << ',' << row.seed << ','
          << format_double(row.final_reward) << ','
          << format_double(row.peak_windowed_reward) << '\n';
    }
    write_text_atomic(out_dir / ("sweep_" + key + ".csv"), out.str());
  }
  return rows;
}

std::vector<DiagnoseRow> diagnose(const ExperimentConfig& config,
                                  const PolicyParams& theta, const PolicyParams& ref,
                                  int n_prompts) {
  const TaskConfig task = task_from(config);
  const PolicyConfig pcfg = policy_config_from(config);
  std::vector<DiagnoseRow> rows;
  for (int j = 0; j < n_prompts; ++j) {
    RngStream env_rng = derive_rng(config.seed, 0, j, kLaneEval);
    const Instance instance = generate_instance(task, env_rng);
    const std::vector<double> scores =
        interference_scores(theta, ref, pcfg, instance.prompt);
    const InterferenceProfile profile = select_interference_set(scores, config.gamma);
    std::vector<std::uint8_t> selected(scores.size(), 0);
    for (int p : profile.selected) selected[p] = 1;
    const auto& mask = instance.prompt.distractor_mask;
    for (size_t p = 0; p < scores.size(); ++p) {
      rows.push_back({j, static_cast<int>(p), instance.prompt.tokens[p], scores[p],
                      mask && (*mask)[p] ? 1 : 0, selected[p] ? 1 : 0});
    }
  }
  return rows;
}

void write_diagnose_csv(const std::filesystem::path& path,
                        std::span<const DiagnoseRow> rows) {
  std::ostringstream out;
  out << "prompt_id,position,token_id,score,is_distractor,selected\n";
  for (const DiagnoseRow& r : rows) {
    out << r.prompt_id << ',' << r.position << ',' << r.token_id << ','
        << format_double(r.score) << ',' << r.is_distractor << ',' << r.selected
        << '\n';
  }
  write_text_atomic(path, out.str());
}

PurifyEvalResult purify_eval(const ExperimentConfig& config,
                             const PolicyParams& theta, const PolicyParams& ref,
                             int n_prompts) {
  const TaskConfig task = task_from(config);
  const PolicyConfig pcfg = policy_config_from(config);
  const int m = config.rollouts;
  const int L = config.max_response_len;

  PurifyEvalResult result;
  struct Evaluated {
    std::vector<int> selected;
    std::vector<std::uint8_t> mask;
  };
  std::vector<Evaluated> evaluated;

  const int max_attempts = std::max(1000, 50 * n_prompts);
  int attempts = 0;
  double improvement_sum = 0.0;
  long selected_total = 0;
  long selected_distractors = 0;
  long positions_total = 0;
  long distractors_total = 0;

  while (result.summary.n_evaluated + result.summary.n_degenerate < n_prompts &&
         attempts < max_attempts) {
    const int j = attempts++;
    RngStream env_rng = derive_rng(config.seed, 0, j, kLaneEval);
    const Instance instance = generate_instance(task, env_rng);

    RngStream roll_rng = derive_rng(config.seed, 0, j, kLaneEvalRollout);
    const RolloutGroup group = rollout_group(theta, pcfg, instance, m, L, roll_rng);
    if (group.a_bar >= config.tau) continue;
    ++result.summary.n_low_success;

    const std::vector<double> scores =
        interference_scores(theta, ref, pcfg, instance.prompt);
    const InterferenceProfile profile = select_interference_set(scores, config.gamma);
    if (profile.degenerate) {
      ++result.summary.n_degenerate;
      continue;
    }

    const Prompt denoised = purify(instance.prompt, profile);
    RngStream denoised_rng = derive_rng(config.seed, 0, j, kLaneEvalDenoised);
    int successes = 0;
    for (int i = 0; i < m; ++i) {
      SampleResult sample =
          sample_response(theta, pcfg, denoised.tokens, L, denoised_rng);
      successes += verify(sample.tokens, instance);
    }
    const double denoised_acc = static_cast<double>(successes) / m;

    PurifyEvalRow row;
    row.prompt_id = j;
    row.original_acc = group.a_bar;
    row.denoised_acc = denoised_acc;
    row.improved = denoised_acc > group.a_bar ? 1 : 0;
    row.k = profile.k;
    row.prompt_len = instance.prompt.length();
    const auto& mask = *instance.prompt.distractor_mask;
    for (int p : profile.selected) row.selected_distractors += mask[p] ? 1 : 0;
    for (std::uint8_t b : mask) row.n_distractors += b ? 1 : 0;
    result.rows.push_back(row);

    evaluated.push_back({profile.selected, mask});
    ++result.summary.n_evaluated;
    improvement_sum += denoised_acc - group.a_bar;
    selected_total += row.k;
    selected_distractors += row.selected_distractors;
    positions_total += row.prompt_len;
    distractors_total += row.n_distractors;
  }
  result.summary.n_scanned = attempts;

  if (result.summary.n_evaluated > 0) {
    const int n = result.summary.n_evaluated;
    int improved = 0;
    for (const PurifyEvalRow& row : result.rows) improved += row.improved;
    result.summary.fraction_improved = static_cast<double>(improved) / n;
    result.summary.mean_improvement = improvement_sum / n;
    result.summary.pruned_precision =
        static_cast<double>(selected_distractors) / selected_total;
    result.summary.distractor_base_rate =
        static_cast<double>(distractors_total) / positions_total;

    // Uniform random pruning control: same per-prompt k, pooled precision per
    // trial; the spread across trials gives the Monte Carlo standard error.
    constexpr int kTrials = 200;
    double sum = 0.0;
    double sum_sq = 0.0;
    for (int trial = 0; trial < kTrials; ++trial) {
      long hits = 0;
      for (size_t e = 0; e < evaluated.size(); ++e) {
        RngStream control_rng =
            derive_rng(config.seed, trial, static_cast<std::uint64_t>(e),
                       kLaneEvalControl);
        const int len = static_cast<int>(evaluated[e].mask.size());
        const int k = static_cast<int>(evaluated[e].selected.size());
        std::vector<int> pool(len);
        for (int i = 0; i < len; ++i) pool[i] = i;
        for (int i = 0; i < k; ++i) {
          int x = i + control_rng.uniform_int(len - i);
          std::swap(pool[i], pool[x]);
          hits += evaluated[e].mask[pool[i]] ? 1 : 0;
        }
      }
      const double precision = static_cast<double>(hits) / selected_total;
      sum += precision;
      sum_sq += precision * precision;
    }
    result.summary.random_precision_mean = sum / kTrials;
    const double var =
        std::max(0.0, sum_sq / kTrials - result.summary.random_precision_mean *
                                             result.summary.random_precision_mean);
    result.summary.random_precision_se = std::sqrt(var / kTrials);
  }
  return result;
}

void write_purify_eval_csv(const std::filesystem::path& rows_path,
                           const std::filesystem::path& summary_path,
                           const PurifyEvalResult& result) {
  {
    std::ostringstream out;
    out << "prompt_id,original_acc,denoised_acc,improved,k,selected_distractors,"
           "prompt_len,n_distractors\n";
    for (const PurifyEvalRow& r : result.rows) {
      out << r.prompt_id << ',' << format_double(r.original_acc) << ','
          << format_double(r.denoised_acc) << ',' << r.improved << ',' << r.k << ','
          << r.selected_distractors << ',' << r.prompt_len << ',' << r.n_distractors
          << '\n';
    }
    write_text_atomic(rows_path, out.str());
  }
  {
    const PurifyEvalSummary& s = result.summary;
    std::ostringstream out;
    out << "n_scanned,n_low_success,n_degenerate,n_evaluated,fraction_improved,"
           "mean_improvement,pruned_precision,random_precision_mean,"
           "random_precision_se,distractor_base_rate\n";
    out << s.n_scanned << ',' << s.n_low_success << ',' << s.n_degenerate << ','
        << s.n_evaluated << ',' << format_double(s.fraction_improved) << ','
        << format_double(s.mean_improvement) << ','
        << format_double(s.pruned_precision) << ','
        << format_double(s.random_precision_mean) << ','
        << format_double(s.random_precision_se) << ','
        << format_double(s.distractor_base_rate) << '\n';
    write_text_atomic(summary_path, out.str());
  }
}

namespace {

// One randomized sequence-gradient case: small random policy, prompt and
// response; analytic gradient against central differences of the forward.
struct SeqCase {
  PolicyConfig pcfg;
  PolicyParams params;
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;
};

SeqCase make_seq_case(RngStream& rng) {
  SeqCase c;
  const int V = 4 + rng.uniform_int(5);
  const int d = 1 + rng.uniform_int(4);
  c.pcfg.vocab_size = V;
  c.pcfg.embed_dim = d;
  c.pcfg.window = 1 + rng.uniform_int(4);
  const double temps[] = {0.7, 1.0, 1.3};
  c.pcfg.temperature = temps[rng.uniform_int(3)];
  c.pcfg.bos = 0;
  c.pcfg.eos = 1;
  c.params = PolicyParams::random_init(V, d, 0.5, rng);
  const int prompt_len = rng.uniform_int(7);  // may be empty: bos fallback
  for (int i = 0; i < prompt_len; ++i) c.prompt.push_back(rng.uniform_int(V));
  const int response_len = 1 + rng.uniform_int(4);
  for (int i = 0; i < response_len; ++i) c.response.push_back(rng.uniform_int(V));
  return c;
}

double max_component_err(std::span<const double> analytic,
                         std::span<const double> fd) {
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double err = std::abs(analytic[i] - fd[i]) / std::max(1.0, std::abs(fd[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

GradCheckReport check_sequence_grad(std::uint64_t seed, int cases, double h,
                                    double tol, double perturb) {
  GradCheckReport report;
  report.name = "sequence_log_prob";
  report.cases = cases;
  for (int c = 0; c < cases; ++c) {
    RngStream rng = derive_rng(seed, static_cast<std::uint64_t>(c), 0, kLaneGradCheck);
    SeqCase sc = make_seq_case(rng);
    std::vector<double> analytic =
        grad_sequence_log_prob(sc.params, sc.pcfg, sc.prompt, sc.response);
    if (perturb != 0.0) analytic[0] += perturb;
    std::vector<double> fd(analytic.size());
    PolicyParams probe = sc.params;
    for (size_t e = 0; e < fd.size(); ++e) {
      const double saved = probe.flat[e];
      probe.flat[e] = saved + h;
      const double up = sequence_log_prob(probe, sc.pcfg, sc.prompt, sc.response);
      probe.flat[e] = saved - h;
      const double down = sequence_log_prob(probe, sc.pcfg, sc.prompt, sc.response);
      probe.flat[e] = saved;
      fd[e] = (up - down) / (2.0 * h);
    }
    const double err = max_component_err(analytic, fd);
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_case = "case " + std::to_string(c);
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

// Randomized objective case built through the real pipeline: rollouts from a
// stale policy, optional denoised injections, Eq-style weights. Cases whose
// ratios sit near a clip kink are rejected and redrawn.
struct ObjectiveCase {
  PolicyConfig pcfg;
  PolicyParams theta;
  PolicyParams ref;
  std::vector<WeightedGroup> groups;
  ObjectiveOptions options;
};

ObjectiveCase make_objective_case(RngStream& rng, bool grpo_mode, int case_index) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    ObjectiveCase oc;
    const int V = 5 + rng.uniform_int(4);
    const int d = 1 + rng.uniform_int(4);
    oc.pcfg.vocab_size = V;
    oc.pcfg.embed_dim = d;
    oc.pcfg.window = 1 + rng.uniform_int(3);
    oc.pcfg.temperature = 1.0;
    oc.pcfg.bos = 0;
    oc.pcfg.eos = 1;
    oc.options.eps_clip = 0.2;
    oc.options.beta = 0.01;
    oc.options.eps_sigma = 1e-8;
    oc.options.surrogate_normalized_weights = (case_index % 2) == 1;

    PolicyParams pol_old = PolicyParams::random_init(V, d, 0.5, rng);
    oc.ref = PolicyParams::random_init(V, d, 0.5, rng);
    oc.theta = pol_old;
    const double drift = (case_index % 3 == 0) ? 0.3 : 0.05;
    for (double& v : oc.theta.flat) v += drift * rng.normal();

    const int m = 2 + rng.uniform_int(7);
    const int L = 1 + rng.uniform_int(3);
    const int n_groups = 1 + rng.uniform_int(2);
    std::vector<RolloutGroup> groups;
    for (int g = 0; g < n_groups; ++g) {
      Instance instance;
      const int prompt_len = 3 + rng.uniform_int(5);
      for (int i = 0; i < prompt_len; ++i) {
        instance.prompt.tokens.push_back(rng.uniform_int(V));
      }
      instance.answer = rng.uniform_int(V);
      RolloutGroup group = rollout_group(pol_old, oc.pcfg, instance, m, L, rng);
      if (!grpo_mode) {
        group = maybe_denoise(pol_old, oc.ref, oc.pcfg, std::move(group), 1.0, 0.3,
                              m, L, rng);
      }
      groups.push_back(std::move(group));
    }

    // Reject draws near the clip kinks or the std floor so the central
    // difference stays on one smooth branch.
    bool near_kink = false;
    const double lo = std::log(1.0 - oc.options.eps_clip);
    const double hi = std::log(1.0 + oc.options.eps_clip);
    for (const RolloutGroup& group : groups) {
      WeightedGroup wg = compute_weights(group, grpo_mode);
      double mean = 0.0;
      for (int i = 0; i < group.size(); ++i) {
        mean += wg.w[i] * group.rollouts[i].reward;
      }
      double var = 0.0;
      for (int i = 0; i < group.size(); ++i) {
        const double dev = group.rollouts[i].reward - mean;
        var += wg.w[i] * dev * dev;
      }
      if (std::abs(std::sqrt(var) - oc.options.eps_sigma) < 1e-6) near_kink = true;
      for (const Rollout& rollout : group.rollouts) {
        const double log_rho =
            importance_log_ratio(oc.theta, oc.pcfg, group.instance.prompt, rollout);
        if (std::abs(log_rho - lo) < 1e-3 || std::abs(log_rho - hi) < 1e-3 ||
            std::abs(log_rho) > 19.0) {
          near_kink = true;
        }
      }
      oc.groups.push_back(std::move(wg));
    }
    if (near_kink) continue;
    return oc;
  }
  throw std::runtime_error("could not draw a kink-free objective case");
}

GradCheckReport check_objective_grad(std::uint64_t seed, int cases, double h,
                                     double tol, bool grpo_mode, double perturb) {
  GradCheckReport report;
  report.name = grpo_mode ? "grpo_loss_grad" : "crpo_loss_grad";
  report.cases = cases;
  for (int c = 0; c < cases; ++c) {
    RngStream rng =
        derive_rng(seed, static_cast<std::uint64_t>(c), grpo_mode ? 1 : 2,
                   kLaneGradCheck);
    ObjectiveCase oc = make_objective_case(rng, grpo_mode, c);

    auto loss_at = [&](const PolicyParams& p) {
      if (grpo_mode) {
        std::vector<RolloutGroup> raw;
        for (const WeightedGroup& wg : oc.groups) raw.push_back(wg.group);
        return grpo_loss_grad(p, oc.ref, oc.pcfg, raw, oc.options).loss;
      }
      return crpo_loss_grad(p, oc.ref, oc.pcfg, oc.groups, oc.options).loss;
    };

    std::vector<double> analytic;
    if (grpo_mode) {
      std::vector<RolloutGroup> raw;
      for (const WeightedGroup& wg : oc.groups) raw.push_back(wg.group);
      analytic = grpo_loss_grad(oc.theta, oc.ref, oc.pcfg, raw, oc.options).grad;
    } else {
      analytic = crpo_loss_grad(oc.theta, oc.ref, oc.pcfg, oc.groups, oc.options).grad;
    }
    if (perturb != 0.0) analytic[0] += perturb;

    std::vector<double> fd(analytic.size());
    PolicyParams probe = oc.theta;
    for (size_t e = 0; e < fd.size(); ++e) {
      const double saved = probe.flat[e];
      probe.flat[e] = saved + h;
      const double up = loss_at(probe);
      probe.flat[e] = saved - h;
      const double down = loss_at(probe);
      probe.flat[e] = saved;
      fd[e] = (up - down) / (2.0 * h);
    }
    const double err = max_component_err(analytic, fd);
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_case = "case " + std::to_string(c);
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace

GradCheckSuite run_gradcheck(std::uint64_t seed, int cases, double fd_step,
                             double tol, double perturb) {
  GradCheckSuite suite;
  suite.reports.push_back(check_sequence_grad(seed, cases, fd_step, tol, perturb));
  suite.reports.push_back(
      check_objective_grad(seed, cases, fd_step, tol, /*grpo_mode=*/false, perturb));
  suite.reports.push_back(
      check_objective_grad(seed, cases, fd_step, tol, /*grpo_mode=*/true, perturb));
  suite.pass = std::all_of(suite.reports.begin(), suite.reports.end(),
                           [](const GradCheckReport& r) { return r.pass; });
  return suite;
}

}  // namespace lenslab
