#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "lenslab/eval.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 1;
constexpr int kExitRunAbort = 2;
constexpr int kExitGradCheckFailure = 3;

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::string seeds = "";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "Config file (key = value lines)");
  cmd->add_option("--out", opts.out_dir, "Output directory");
  cmd->add_option("--seed", opts.seeds, "Seed or comma-separated seed list");
  cmd->add_option("--set", opts.overrides, "Override config key=value (repeatable)");
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const std::string& part : lenslab::split(text, ',')) {
    if (part.empty()) continue;
    seeds.push_back(std::stoull(part));
  }
  return seeds;
}

// File < --set overrides < --seed, then validation.
lenslab::ExperimentConfig build_config(const CommonOpts& opts) {
  lenslab::ExperimentConfig config;
  if (!opts.config_path.empty()) {
    config = lenslab::load_config_file(opts.config_path);
  }
  for (const std::string& assignment : opts.overrides) {
    lenslab::apply_override(config, assignment);
  }
  const std::vector<std::uint64_t> seeds = parse_seeds(opts.seeds);
  if (!seeds.empty()) config.seed = seeds.front();

  const std::vector<std::string> errors = lenslab::validate_config(config);
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) {
      if (!joined.empty()) joined += "\n";
      joined += e;
    }
    throw lenslab::ConfigError(joined);
  }
  return config;
}

lenslab::PolicyParams load_theta(const lenslab::ExperimentConfig& config,
                                 const std::string& checkpoint_path) {
  if (checkpoint_path.empty()) return lenslab::init_policy(config);
  lenslab::Checkpoint ckpt = lenslab::load_checkpoint(checkpoint_path);
  const lenslab::PolicyConfig pcfg = lenslab::policy_config_from(config);
  if (ckpt.params.vocab_size != pcfg.vocab_size ||
      ckpt.params.embed_dim != pcfg.embed_dim || ckpt.window != pcfg.window) {
    throw lenslab::ConfigError(
        "checkpoint dimensions do not match the config (vocab/dim/window)");
  }
  return ckpt.params;
}

int cmd_train(const CommonOpts& opts) {
  const lenslab::ExperimentConfig config = build_config(opts);
  std::filesystem::create_directories(opts.out_dir);
  lenslab::write_text_atomic(std::filesystem::path(opts.out_dir) / "config_used.cfg",
                             lenslab::config_to_text(config));
  const lenslab::RunSummary summary =
      lenslab::run_experiment(config, opts.out_dir, "run");
  if (summary.aborted) {
    std::cerr << "run aborted: " << summary.abort_reason << "\n";
    return kExitRunAbort;
  }
  std::cout << "trained " << summary.metrics.size() << " steps; final mean reward "
            << lenslab::format_double(summary.final_reward) << "\n";
  return kExitOk;
}

int cmd_compare(const CommonOpts& opts, const std::string& methods_arg) {
  const lenslab::ExperimentConfig config = build_config(opts);
  std::vector<lenslab::Method> methods;
  for (const std::string& name : lenslab::split(methods_arg, ',')) {
    if (name.empty()) continue;
    auto method = lenslab::method_from_string(name);
    if (!method) throw lenslab::ConfigError("unknown method '" + name + "'");
    methods.push_back(*method);
  }
  if (methods.size() < 2) {
    throw lenslab::ConfigError("compare needs at least 2 methods");
  }
  std::vector<std::uint64_t> seeds = parse_seeds(opts.seeds);
  if (seeds.empty()) seeds.push_back(config.seed);

  const lenslab::CompareResult result =
      lenslab::compare(config, methods, seeds, opts.out_dir);
  bool any_abort = false;
  for (const auto& run : result.runs) {
    std::cout << lenslab::to_string(run.method) << " seed " << run.seed
              << ": steps_to_threshold ";
    if (run.steps_to_target) {
      std::cout << *run.steps_to_target;
    } else {
      std::cout << "none";
    }
    std::cout << ", final " << lenslab::format_double(run.final_reward);
    if (run.aborted) {
      std::cout << " [aborted: " << run.abort_reason << "]";
      any_abort = true;
    }
    std::cout << "\n";
  }
  for (const auto& median : result.medians) {
    std::cout << lenslab::to_string(median.method) << " median steps: ";
    if (std::isfinite(median.median_steps_to_target)) {
      std::cout << lenslab::format_double(median.median_steps_to_target) << "\n";
    } else {
      std::cout << "never\n";
    }
  }
  return any_abort ? kExitRunAbort : kExitOk;
}

int cmd_sweep(const CommonOpts& opts, const std::string& key,
              const std::string& values_arg) {
  const lenslab::ExperimentConfig config = build_config(opts);
  std::vector<double> values;
  for (const std::string& part : lenslab::split(values_arg, ',')) {
    if (part.empty()) continue;
    values.push_back(std::stod(part));
  }
  if (values.empty()) throw lenslab::ConfigError("sweep needs --values");
  std::vector<std::uint64_t> seeds = parse_seeds(opts.seeds);
  if (seeds.empty()) seeds.push_back(config.seed);

  const auto rows = lenslab::sweep(config, key, values, seeds, opts.out_dir);
  for (const auto& row : rows) {
    std::cout << key << "=" << lenslab::format_double(row.value) << " seed "
              << row.seed << ": final " << lenslab::format_double(row.final_reward)
              << ", peak " << lenslab::format_double(row.peak_windowed_reward)
              << "\n";
  }
  return kExitOk;
}

int cmd_diagnose(const CommonOpts& opts, const std::string& checkpoint_path,
                 int n_prompts) {
  const lenslab::ExperimentConfig config = build_config(opts);
  const lenslab::PolicyParams theta = load_theta(config, checkpoint_path);
  const lenslab::PolicyParams ref = lenslab::init_policy(config);
  const auto rows = lenslab::diagnose(config, theta, ref, n_prompts);
  std::filesystem::create_directories(opts.out_dir);
  lenslab::write_diagnose_csv(std::filesystem::path(opts.out_dir) / "diagnose.csv",
                              rows);
  std::cout << "wrote " << rows.size() << " score rows for " << n_prompts
            << " prompts\n";
  return kExitOk;
}

int cmd_purify_eval(const CommonOpts& opts, const std::string& checkpoint_path,
                    int n_prompts) {
  const lenslab::ExperimentConfig config = build_config(opts);
  const lenslab::PolicyParams theta = load_theta(config, checkpoint_path);
  const lenslab::PolicyParams ref = lenslab::init_policy(config);
  const lenslab::PurifyEvalResult result =
      lenslab::purify_eval(config, theta, ref, n_prompts);
  std::filesystem::create_directories(opts.out_dir);
  const std::filesystem::path dir(opts.out_dir);
  lenslab::write_purify_eval_csv(dir / "purify_eval.csv",
                                 dir / "purify_eval_summary.csv", result);
  const auto& s = result.summary;
  std::cout << "evaluated " << s.n_evaluated << " low-success prompts ("
            << s.n_degenerate << " degenerate, " << s.n_scanned << " scanned)\n";
  if (s.n_evaluated > 0) {
    std::cout << "fraction improved " << lenslab::format_double(s.fraction_improved)
              << ", pruned precision " << lenslab::format_double(s.pruned_precision)
              << " vs random " << lenslab::format_double(s.random_precision_mean)
              << " (se " << lenslab::format_double(s.random_precision_se)
              << ", base rate " << lenslab::format_double(s.distractor_base_rate)
              << ")\n";
  }
  return kExitOk;
}

int cmd_gradcheck(const CommonOpts& opts, int cases, double fd_step, double tol,
                  double perturb) {
  const lenslab::ExperimentConfig config = build_config(opts);
  const lenslab::GradCheckSuite suite =
      lenslab::run_gradcheck(config.seed, cases, fd_step, tol, perturb);
  for (const auto& report : suite.reports) {
    std::cout << report.name << ": " << report.cases << " cases, max rel err "
              << lenslab::format_double(report.max_rel_err) << " ["
              << (report.pass ? "pass" : "FAIL");
    if (!report.pass) std::cout << " at " << report.worst_case;
    std::cout << "]\n";
  }
  return suite.pass ? kExitOk : kExitGradCheckFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interference-token purification and calibrated rollout policy "
               "optimization on a differentiable toy policy"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string methods_arg;
  std::string values_arg;
  std::string checkpoint_path;
  int n_prompts = 200;
  int cases = 100;
  double fd_step = 1e-5;
  double tol = 1e-4;
  double perturb = 0.0;

  CLI::App* train = app.add_subcommand("train", "Train one run, emit metrics CSV");
  add_common(train, opts);

  CLI::App* compare =
      app.add_subcommand("compare", "Matched-seed method comparison");
  add_common(compare, opts);
  compare->add_option("--methods", methods_arg, "Comma-separated methods")
      ->required();

  CLI::App* sweep_gamma =
      app.add_subcommand("sweep-gamma", "Sweep the deletion ratio");
  add_common(sweep_gamma, opts);
  sweep_gamma->add_option("--values", values_arg, "Comma-separated gamma values")
      ->required();

  CLI::App* sweep_tau =
      app.add_subcommand("sweep-tau", "Sweep the success-rate threshold");
  add_common(sweep_tau, opts);
  sweep_tau->add_option("--values", values_arg, "Comma-separated tau values")
      ->required();

  CLI::App* diagnose =
      app.add_subcommand("diagnose", "Per-token interference score CSV");
  add_common(diagnose, opts);
  diagnose->add_option("--checkpoint", checkpoint_path, "Policy checkpoint");
  diagnose->add_option("--n-prompts", n_prompts, "Number of prompts to score");

  CLI::App* purify_eval = app.add_subcommand(
      "purify-eval", "Purification quality on low-success prompts");
  add_common(purify_eval, opts);
  purify_eval->add_option("--checkpoint", checkpoint_path, "Policy checkpoint");
  purify_eval->add_option("--n-prompts", n_prompts, "Low-success prompts to evaluate");

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  add_common(gradcheck, opts);
  gradcheck->add_option("--cases", cases, "Random cases per check");
  gradcheck->add_option("--fd-step", fd_step, "Central difference step");
  gradcheck->add_option("--tol", tol, "Max relative error tolerance");
  gradcheck->add_option("--perturb", perturb,
                        "Fault-injection offset added to one gradient component");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(opts);
    if (compare->parsed()) return cmd_compare(opts, methods_arg);
    if (sweep_gamma->parsed()) return cmd_sweep(opts, "gamma", values_arg);
    if (sweep_tau->parsed()) return cmd_sweep(opts, "tau", values_arg);
    if (diagnose->parsed()) return cmd_diagnose(opts, checkpoint_path, n_prompts);
    if (purify_eval->parsed())
      return cmd_purify_eval(opts, checkpoint_path, n_prompts);
    if (gradcheck->parsed())
      return cmd_gradcheck(opts, cases, fd_step, tol, perturb);
  } catch (const lenslab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "run aborted: " << e.what() << "\n";
    return kExitRunAbort;
  }
  return kExitOk;
}
