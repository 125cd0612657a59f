#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lenslab {

using TokenId = std::int32_t;

// Half-open id interval [begin, end).
struct IdRange {
  TokenId begin = 0;
  TokenId end = 0;

  int size() const { return static_cast<int>(end - begin); }
  bool contains(TokenId t) const { return t >= begin && t < end; }
};

// Vocabulary regions: four special ids followed by the key, value and
// distractor blocks. The regions tile [0, vocab_size) exactly.
struct VocabLayout {
  int vocab_size = 0;
  TokenId bos = 0;
  TokenId eos = 1;
  TokenId query = 2;
  TokenId sep = 3;
  IdRange keys;
  IdRange values;
  IdRange distractors;

  bool is_special(TokenId t) const {
    return t == bos || t == eos || t == query || t == sep;
  }
};

VocabLayout make_vocab_layout(int key_count, int value_count, int distractor_count);
std::vector<std::string> validate_layout(const VocabLayout& layout);

struct Prompt {
  std::vector<TokenId> tokens;
  // Ground truth for injected distractors; diagnostics only, never read by
  // the training algorithms.
  std::optional<std::vector<std::uint8_t>> distractor_mask;

  int length() const { return static_cast<int>(tokens.size()); }
};

// Deterministic random stream. All draw helpers are hand-rolled on top of
// mt19937_64 so that identical derive inputs give identical draw sequences
// on every platform and under any thread schedule.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed_word) : gen_(seed_word) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform over [0, n), unbiased via rejection.
  int uniform_int(int n);

  bool bernoulli(double p) { return uniform01() < p; }

  // Standard normal via Box-Muller; consumes exactly two draws per call.
  double normal();

 private:
  std::mt19937_64 gen_;
};

// Stream lanes keep independent purposes (instances, rollouts, denoising,
// parameter init, offline evaluation) on disjoint streams so that consuming
// one never perturbs another.
inline constexpr std::uint64_t kLaneEnv = 0;
inline constexpr std::uint64_t kLaneRollout = 1;
inline constexpr std::uint64_t kLaneDenoise = 2;
inline constexpr std::uint64_t kLaneInit = 3;
inline constexpr std::uint64_t kLaneEval = 4;
inline constexpr std::uint64_t kLaneEvalRollout = 5;
inline constexpr std::uint64_t kLaneEvalDenoised = 6;
inline constexpr std::uint64_t kLaneEvalControl = 7;
inline constexpr std::uint64_t kLaneGradCheck = 8;

// Pure function of its arguments: the stream seed is a splitmix64 hash chain
// over (seed, step, prompt_index, lane).
RngStream derive_rng(std::uint64_t seed, std::uint64_t step,
                     std::uint64_t prompt_index, std::uint64_t lane = 0);

enum class Method {
  kGrpo,
  kLens,
  kDapoFilter,
  kResample,
  kRandomPrune,
  kGradPrune,
};

std::string to_string(Method m);
std::optional<Method> method_from_string(std::string_view name);

struct ExperimentConfig {
  std::uint64_t seed = 7;
  Method method = Method::kLens;
  int steps = 400;
  int batch_size = 64;
  int rollouts = 8;           // m, group size
  int max_response_len = 4;   // L
  double tau = 0.5;           // success-rate threshold
  double gamma = 0.12;        // deletion ratio
  double eps_clip = 0.2;
  double beta = 0.001;        // KL coefficient
  double eps_sigma = 1e-8;    // std floor for advantages
  double temperature = 1.0;
  double learning_rate = 0.02;
  bool uniform_weights = false;
  bool surrogate_normalized_weights = false;
  int embed_dim = 16;
  int window = 4;
  double init_std = 0.02;
  int pairs = 3;              // P key-value pairs per instance
  double distractor_rate = 0.2;
  int key_count = 8;
  int value_count = 8;
  int distractor_count = 12;
  int checkpoint_interval = 100;
  double threshold_target = 0.7;
  int threshold_window = 20;
  int threads = 1;
};

// Returns one message per violated bound; empty means valid.
std::vector<std::string> validate_config(const ExperimentConfig& config);

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat `key = value` text, `#` comment lines, unknown keys are errors.
ExperimentConfig parse_config_text(std::string_view text,
                                   ExperimentConfig base = {});
ExperimentConfig load_config_file(const std::string& path,
                                  ExperimentConfig base = {});
// Applies one `key=value` override in place; throws ConfigError on unknown
// keys or malformed values.
void apply_override(ExperimentConfig& config, std::string_view assignment);
// Config keys in canonical order, `key = value` per line.
std::string config_to_text(const ExperimentConfig& config);

// Shortest round-trip decimal formatting; reruns must be byte-comparable.
std::string format_double(double value);

std::vector<std::string> split(std::string_view text, char sep);

}  // namespace lenslab
