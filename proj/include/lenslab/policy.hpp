#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "lenslab/core.hpp"

namespace lenslab {

struct PolicyConfig {
  int vocab_size = 0;
  int embed_dim = 0;
  int window = 1;
  double temperature = 1.0;
  TokenId bos = 0;
  TokenId eos = 1;
};

// Mean-embedding linear-softmax policy. Next-token logits are
// z_a = u_a . f(s) / temperature where f(s) is the mean embedding of the
// last min(window, |s|) prefix tokens (an empty prefix is read as [bos]).
//
// Parameters live in one flat vector: the V x d embedding matrix E row-major,
// then the V x d output matrix U row-major. Every gradient, optimizer state
// and checkpoint uses this ordering.
struct PolicyParams {
  int vocab_size = 0;
  int embed_dim = 0;
  std::vector<double> flat;

  static PolicyParams zeros(int vocab_size, int embed_dim);
  static PolicyParams random_init(int vocab_size, int embed_dim, double stddev,
                                  RngStream& rng);

  int flat_size() const { return 2 * vocab_size * embed_dim; }

  std::span<double> embed_row(TokenId t) {
    return {flat.data() + static_cast<size_t>(t) * embed_dim,
            static_cast<size_t>(embed_dim)};
  }
  std::span<const double> embed_row(TokenId t) const {
    return {flat.data() + static_cast<size_t>(t) * embed_dim,
            static_cast<size_t>(embed_dim)};
  }
  std::span<double> output_row(TokenId t) {
    return {flat.data() + static_cast<size_t>(vocab_size + t) * embed_dim,
            static_cast<size_t>(embed_dim)};
  }
  std::span<const double> output_row(TokenId t) const {
    return {flat.data() + static_cast<size_t>(vocab_size + t) * embed_dim,
            static_cast<size_t>(embed_dim)};
  }

  bool all_finite() const;
};

// Log-softmax over the next token given `prefix`; entries sum to 1 after exp.
std::vector<double> token_log_probs(const PolicyParams& params,
                                    const PolicyConfig& config,
                                    std::span<const TokenId> prefix);

// Sum of per-position next-token log-probs of `response` given `prompt`.
double sequence_log_prob(const PolicyParams& params, const PolicyConfig& config,
                         std::span<const TokenId> prompt,
                         std::span<const TokenId> response);

struct SampleResult {
  std::vector<TokenId> tokens;
  double log_prob = 0.0;     // behavior log-probability of the sample
  double entropy_sum = 0.0;  // summed next-token entropies at each position
};

// Ancestral sampling; stops at eos or after max_len tokens. The returned
// sequence always has length in [1, max_len] and includes the eos if drawn.
SampleResult sample_response(const PolicyParams& params, const PolicyConfig& config,
                             std::span<const TokenId> prompt, int max_len,
                             RngStream& rng);

// Exact analytic gradient of sequence_log_prob w.r.t. the flat parameters.
std::vector<double> grad_sequence_log_prob(const PolicyParams& params,
                                           const PolicyConfig& config,
                                           std::span<const TokenId> prompt,
                                           std::span<const TokenId> response);

// Adds coeff * d(sequence_log_prob)/d(params) into grad (length 2*V*d).
void accumulate_grad_sequence_log_prob(const PolicyParams& params,
                                       const PolicyConfig& config,
                                       std::span<const TokenId> prompt,
                                       std::span<const TokenId> response,
                                       double coeff, std::span<double> grad);

// Chain rule from d(loss)/d(logits) at a single prefix into the flat
// parameter gradient. `dlogits` is w.r.t. the temperature-scaled logits.
void accumulate_logit_backprop(const PolicyParams& params,
                               const PolicyConfig& config,
                               std::span<const TokenId> prefix,
                               std::span<const double> dlogits,
                               std::span<double> grad);

// Shannon entropy (nats) of the next-token distribution, in [0, log V].
double token_entropy(const PolicyParams& params, const PolicyConfig& config,
                     std::span<const TokenId> prefix);

// Checkpoint file: 8-byte magic, then version/V/d/window as little-endian
// u32, then the flat parameters as little-endian f64.
struct Checkpoint {
  PolicyParams params;
  int window = 1;
};

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params,
                     int window);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace lenslab
