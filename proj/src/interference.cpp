#include "lenslab/interference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lenslab {

namespace {

constexpr double kDegenerateScore = 1e-12;

std::vector<int> smallest_k_by(std::span<const double> values, int k, bool largest) {
  std::vector<int> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (values[a] != values[b]) return largest ? values[a] > values[b] : values[a] < values[b];
    return a < b;
  });
  std::vector<int> picked(order.begin(), order.begin() + k);
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace

int prune_count(double gamma, int length) {
  if (length < 1) throw std::invalid_argument("prune_count requires length >= 1");
  int k = static_cast<int>(std::ceil(gamma * length - 1e-9));
  return std::clamp(k, 1, length);
}

std::vector<double> interference_scores(const PolicyParams& theta,
                                        const PolicyParams& ref,
                                        const PolicyConfig& config,
                                        const Prompt& prompt) {
  if (prompt.tokens.empty()) throw std::invalid_argument("empty prompt");
  const int n = prompt.length();
  std::vector<double> scores(n);
  for (int j = 0; j < n; ++j) {
    std::span<const TokenId> prefix(prompt.tokens.data(), static_cast<size_t>(j));
    const TokenId t = prompt.tokens[j];
    const double lp_theta = token_log_probs(theta, config, prefix)[t];
    const double lp_ref = token_log_probs(ref, config, prefix)[t];
    scores[j] = std::abs(lp_theta - lp_ref);
  }
  return scores;
}

InterferenceProfile select_interference_set(std::span<const double> scores,
                                            double gamma) {
  if (scores.empty()) throw std::invalid_argument("empty score vector");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must be in (0,1)");

  InterferenceProfile profile;
  profile.scores.assign(scores.begin(), scores.end());
  profile.k = prune_count(gamma, static_cast<int>(scores.size()));
  profile.selected = smallest_k_by(scores, profile.k, /*largest=*/true);
  profile.degenerate =
      *std::max_element(scores.begin(), scores.end()) < kDegenerateScore;
  return profile;
}

Prompt remove_positions(const Prompt& prompt, std::span<const int> positions) {
  const int n = prompt.length();
  std::vector<std::uint8_t> drop(n, 0);
  int prev = -1;
  for (int p : positions) {
    if (p < 0 || p >= n) throw std::out_of_range("prune position out of range");
    if (p <= prev) throw std::invalid_argument("prune positions must be ascending and unique");
    drop[p] = 1;
    prev = p;
  }
  Prompt out;
  out.tokens.reserve(n - positions.size());
  std::vector<std::uint8_t> mask;
  const bool has_mask = prompt.distractor_mask.has_value();
  for (int i = 0; i < n; ++i) {
    if (drop[i]) continue;
    out.tokens.push_back(prompt.tokens[i]);
    if (has_mask) mask.push_back((*prompt.distractor_mask)[i]);
  }
  if (has_mask) out.distractor_mask = std::move(mask);
  return out;
}

Prompt purify(const Prompt& prompt, const InterferenceProfile& profile) {
  return remove_positions(prompt, profile.selected);
}

Prompt random_prune(const Prompt& prompt, double gamma, RngStream& rng) {
  const int n = prompt.length();
  if (n < 1) throw std::invalid_argument("empty prompt");
  const int k = prune_count(gamma, n);
  std::vector<int> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < k; ++i) {
    int j = i + rng.uniform_int(n - i);
    std::swap(pool[i], pool[j]);
  }
  std::vector<int> picked(pool.begin(), pool.begin() + k);
  std::sort(picked.begin(), picked.end());
  return remove_positions(prompt, picked);
}

std::vector<double> prompt_saliency(const PolicyParams& theta,
                                    const PolicyConfig& config,
                                    const Prompt& prompt) {
  if (prompt.tokens.empty()) throw std::invalid_argument("empty prompt");
  const int n = prompt.length();
  const int d = theta.embed_dim;
  const int V = theta.vocab_size;
  const double inv_t = 1.0 / config.temperature;

  // g[p] accumulates dLL/d(e_p) where e_p is position p's embedding use.
  std::vector<std::vector<double>> g(n, std::vector<double>(d, 0.0));

  std::vector<double> feature(d);
  std::vector<double> lp(V);
  // Position 0 is predicted from bos alone and contributes to no prompt
  // position's saliency, so prediction steps start at j = 1.
  for (int j = 1; j < n; ++j) {
    std::span<const TokenId> prefix(prompt.tokens.data(), static_cast<size_t>(j));
    lp = token_log_probs(theta, config, prefix);

    // back_f = (u_y - sum_a p_a u_a) / T for target y = t_j.
    std::vector<double> back_f(d, 0.0);
    for (TokenId a = 0; a < V; ++a) {
      const double p = std::exp(lp[a]);
      auto row = theta.output_row(a);
      for (int k = 0; k < d; ++k) back_f[k] -= p * row[k];
    }
    auto target_row = theta.output_row(prompt.tokens[j]);
    for (int k = 0; k < d; ++k) back_f[k] = (back_f[k] + target_row[k]) * inv_t;

    const int w = std::min(config.window, j);
    const double inv_w = 1.0 / w;
    for (int p = j - w; p < j; ++p) {
      for (int k = 0; k < d; ++k) g[p][k] += inv_w * back_f[k];
    }
  }

  std::vector<double> saliency(n);
  for (int p = 0; p < n; ++p) {
    double sq = 0.0;
    for (double v : g[p]) sq += v * v;
    saliency[p] = std::sqrt(sq);
  }
  return saliency;
}

Prompt gradient_prune(const PolicyParams& theta, const PolicyConfig& config,
                      const Prompt& prompt, double gamma) {
  std::vector<double> saliency = prompt_saliency(theta, config, prompt);
  const int k = prune_count(gamma, prompt.length());
  std::vector<int> picked = smallest_k_by(saliency, k, /*largest=*/false);
  return remove_positions(prompt, picked);
}

}  // namespace lenslab
