#include "lenslab/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lenslab {

namespace {

constexpr char kCheckpointMagic[8] = {'L', 'N', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

void require_finite(const PolicyParams& params) {
  if (!params.all_finite()) throw std::invalid_argument("non-finite params");
}

void require_tokens_in_range(std::span<const TokenId> tokens, int vocab_size) {
  for (TokenId t : tokens) {
    if (t < 0 || t >= vocab_size) {
      throw std::out_of_range("token id out of range: " + std::to_string(t));
    }
  }
}

// Trailing context window of `prefix`, or the single bos token when empty.
struct Window {
  const TokenId* tokens;
  int size;
};

Window context_window(const PolicyConfig& config, std::span<const TokenId> prefix,
                      const TokenId* bos_storage) {
  if (prefix.empty()) return {bos_storage, 1};
  int w = std::min<int>(config.window, static_cast<int>(prefix.size()));
  return {prefix.data() + prefix.size() - w, w};
}

void window_mean_feature(const PolicyParams& params, const Window& win,
                         std::span<double> feature) {
  std::fill(feature.begin(), feature.end(), 0.0);
  for (int i = 0; i < win.size; ++i) {
    auto row = params.embed_row(win.tokens[i]);
    for (int k = 0; k < params.embed_dim; ++k) feature[k] += row[k];
  }
  const double inv = 1.0 / win.size;
  for (int k = 0; k < params.embed_dim; ++k) feature[k] *= inv;
}

// Log-softmax of u_a . f / T into `out` (size V).
void log_probs_from_feature(const PolicyParams& params, const PolicyConfig& config,
                            std::span<const double> feature, std::span<double> out) {
  const int V = params.vocab_size;
  const int d = params.embed_dim;
  const double inv_t = 1.0 / config.temperature;
  double max_logit = -std::numeric_limits<double>::infinity();
  for (TokenId a = 0; a < V; ++a) {
    auto row = params.output_row(a);
    double z = 0.0;
    for (int k = 0; k < d; ++k) z += row[k] * feature[k];
    z *= inv_t;
    out[a] = z;
    max_logit = std::max(max_logit, z);
  }
  double sum = 0.0;
  for (TokenId a = 0; a < V; ++a) sum += std::exp(out[a] - max_logit);
  const double lse = max_logit + std::log(sum);
  for (TokenId a = 0; a < V; ++a) out[a] -= lse;
}

void log_probs_at_prefix(const PolicyParams& params, const PolicyConfig& config,
                         std::span<const TokenId> prefix, std::span<double> feature,
                         std::span<double> out) {
  const TokenId bos = config.bos;
  Window win = context_window(config, prefix, &bos);
  window_mean_feature(params, win, feature);
  log_probs_from_feature(params, config, feature, out);
}

}  // namespace

PolicyParams PolicyParams::zeros(int vocab_size, int embed_dim) {
  PolicyParams p;
  p.vocab_size = vocab_size;
  p.embed_dim = embed_dim;
  p.flat.assign(static_cast<size_t>(2) * vocab_size * embed_dim, 0.0);
  return p;
}

PolicyParams PolicyParams::random_init(int vocab_size, int embed_dim, double stddev,
                                       RngStream& rng) {
  PolicyParams p = zeros(vocab_size, embed_dim);
  for (double& v : p.flat) v = stddev * rng.normal();
  return p;
}

bool PolicyParams::all_finite() const {
  for (double v : flat) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::vector<double> token_log_probs(const PolicyParams& params,
                                    const PolicyConfig& config,
                                    std::span<const TokenId> prefix) {
  require_finite(params);
  require_tokens_in_range(prefix, params.vocab_size);
  std::vector<double> feature(params.embed_dim);
  std::vector<double> out(params.vocab_size);
  log_probs_at_prefix(params, config, prefix, feature, out);
  return out;
}

double sequence_log_prob(const PolicyParams& params, const PolicyConfig& config,
                         std::span<const TokenId> prompt,
                         std::span<const TokenId> response) {
  if (response.empty()) throw std::invalid_argument("empty response");
  require_finite(params);
  require_tokens_in_range(prompt, params.vocab_size);
  require_tokens_in_range(response, params.vocab_size);

  std::vector<TokenId> context(prompt.begin(), prompt.end());
  context.insert(context.end(), response.begin(), response.end());

  std::vector<double> feature(params.embed_dim);
  std::vector<double> lp(params.vocab_size);
  double total = 0.0;
  for (size_t j = 0; j < response.size(); ++j) {
    std::span<const TokenId> prefix(context.data(), prompt.size() + j);
    log_probs_at_prefix(params, config, prefix, feature, lp);
    total += lp[response[j]];
  }
  return total;
}

SampleResult sample_response(const PolicyParams& params, const PolicyConfig& config,
                             std::span<const TokenId> prompt, int max_len,
                             RngStream& rng) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  require_finite(params);
  require_tokens_in_range(prompt, params.vocab_size);

  const int V = params.vocab_size;
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  std::vector<double> feature(params.embed_dim);
  std::vector<double> lp(V);

  SampleResult result;
  result.tokens.reserve(max_len);
  for (int step = 0; step < max_len; ++step) {
    log_probs_at_prefix(params, config, context, feature, lp);

    double entropy = 0.0;
    for (int a = 0; a < V; ++a) entropy -= std::exp(lp[a]) * lp[a];
    result.entropy_sum += entropy;

    // Inverse-CDF draw in natural token order.
    const double u = rng.uniform01();
    double cum = 0.0;
    TokenId chosen = V - 1;
    for (TokenId a = 0; a < V; ++a) {
      cum += std::exp(lp[a]);
      if (u < cum) {
        chosen = a;
        break;
      }
    }
    result.tokens.push_back(chosen);
    result.log_prob += lp[chosen];
    context.push_back(chosen);
    if (chosen == config.eos) break;
  }
  return result;
}

void accumulate_logit_backprop(const PolicyParams& params,
                               const PolicyConfig& config,
                               std::span<const TokenId> prefix,
                               std::span<const double> dlogits,
                               std::span<double> grad) {
  const int V = params.vocab_size;
  const int d = params.embed_dim;
  const double inv_t = 1.0 / config.temperature;

  const TokenId bos = config.bos;
  Window win = context_window(config, prefix, &bos);
  std::vector<double> feature(d);
  window_mean_feature(params, win, feature);

  // dz_a/dU_a = f / T.
  for (TokenId a = 0; a < V; ++a) {
    const double s = dlogits[a] * inv_t;
    if (s == 0.0) continue;
    double* u_grad = grad.data() + static_cast<size_t>(V + a) * d;
    for (int k = 0; k < d; ++k) u_grad[k] += s * feature[k];
  }

  // dL/df = sum_a dlogits_a * u_a / T, split evenly over window tokens.
  std::vector<double> back_f(d, 0.0);
  for (TokenId a = 0; a < V; ++a) {
    const double s = dlogits[a] * inv_t;
    if (s == 0.0) continue;
    auto row = params.output_row(a);
    for (int k = 0; k < d; ++k) back_f[k] += s * row[k];
  }
  const double inv_w = 1.0 / win.size;
  for (int i = 0; i < win.size; ++i) {
    double* e_grad = grad.data() + static_cast<size_t>(win.tokens[i]) * d;
    for (int k = 0; k < d; ++k) e_grad[k] += inv_w * back_f[k];
  }
}

void accumulate_grad_sequence_log_prob(const PolicyParams& params,
                                       const PolicyConfig& config,
                                       std::span<const TokenId> prompt,
                                       std::span<const TokenId> response,
                                       double coeff, std::span<double> grad) {
  if (response.empty()) throw std::invalid_argument("empty response");
  require_finite(params);
  require_tokens_in_range(prompt, params.vocab_size);
  require_tokens_in_range(response, params.vocab_size);
  if (coeff == 0.0) return;

  const int V = params.vocab_size;
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  context.insert(context.end(), response.begin(), response.end());

  std::vector<double> feature(params.embed_dim);
  std::vector<double> lp(V);
  std::vector<double> dlogits(V);
  for (size_t j = 0; j < response.size(); ++j) {
    std::span<const TokenId> prefix(context.data(), prompt.size() + j);
    log_probs_at_prefix(params, config, prefix, feature, lp);
    // d(log p_y)/dz_a = 1[a = y] - p_a.
    const TokenId y = response[j];
    for (TokenId a = 0; a < V; ++a) dlogits[a] = coeff * ((a == y) - std::exp(lp[a]));
    accumulate_logit_backprop(params, config, prefix, dlogits, grad);
  }
}

std::vector<double> grad_sequence_log_prob(const PolicyParams& params,
                                           const PolicyConfig& config,
                                           std::span<const TokenId> prompt,
                                           std::span<const TokenId> response) {
  std::vector<double> grad(params.flat_size(), 0.0);
  accumulate_grad_sequence_log_prob(params, config, prompt, response, 1.0, grad);
  return grad;
}

double token_entropy(const PolicyParams& params, const PolicyConfig& config,
                     std::span<const TokenId> prefix) {
  std::vector<double> lp = token_log_probs(params, config, prefix);
  double entropy = 0.0;
  for (double v : lp) entropy -= std::exp(v) * v;
  return entropy;
}

namespace {

void put_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void put_f64le(std::string& out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

double get_f64le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params,
                     int window) {
  std::string buf;
  buf.reserve(24 + params.flat.size() * 8);
  buf.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32le(buf, kCheckpointVersion);
  put_u32le(buf, static_cast<std::uint32_t>(params.vocab_size));
  put_u32le(buf, static_cast<std::uint32_t>(params.embed_dim));
  put_u32le(buf, static_cast<std::uint32_t>(window));
  for (double v : params.flat) put_f64le(buf, v);

  // Write to a temp file then rename so readers never see partial output.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 24 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  const std::uint32_t version = get_u32le(p + 8);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version: " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.params.vocab_size = static_cast<int>(get_u32le(p + 12));
  ckpt.params.embed_dim = static_cast<int>(get_u32le(p + 16));
  ckpt.window = static_cast<int>(get_u32le(p + 20));
  const size_t n = static_cast<size_t>(2) * ckpt.params.vocab_size * ckpt.params.embed_dim;
  if (buf.size() != 24 + n * 8) {
    throw std::runtime_error("checkpoint size mismatch: " + path.string());
  }
  ckpt.params.flat.resize(n);
  for (size_t i = 0; i < n; ++i) ckpt.params.flat[i] = get_f64le(p + 24 + i * 8);
  return ckpt;
}

}  // namespace lenslab
