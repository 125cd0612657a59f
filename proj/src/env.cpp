#include "lenslab/env.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lenslab {

Instance generate_instance(const TaskConfig& task, RngStream& rng) {
  const VocabLayout& vb = task.vocab;
  const int P = task.pairs;
  const int key_count = vb.keys.size();
  if (P < 1) throw std::invalid_argument("pairs must be >= 1");
  if (key_count < P) {
    throw std::invalid_argument("key range too small for " + std::to_string(P) +
                                " distinct keys");
  }

  // All structural draws happen before any injection draw, so instances that
  // share a stream but differ in distractor_rate share the same skeleton.
  std::vector<TokenId> pool(key_count);
  std::iota(pool.begin(), pool.end(), vb.keys.begin);
  for (int i = 0; i < P; ++i) {
    int j = i + rng.uniform_int(key_count - i);
    std::swap(pool[i], pool[j]);
  }
  std::vector<TokenId> keys(pool.begin(), pool.begin() + P);

  std::vector<TokenId> values(P);
  for (int i = 0; i < P; ++i) values[i] = vb.values.begin + rng.uniform_int(vb.values.size());
  const int query_index = rng.uniform_int(P);

  // Skeleton: BOS k1 v1 ... kP vP QUERY qk SEP. Injection points sit after
  // each non-special token; nothing is inserted adjacent to BOS or after SEP.
  struct Slot {
    TokenId token;
    bool insert_after;
  };
  std::vector<Slot> skeleton;
  skeleton.reserve(2 * P + 4);
  skeleton.push_back({vb.bos, false});
  for (int i = 0; i < P; ++i) {
    skeleton.push_back({keys[i], true});
    skeleton.push_back({values[i], true});
  }
  skeleton.push_back({vb.query, false});
  skeleton.push_back({keys[query_index], true});
  skeleton.push_back({vb.sep, false});

  Prompt prompt;
  std::vector<std::uint8_t> mask;
  for (const Slot& slot : skeleton) {
    prompt.tokens.push_back(slot.token);
    mask.push_back(0);
    if (slot.insert_after && rng.bernoulli(task.distractor_rate)) {
      prompt.tokens.push_back(vb.distractors.begin +
                              rng.uniform_int(vb.distractors.size()));
      mask.push_back(1);
    }
  }
  prompt.distractor_mask = std::move(mask);

  Instance instance;
  instance.prompt = std::move(prompt);
  instance.answer = values[query_index];
  instance.query_key = keys[query_index];
  return instance;
}

int verify(std::span<const TokenId> response, const Instance& instance) {
  if (response.empty()) throw std::invalid_argument("empty response");
  return response[0] == instance.answer ? 1 : 0;
}

std::string instance_to_text(const Instance& instance) {
  std::ostringstream out;
  for (size_t i = 0; i < instance.prompt.tokens.size(); ++i) {
    if (i) out << ' ';
    out << instance.prompt.tokens[i];
  }
  out << '\n';
  const auto& mask = instance.prompt.distractor_mask;
  for (size_t i = 0; i < instance.prompt.tokens.size(); ++i) {
    if (i) out << ' ';
    out << (mask && (*mask)[i] ? 1 : 0);
  }
  out << '\n' << instance.answer << '\n';
  return out.str();
}

Instance instance_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string token_line, mask_line, answer_line;
  if (!std::getline(in, token_line) || !std::getline(in, mask_line) ||
      !std::getline(in, answer_line)) {
    throw std::runtime_error("malformed instance text");
  }
  Instance instance;
  {
    std::istringstream ts(token_line);
    TokenId t;
    while (ts >> t) instance.prompt.tokens.push_back(t);
  }
  {
    std::istringstream ms(mask_line);
    std::vector<std::uint8_t> mask;
    int bit;
    while (ms >> bit) mask.push_back(static_cast<std::uint8_t>(bit != 0));
    if (mask.size() != instance.prompt.tokens.size()) {
      throw std::runtime_error("mask length mismatch in instance text");
    }
    instance.prompt.distractor_mask = std::move(mask);
  }
  instance.answer = static_cast<TokenId>(std::stol(answer_line));
  return instance;
}

}  // namespace lenslab
