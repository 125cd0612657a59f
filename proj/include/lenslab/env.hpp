#pragma once

#include <span>
#include <string>

#include "lenslab/core.hpp"

namespace lenslab {

// Key-value retrieval with injected distractor tokens. A prompt lays out
// `pairs` (key, value) pairs, then QUERY, one of the keys, SEP; the single
// correct answer is the queried key's value. Each non-special skeleton token
// is followed by an independently injected distractor with probability
// distractor_rate.
struct TaskConfig {
  int pairs = 3;
  double distractor_rate = 0.2;
  VocabLayout vocab;
};

struct Instance {
  Prompt prompt;            // distractor_mask is always set
  TokenId answer = -1;      // value paired with query_key
  TokenId query_key = -1;
};

Instance generate_instance(const TaskConfig& task, RngStream& rng);

// Binary verifiable reward: 1 iff the first response token is the answer.
int verify(std::span<const TokenId> response, const Instance& instance);

// Golden-file serialization: token ids, 0/1 mask, answer id — one line each.
std::string instance_to_text(const Instance& instance);
Instance instance_from_text(const std::string& text);

}  // namespace lenslab
