#include "lenslab/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

namespace lenslab {

namespace {

// splitmix64 finalizer; stateless mix of one word.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

VocabLayout make_vocab_layout(int key_count, int value_count, int distractor_count) {
  VocabLayout layout;
  TokenId cursor = 4;  // bos, eos, query, sep occupy [0, 4)
  layout.keys = {cursor, cursor + key_count};
  cursor += key_count;
  layout.values = {cursor, cursor + value_count};
  cursor += value_count;
  layout.distractors = {cursor, cursor + distractor_count};
  cursor += distractor_count;
  layout.vocab_size = cursor;
  return layout;
}

std::vector<std::string> validate_layout(const VocabLayout& layout) {
  std::vector<std::string> errors;
  if (layout.vocab_size < 8) {
    errors.push_back("vocab_size must be >= 8, got " + std::to_string(layout.vocab_size));
  }
  const TokenId specials[] = {layout.bos, layout.eos, layout.query, layout.sep};
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      if (specials[i] == specials[j]) errors.push_back("special ids must be distinct");
    }
  }
  // Regions must tile [0, vocab_size): specials in [0,4), then the three blocks.
  for (TokenId t : specials) {
    if (t < 0 || t >= 4) errors.push_back("special id outside [0,4): " + std::to_string(t));
  }
  if (layout.keys.begin != 4 || layout.keys.end != layout.values.begin ||
      layout.values.end != layout.distractors.begin ||
      layout.distractors.end != layout.vocab_size) {
    errors.push_back("key/value/distractor ranges must tile [4, vocab_size)");
  }
  if (layout.keys.size() < 1) errors.push_back("key range empty");
  if (layout.values.size() < 1) errors.push_back("value range empty");
  return errors;
}

int RngStream::uniform_int(int n) {
  if (n <= 0) throw std::invalid_argument("uniform_int requires n > 0");
  const std::uint64_t range = static_cast<std::uint64_t>(n);
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() / range * range;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<int>(x % range);
}

double RngStream::normal() {
  // Guard u1 away from 0 so log stays finite.
  double u1 = uniform01();
  double u2 = uniform01();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

RngStream derive_rng(std::uint64_t seed, std::uint64_t step,
                     std::uint64_t prompt_index, std::uint64_t lane) {
  std::uint64_t h = 0x853C49E6748FEA9BULL;
  h = mix64(h ^ mix64(seed));
  h = mix64(h ^ mix64(step));
  h = mix64(h ^ mix64(prompt_index));
  h = mix64(h ^ mix64(lane));
  return RngStream(h);
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kGrpo: return "grpo";
    case Method::kLens: return "lens";
    case Method::kDapoFilter: return "dapo_filter";
    case Method::kResample: return "resample";
    case Method::kRandomPrune: return "random_prune";
    case Method::kGradPrune: return "grad_prune";
  }
  return "unknown";
}

std::optional<Method> method_from_string(std::string_view name) {
  if (name == "grpo") return Method::kGrpo;
  if (name == "lens") return Method::kLens;
  if (name == "dapo_filter") return Method::kDapoFilter;
  if (name == "resample") return Method::kResample;
  if (name == "random_prune") return Method::kRandomPrune;
  if (name == "grad_prune") return Method::kGradPrune;
  return std::nullopt;
}

std::vector<std::string> validate_config(const ExperimentConfig& c) {
  std::vector<std::string> errors;
  auto bad = [&errors](const std::string& msg) { errors.push_back(msg); };

  if (!(c.tau >= 0.0 && c.tau <= 1.0))
    bad("tau must be in [0,1], got " + format_double(c.tau));
  if (!(c.gamma > 0.0 && c.gamma < 1.0))
    bad("gamma must be in (0,1), got " + format_double(c.gamma));
  if (c.rollouts < 2)
    bad("rollouts >= 2 required, got " + std::to_string(c.rollouts));
  if (!(c.eps_clip > 0.0))
    bad("eps_clip must be > 0, got " + format_double(c.eps_clip));
  if (!(c.beta >= 0.0))
    bad("beta must be >= 0, got " + format_double(c.beta));
  if (!(c.eps_sigma > 0.0))
    bad("eps_sigma must be > 0, got " + format_double(c.eps_sigma));
  if (c.steps < 0) bad("steps must be >= 0");
  if (c.batch_size < 1) bad("batch_size must be >= 1");
  if (c.max_response_len < 1) bad("max_response_len must be >= 1");
  if (!(c.temperature > 0.0))
    bad("temperature must be > 0, got " + format_double(c.temperature));
  if (!(c.learning_rate >= 0.0)) bad("learning_rate must be >= 0");
  if (c.embed_dim < 1) bad("embed_dim must be >= 1");
  if (c.window < 1) bad("window must be >= 1");
  if (!(c.init_std >= 0.0)) bad("init_std must be >= 0");
  if (c.pairs < 1) bad("pairs must be >= 1");
  if (!(c.distractor_rate >= 0.0 && c.distractor_rate < 1.0))
    bad("distractor_rate must be in [0,1), got " + format_double(c.distractor_rate));
  if (c.key_count < c.pairs)
    bad("key_count must be >= pairs, got " + std::to_string(c.key_count) +
        " < " + std::to_string(c.pairs));
  if (c.value_count < 1) bad("value_count must be >= 1");
  if (c.distractor_count < 1) bad("distractor_count must be >= 1");
  if (c.checkpoint_interval < 1) bad("checkpoint_interval must be >= 1");
  if (!(c.threshold_target >= 0.0 && c.threshold_target <= 1.0))
    bad("threshold_target must be in [0,1]");
  if (c.threshold_window < 1) bad("threshold_window must be >= 1");
  if (c.threads < 1) bad("threads must be >= 1");
  return errors;
}

namespace {

std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  std::int64_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config key '" + key + "': not an integer: '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    double out = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': not a boolean: '" + value + "'");
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.seed = static_cast<std::uint64_t>(parse_int(k, v));
       }},
      {"method", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         auto m = method_from_string(v);
         if (!m) throw ConfigError("config key '" + k + "': unknown method '" + v + "'");
         c.method = *m;
       }},
      {"steps", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.steps = static_cast<int>(parse_int(k, v));
       }},
      {"batch_size", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.batch_size = static_cast<int>(parse_int(k, v));
       }},
      {"rollouts", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.rollouts = static_cast<int>(parse_int(k, v));
       }},
      {"max_response_len", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.max_response_len = static_cast<int>(parse_int(k, v));
       }},
      {"tau", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.tau = parse_real(k, v);
       }},
      {"gamma", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.gamma = parse_real(k, v);
       }},
      {"eps_clip", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.eps_clip = parse_real(k, v);
       }},
      {"beta", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.beta = parse_real(k, v);
       }},
      {"eps_sigma", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.eps_sigma = parse_real(k, v);
       }},
      {"temperature", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.temperature = parse_real(k, v);
       }},
      {"learning_rate", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.learning_rate = parse_real(k, v);
       }},
      {"uniform_weights", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.uniform_weights = parse_bool(k, v);
       }},
      {"surrogate_normalized_weights",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.surrogate_normalized_weights = parse_bool(k, v);
       }},
      {"embed_dim", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.embed_dim = static_cast<int>(parse_int(k, v));
       }},
      {"window", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.window = static_cast<int>(parse_int(k, v));
       }},
      {"init_std", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.init_std = parse_real(k, v);
       }},
      {"pairs", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.pairs = static_cast<int>(parse_int(k, v));
       }},
      {"distractor_rate", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.distractor_rate = parse_real(k, v);
       }},
      {"key_count", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.key_count = static_cast<int>(parse_int(k, v));
       }},
      {"value_count", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.value_count = static_cast<int>(parse_int(k, v));
       }},
      {"distractor_count", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.distractor_count = static_cast<int>(parse_int(k, v));
       }},
      {"checkpoint_interval", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.checkpoint_interval = static_cast<int>(parse_int(k, v));
       }},
      {"threshold_target", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.threshold_target = parse_real(k, v);
       }},
      {"threshold_window", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.threshold_window = static_cast<int>(parse_int(k, v));
       }},
      {"threads", [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.threads = static_cast<int>(parse_int(k, v));
       }},
  };
  return table;
}

void apply_key_value(ExperimentConfig& config, const std::string& key,
                     const std::string& value) {
  auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(config, key, value);
}

}  // namespace

ExperimentConfig parse_config_text(std::string_view text, ExperimentConfig base) {
  std::vector<std::string> errors;
  size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(line_no) + ": expected `key = value`");
      continue;
    }
    std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    try {
      apply_key_value(base, key, value);
    } catch (const ConfigError& e) {
      errors.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) {
      if (!joined.empty()) joined += "\n";
      joined += e;
    }
    throw ConfigError(joined);
  }
  return base;
}

ExperimentConfig load_config_file(const std::string& path, ExperimentConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), base);
}

void apply_override(ExperimentConfig& config, std::string_view assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override must be key=value, got '" + std::string(assignment) + "'");
  }
  std::string key = trim(assignment.substr(0, eq));
  std::string value = trim(assignment.substr(eq + 1));
  apply_key_value(config, key, value);
}

std::string config_to_text(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "seed = " << c.seed << "\n";
  out << "method = " << to_string(c.method) << "\n";
  out << "steps = " << c.steps << "\n";
  out << "batch_size = " << c.batch_size << "\n";
  out << "rollouts = " << c.rollouts << "\n";
  out << "max_response_len = " << c.max_response_len << "\n";
  out << "tau = " << format_double(c.tau) << "\n";
  out << "gamma = " << format_double(c.gamma) << "\n";
  out << "eps_clip = " << format_double(c.eps_clip) << "\n";
  out << "beta = " << format_double(c.beta) << "\n";
  out << "eps_sigma = " << format_double(c.eps_sigma) << "\n";
  out << "temperature = " << format_double(c.temperature) << "\n";
  out << "learning_rate = " << format_double(c.learning_rate) << "\n";
  out << "uniform_weights = " << (c.uniform_weights ? "true" : "false") << "\n";
  out << "surrogate_normalized_weights = "
      << (c.surrogate_normalized_weights ? "true" : "false") << "\n";
  out << "embed_dim = " << c.embed_dim << "\n";
  out << "window = " << c.window << "\n";
  out << "init_std = " << format_double(c.init_std) << "\n";
  out << "pairs = " << c.pairs << "\n";
  out << "distractor_rate = " << format_double(c.distractor_rate) << "\n";
  out << "key_count = " << c.key_count << "\n";
  out << "value_count = " << c.value_count << "\n";
  out << "distractor_count = " << c.distractor_count << "\n";
  out << "checkpoint_interval = " << c.checkpoint_interval << "\n";
  out << "threshold_target = " << format_double(c.threshold_target) << "\n";
  out << "threshold_window = " << c.threshold_window << "\n";
  out << "threads = " << c.threads << "\n";
  return out.str();
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    size_t pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.emplace_back(trim(text.substr(start)));
      break;
    }
    parts.emplace_back(trim(text.substr(start, pos - start)));
    start = pos + 1;
  }
  return parts;
}

}  // namespace lenslab
