#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "normlab/rng.hpp"
#include "normlab/tensor.hpp"

// Streaming generator, tokenizer and probability calculator for the signed
// integer-addition next-token task. Nothing is stored: a (config, seed,
// index) triple fully determines a sample.

namespace normlab {

// Fixed 17-token dictionary: digits, operators {+ - = N}, specials {[ ] *}.
// N marks a negative integer; * is both the loss mask and the pad token.
class Vocab {
 public:
  static constexpr std::size_t kSize = 17;
  static constexpr std::size_t kPlus = 10;
  static constexpr std::size_t kMinus = 11;
  static constexpr std::size_t kEquals = 12;
  static constexpr std::size_t kNegative = 13;
  static constexpr std::size_t kBegin = 14;
  static constexpr std::size_t kEnd = 15;
  static constexpr std::size_t kMask = 16;

  static char to_char(std::size_t id) {
    static constexpr char table[] = "0123456789+-=N[]*";
    if (id >= kSize) throw std::invalid_argument("vocab: id out of range");
    return table[id];
  }

  static std::size_t to_id(char c) {
    if (c >= '0' && c <= '9') return static_cast<std::size_t>(c - '0');
    switch (c) {
      case '+': return kPlus;
      case '-': return kMinus;
      case '=': return kEquals;
      case 'N': return kNegative;
      case '[': return kBegin;
      case ']': return kEnd;
      case '*': return kMask;
      default: throw std::invalid_argument("vocab: unknown character");
    }
  }

  static std::vector<std::size_t> encode(const std::string& s) {
    std::vector<std::size_t> ids;
    ids.reserve(s.size());
    for (char c : s) ids.push_back(to_id(c));
    return ids;
  }

  static std::string decode(const std::vector<std::size_t>& ids) {
    std::string s;
    s.reserve(ids.size());
    for (std::size_t id : ids) s.push_back(to_char(id));
    return s;
  }
};

struct TaskConfig {
  std::vector<int> n_choices;  // allowed integers per sum
  std::vector<int> l_choices;  // allowed digits per integer
  std::uint64_t seed = 0;

  void check() const {
    if (n_choices.empty() || l_choices.empty())
      throw std::invalid_argument("task: choice lists must be nonempty");
    for (int n : n_choices)
      if (n < 1) throw std::invalid_argument("task: N choices must be >= 1");
    for (int l : l_choices)
      if (l < 1) throw std::invalid_argument("task: L choices must be >= 1");
  }
};

struct Sample {
  std::vector<std::size_t> input_ids;
  std::vector<std::size_t> target_ids;
  std::vector<bool> loss_mask;  // true exactly where the target is scored
  long long answer_value = 0;

  std::string text_in() const { return Vocab::decode(input_ids); }
  // Targets with masked positions rendered as the mask character.
  std::string text_out() const {
    std::string s;
    for (std::size_t i = 0; i < target_ids.size(); ++i)
      s.push_back(loss_mask[i] ? Vocab::to_char(target_ids[i]) : '*');
    return s;
  }
};

namespace detail {

inline std::string render_integer(long long v) {
  std::string s = v < 0 ? "N" : "";
  return s + std::to_string(v < 0 ? -v : v);
}

}  // namespace detail

// Assembles the tokenised sample from the drawn integers and operators
// (ops[i] is the operator preceding integers[i+1]; '+' or '-').
inline Sample build_sample(const std::vector<long long>& integers,
                           const std::vector<char>& ops) {
  if (integers.empty() || ops.size() + 1 != integers.size())
    throw std::invalid_argument("build_sample: inconsistent question");
  std::string text = "[" + detail::render_integer(integers[0]);
  long long answer = integers[0];
  for (std::size_t i = 0; i < ops.size(); ++i) {
    text.push_back(ops[i]);
    text += detail::render_integer(integers[i + 1]);
    answer = ops[i] == '+' ? answer + integers[i + 1]
                           : answer - integers[i + 1];
  }
  const std::size_t eq_pos = text.size();
  text.push_back('=');
  text += detail::render_integer(answer);
  text.push_back(']');

  Sample s;
  s.answer_value = answer;
  const std::vector<std::size_t> ids = Vocab::encode(text);
  s.input_ids.assign(ids.begin(), ids.end() - 1);
  s.target_ids.assign(ids.begin() + 1, ids.end());
  s.loss_mask.resize(s.target_ids.size());
  for (std::size_t i = 0; i < s.loss_mask.size(); ++i)
    s.loss_mask[i] = i >= eq_pos;
  return s;
}

// One draw of the generation process. Order of RNG use: N, then every L,
// then every (sign, magnitude), then every operator. Magnitudes are uniform
// over integers with exactly L digits; 0 exists only at L = 1 and renders
// unsigned.
inline Sample sample(const TaskConfig& config, Rng& rng) {
  config.check();
  const int n = config.n_choices[rng.uniform_int(config.n_choices.size())];
  std::vector<int> lengths(n);
  for (int i = 0; i < n; ++i)
    lengths[i] = config.l_choices[rng.uniform_int(config.l_choices.size())];
  std::vector<long long> integers(n);
  for (int i = 0; i < n; ++i) {
    const bool negative = rng.uniform_int(2) == 1;
    long long magnitude;
    if (lengths[i] == 1) {
      magnitude = static_cast<long long>(rng.uniform_int(10));
    } else {
      long long lo = 1;
      for (int d = 1; d < lengths[i]; ++d) lo *= 10;
      magnitude = lo + static_cast<long long>(rng.uniform_int(9 * lo));
    }
    integers[i] = negative ? -magnitude : magnitude;
  }
  std::vector<char> ops(n - 1);
  for (char& op : ops) op = rng.uniform_int(2) == 0 ? '+' : '-';
  return build_sample(integers, ops);
}

inline Sample sample_at(const TaskConfig& config, std::uint64_t index) {
  Rng rng = Rng(config.seed).derive({0x7461736bULL, index});
  return sample(config, rng);
}

namespace detail {

struct ParsedQuestion {
  std::vector<long long> integers;
  std::vector<char> ops;
  bool valid = false;
};

// Reads the question segment "[a+b-Nc...=" back out of the token stream.
inline ParsedQuestion parse_question(const std::vector<std::size_t>& input) {
  ParsedQuestion out;
  std::size_t i = 0;
  if (input.empty() || input[i] != Vocab::kBegin) return out;
  ++i;
  bool expect_integer = true;
  while (i < input.size() && input[i] != Vocab::kEquals) {
    if (expect_integer) {
      bool negative = false;
      if (input[i] == Vocab::kNegative) {
        negative = true;
        ++i;
      }
      std::string digits;
      while (i < input.size() && input[i] <= 9)
        digits.push_back(Vocab::to_char(input[i++]));
      if (digits.empty()) return out;
      if (digits.size() > 1 && digits[0] == '0') return out;  // leading zero
      if (negative && digits == "0") return out;              // signed zero
      long long v = std::stoll(digits);
      out.integers.push_back(negative ? -v : v);
      expect_integer = false;
    } else {
      if (input[i] == Vocab::kPlus)
        out.ops.push_back('+');
      else if (input[i] == Vocab::kMinus)
        out.ops.push_back('-');
      else
        return out;
      ++i;
      expect_integer = true;
    }
  }
  out.valid = i < input.size() && !expect_integer && !out.integers.empty();
  return out;
}

inline int digit_count(long long v) {
  int d = 1;
  for (long long m = v < 0 ? -v : v; m >= 10; m /= 10) ++d;
  return d;
}

template <typename T>
inline bool contains(const std::vector<T>& xs, T v) {
  for (const T& x : xs)
    if (x == v) return true;
  return false;
}

}  // namespace detail

// Exact probability of drawing this sample under the config: the product of
// the uniform choice probabilities along the generation path (N, each L,
// each sign, each magnitude given its length, each operator). Magnitude 0
// renders identically for both signs, so its sign factor is 1. A sample the
// config cannot produce has probability 0.
inline double datapoint_probability(const TaskConfig& config,
                                    const Sample& s) {
  config.check();
  const auto q = detail::parse_question(s.input_ids);
  if (!q.valid) return 0.0;
  const int n = static_cast<int>(q.integers.size());
  if (!detail::contains(config.n_choices, n)) return 0.0;
  double p = 1.0 / static_cast<double>(config.n_choices.size());
  for (long long v : q.integers) {
    const int len = detail::digit_count(v);
    if (!detail::contains(config.l_choices, len)) return 0.0;
    p /= static_cast<double>(config.l_choices.size());
    long long magnitudes = 10;  // 0..9 at len 1, else 9 * 10^(len-1)
    if (len > 1) {
      magnitudes = 9;
      for (int d = 1; d < len; ++d) magnitudes *= 10;
    }
    p /= static_cast<double>(magnitudes);
    if (v != 0) p *= 0.5;
  }
  for (std::size_t i = 0; i < q.ops.size(); ++i) p *= 0.5;
  return p;
}

// Right-padded batch; padding uses the mask token and never reaches the
// loss or the metrics.
struct Batch {
  std::size_t rows = 0;
  std::size_t len = 0;
  std::vector<std::size_t> input;   // rows x len
  std::vector<std::size_t> target;  // rows x len
  std::vector<bool> mask;           // rows x len
  std::vector<std::size_t> lengths;

  std::size_t scored_tokens() const {
    std::size_t n = 0;
    for (bool m : mask) n += m ? 1 : 0;
    return n;
  }
};

inline Batch make_batch(const std::vector<Sample>& samples,
                        std::size_t pad_to) {
  Batch b;
  b.rows = samples.size();
  b.len = pad_to;
  b.input.assign(b.rows * pad_to, Vocab::kMask);
  b.target.assign(b.rows * pad_to, Vocab::kMask);
  b.mask.assign(b.rows * pad_to, false);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const Sample& s = samples[r];
    if (s.input_ids.size() > pad_to)
      throw std::invalid_argument("make_batch: sample longer than pad_to");
    b.lengths.push_back(s.input_ids.size());
    for (std::size_t i = 0; i < s.input_ids.size(); ++i) {
      b.input[r * pad_to + i] = s.input_ids[i];
      b.target[r * pad_to + i] = s.target_ids[i];
      b.mask[r * pad_to + i] = s.loss_mask[i];
    }
  }
  return b;
}

inline Batch make_batch(const std::vector<Sample>& samples) {
  std::size_t longest = 0;
  for (const Sample& s : samples)
    longest = std::max(longest, s.input_ids.size());
  return make_batch(samples, longest);
}

// Named dataset presets from the training / out-of-distribution grids.
inline TaskConfig task_preset(const std::string& name) {
  TaskConfig c;
  if (name == "baseline-train" || name == "alternate-train") {
    c.n_choices = {3, 4, 6};
    c.l_choices = {2, 3};
  } else if (name == "baseline-ood-interp" || name == "alternate-ood-interp") {
    c.n_choices = {5};
    c.l_choices = {2, 3};
  } else if (name == "baseline-ood-extrap" || name == "alternate-ood-extrap") {
    c.n_choices = {7, 8, 9};
    c.l_choices = {2, 3};
  } else if (name == "large-train") {
    c.n_choices = {4, 5, 7, 8};
    c.l_choices = {3, 4, 5};
  } else if (name == "large-ood-interp") {
    c.n_choices = {6};
    c.l_choices = {3, 4, 5};
  } else if (name == "large-ood-extrap") {
    c.n_choices = {9, 10, 11};
    c.l_choices = {3, 4, 5};
  } else if (name == "desk-train") {
    c.n_choices = {2, 3};
    c.l_choices = {1, 2};
  } else if (name == "desk-ood-interp") {
    c.n_choices = {4};
    c.l_choices = {1, 2};
  } else {
    throw std::invalid_argument("task_preset: unknown preset " + name);
  }
  return c;
}

}  // namespace normlab
