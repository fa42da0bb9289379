#include "sipf/task.hpp"

#include "sipf/rng.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sipf::task {
namespace {

// Generation keeps every running value inside [0, 9]: values render as a
// single token, so token positions play the same role in every question and
// the windowed model can learn copy/arithmetic circuits instead of
// memorizing, and the ~300-entry fact table is coverable by a few hundred
// questions. The Question invariant itself only demands [-999, 999].
constexpr long long kValueLo = 0;
constexpr long long kValueHi = 9;
constexpr int kMaxAnswerDigits = 12;

std::uint64_t fnv1a(std::span<const int> tokens) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (int t : tokens) {
    h ^= static_cast<std::uint64_t>(t) + 1;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void append_int_tokens(TokenSeq& out, long long v) {
  if (v < 0) {
    out.push_back(kNeg);
    v = -v;
  }
  const std::string digits = std::to_string(v);
  for (char c : digits) out.push_back(kDigit0 + (c - '0'));
}

/// Canonical integer parse over a token span: optional sign, no leading
/// zeros, no "-0". Returns false on any deviation.
bool parse_int_tokens(std::span<const int> tokens, long long& out) {
  std::size_t i = 0;
  bool neg = false;
  if (i < tokens.size() && tokens[i] == kNeg) {
    neg = true;
    ++i;
  }
  const std::size_t first_digit = i;
  long long v = 0;
  while (i < tokens.size() && tokens[i] >= kDigit0 && tokens[i] <= kDigit0 + 9) {
    if (i - first_digit >= kMaxAnswerDigits) return false;
    v = v * 10 + (tokens[i] - kDigit0);
    ++i;
  }
  const std::size_t n_digits = i - first_digit;
  if (n_digits == 0 || i != tokens.size()) return false;
  if (n_digits > 1 && tokens[first_digit] == kDigit0) return false;
  if (neg && v == 0) return false;
  out = neg ? -v : v;
  return true;
}

int op_token(Op op) {
  switch (op) {
    case Op::add: return kAdd;
    case Op::sub: return kSub;
    case Op::mul: return kMul;
  }
  throw std::invalid_argument("unknown operator");
}

}  // namespace

const std::vector<std::string>& TokenCodec::vocabulary() {
  static const std::vector<std::string> v = {
      "<pad>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
      "neg", "+", "-", "*", "=", "<sep>", "<ans>", "<eos>"};
  return v;
}

char op_char(Op op) {
  switch (op) {
    case Op::add: return '+';
    case Op::sub: return '-';
    case Op::mul: return '*';
  }
  throw std::invalid_argument("unknown operator");
}

long long apply_op(long long v, Op op, int operand) {
  switch (op) {
    case Op::add: return v + operand;
    case Op::sub: return v - operand;
    case Op::mul: return v * operand;
  }
  throw std::invalid_argument("unknown operator");
}

std::vector<Question> generate_dataset(std::uint64_t seed, int n,
                                       std::pair<int, int> depth_range, Split split) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  if (depth_range.first < 2 || depth_range.second > 5 || depth_range.first > depth_range.second) {
    throw std::invalid_argument("generate_dataset: depth_range must lie within [2, 5]");
  }
  const std::uint64_t split_tag = split == Split::train ? 1 : 2;
  const std::uint64_t want_parity = split == Split::train ? 0 : 1;

  std::vector<Question> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {split_tag, static_cast<std::uint64_t>(i)}));
    Question q;
    q.id = (split == Split::train ? 0LL : 1000000LL) + i;
    for (;;) {
      q.ops.clear();
      const int depth = rng.next_int(depth_range.first, depth_range.second);
      q.start_value = rng.next_int(kValueLo, kValueHi);
      long long v = q.start_value;
      for (int j = 0; j < depth; ++j) {
        for (;;) {
          const Op op = static_cast<Op>(rng.next_int(0, 2));
          const int operand = rng.next_int(0, 9);
          // x0 is excluded: it collapses every running value to zero, so a
          // corrupted prefix could rejoin the gold trajectory.
          if (op == Op::mul && operand == 0) continue;
          const long long next = apply_op(v, op, operand);
          if (next < kValueLo || next > kValueHi) continue;
          q.ops.emplace_back(op, operand);
          v = next;
          break;
        }
      }
      q.text_tokens = encode_question(q);
      if ((fnv1a(q.text_tokens) & 1) == want_parity) break;
    }
    q.gold_path = oracle_solve(q);
    q.gold_answer = *q.gold_path.final_answer;
    out.push_back(std::move(q));
  }
  return out;
}

ReasoningPath oracle_solve(const Question& q) {
  ReasoningPath path;
  long long v = q.start_value;
  for (const auto& [op, operand] : q.ops) {
    const long long next = apply_op(v, op, operand);
    path.steps.push_back(format_step(v, op, operand, next));
    v = next;
  }
  path.final_answer = v;
  return path;
}

bool check_answer(const Question& q, Answer answer) {
  return answer.has_value() && *answer == q.gold_answer;
}

bool check_step(const Question& q, std::span<const std::string> prefix, const std::string& step) {
  long long x = 0, z = 0;
  int y = 0;
  Op op{};
  if (!parse_step(step, x, op, y, z)) return false;
  if (z != apply_op(x, op, y)) return false;

  // Running value implied by the prefix is the last step's claimed result.
  long long running = q.start_value;
  if (!prefix.empty()) {
    long long px = 0, pz = 0;
    int py = 0;
    Op pop{};
    if (!parse_step(prefix.back(), px, pop, py, pz)) return false;
    running = pz;
  }
  if (x != running) return false;

  const std::size_t slot = prefix.size();
  if (slot >= q.ops.size()) return false;
  return q.ops[slot].first == op && q.ops[slot].second == y;
}

std::string format_step(long long x, Op op, int y, long long z) {
  std::ostringstream s;
  s << x << ' ' << op_char(op) << ' ' << y << " = " << z;
  return s.str();
}

bool parse_step(const std::string& step, long long& x, Op& op, int& y, long long& z) {
  TokenSeq toks;
  try {
    toks = tokenize_step(step);
  } catch (const std::invalid_argument&) {
    return false;
  }
  // Pattern: int, operator, single digit, '=', int.
  std::size_t i = 0;
  auto int_end = [&](std::size_t from) {
    std::size_t j = from;
    if (j < toks.size() && toks[j] == kNeg) ++j;
    while (j < toks.size() && toks[j] >= kDigit0 && toks[j] <= kDigit0 + 9) ++j;
    return j;
  };
  const std::size_t xe = int_end(0);
  if (!parse_int_tokens(std::span(toks).subspan(0, xe), x)) return false;
  i = xe;
  if (i >= toks.size()) return false;
  switch (toks[i]) {
    case kAdd: op = Op::add; break;
    case kSub: op = Op::sub; break;
    case kMul: op = Op::mul; break;
    default: return false;
  }
  ++i;
  if (i >= toks.size() || toks[i] < kDigit0 || toks[i] > kDigit0 + 9) return false;
  y = toks[i] - kDigit0;
  ++i;
  if (i >= toks.size() || toks[i] != kEq) return false;
  ++i;
  return parse_int_tokens(std::span(toks).subspan(i), z);
}

TokenSeq encode_question(const Question& q) {
  TokenSeq out;
  append_int_tokens(out, q.start_value);
  for (const auto& [op, operand] : q.ops) {
    out.push_back(op_token(op));
    out.push_back(kDigit0 + operand);
  }
  return out;
}

TokenSeq encode_path(const ReasoningPath& path) {
  if (!path.final_answer.has_value()) {
    throw std::invalid_argument("encode_path: path has a malformed final answer");
  }
  TokenSeq out;
  for (const auto& step : path.steps) {
    const TokenSeq toks = tokenize_step(step);
    out.insert(out.end(), toks.begin(), toks.end());
    out.push_back(kSep);
  }
  out.push_back(kAns);
  append_int_tokens(out, *path.final_answer);
  out.push_back(kEos);
  return out;
}

TokenSeq encode(const Question& q, const ReasoningPath* path) {
  TokenSeq out = encode_question(q);
  if (path != nullptr) {
    const TokenSeq p = encode_path(*path);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

TokenSeq encode_prefix(const Question& q, std::span<const std::string> prefix_steps) {
  TokenSeq out = encode_question(q);
  for (const auto& step : prefix_steps) {
    const TokenSeq toks = tokenize_step(step);
    out.insert(out.end(), toks.begin(), toks.end());
    out.push_back(kSep);
  }
  return out;
}

ReasoningPath decode(const TokenSeq& completion) {
  // Truncate at the first end-of-sequence token.
  std::size_t end = completion.size();
  for (std::size_t i = 0; i < completion.size(); ++i) {
    if (completion[i] == kEos) {
      end = i;
      break;
    }
  }
  std::size_t ans_pos = end;
  for (std::size_t i = 0; i < end; ++i) {
    if (completion[i] == kAns) {
      ans_pos = i;
      break;
    }
  }

  ReasoningPath path;
  std::size_t seg_start = 0;
  for (std::size_t i = 0; i <= ans_pos; ++i) {
    if (i == ans_pos || completion[i] == kSep) {
      if (i > seg_start) {
        path.steps.push_back(render_tokens(
            std::span(completion).subspan(seg_start, i - seg_start)));
      }
      seg_start = i + 1;
    }
  }

  if (ans_pos < end) {
    long long value = 0;
    if (parse_int_tokens(std::span(completion).subspan(ans_pos + 1, end - ans_pos - 1), value)) {
      path.final_answer = value;
    }
  }
  return path;
}

std::string render_tokens(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) {
    if (t >= kDigit0 && t <= kDigit0 + 9) {
      out.push_back(static_cast<char>('0' + (t - kDigit0)));
    } else {
      switch (t) {
        case kNeg: out += "-"; break;
        case kAdd: out += " + "; break;
        case kSub: out += " - "; break;
        case kMul: out += " * "; break;
        case kEq: out += " = "; break;
        default: out += "<pad>"; break;
      }
    }
  }
  return out;
}

TokenSeq tokenize_step(const std::string& text) {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, 3, " + ") == 0) {
      out.push_back(kAdd);
      i += 3;
    } else if (text.compare(i, 3, " - ") == 0) {
      out.push_back(kSub);
      i += 3;
    } else if (text.compare(i, 3, " * ") == 0) {
      out.push_back(kMul);
      i += 3;
    } else if (text.compare(i, 3, " = ") == 0) {
      out.push_back(kEq);
      i += 3;
    } else if (text.compare(i, 5, "<pad>") == 0) {
      out.push_back(kPad);
      i += 5;
    } else if (text[i] >= '0' && text[i] <= '9') {
      out.push_back(kDigit0 + (text[i] - '0'));
      ++i;
    } else if (text[i] == '-') {
      out.push_back(kNeg);
      ++i;
    } else {
      throw std::invalid_argument("tokenize_step: unexpected character in step text");
    }
  }
  return out;
}

void write_dataset_jsonl(const std::string& path, std::span<const Question> questions) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const Question& q : questions) {
    nlohmann::json ops = nlohmann::json::array();
    for (const auto& [op, operand] : q.ops) {
      ops.push_back({std::string(1, op_char(op)), operand});
    }
    const nlohmann::json j = {
        {"id", q.id},
        {"start", q.start_value},
        {"ops", ops},
        {"gold_answer", q.gold_answer},
        {"gold_steps", q.gold_path.steps},
    };
    out << j.dump() << '\n';
  }
}

std::vector<Question> read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::vector<Question> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    Question q;
    q.id = j.at("id").get<long long>();
    q.start_value = j.at("start").get<long long>();
    for (const auto& pair : j.at("ops")) {
      const std::string c = pair.at(0).get<std::string>();
      Op op;
      if (c == "+") {
        op = Op::add;
      } else if (c == "-") {
        op = Op::sub;
      } else if (c == "*") {
        op = Op::mul;
      } else {
        throw std::runtime_error("dataset: unknown operator " + c);
      }
      q.ops.emplace_back(op, pair.at(1).get<int>());
    }
    q.text_tokens = encode_question(q);
    q.gold_path = oracle_solve(q);
    q.gold_answer = *q.gold_path.final_answer;
    if (q.gold_answer != j.at("gold_answer").get<long long>()) {
      throw std::runtime_error("dataset: stored gold_answer disagrees with the oracle");
    }
    if (q.gold_path.steps != j.at("gold_steps").get<std::vector<std::string>>()) {
      throw std::runtime_error("dataset: stored gold_steps disagree with the oracle");
    }
    out.push_back(std::move(q));
  }
  return out;
}

void write_vocab_json(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  nlohmann::json j;
  const auto& vocab = TokenCodec::vocabulary();
  for (std::size_t i = 0; i < vocab.size(); ++i) j[vocab[i]] = i;
  out << j.dump(2) << '\n';
}

}  // namespace sipf::task
