#pragma once

#include "sipf/types.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sipf::task {

// Token ids. Id 0 is padding; generation never emits it.
enum Token : int {
  kPad = 0,
  kDigit0 = 1,  // digits d map to 1 + d
  kNeg = 11,    // sign of a negative literal (distinct from the subtract operator)
  kAdd = 12,
  kSub = 13,
  kMul = 14,
  kEq = 15,
  kSep = 16,  // step separator
  kAns = 17,  // answer marker
  kEos = 18,
};

struct TokenCodec {
  static constexpr int kVocabSize = 19;
  /// Printable name per token id, as written to the vocabulary file.
  static const std::vector<std::string>& vocabulary();
};

enum class Op : int { add = 0, sub = 1, mul = 2 };

char op_char(Op op);
long long apply_op(long long v, Op op, int operand);

struct ReasoningPath {
  std::vector<std::string> steps;  // each well-formed step reads "x op y = z"
  Answer final_answer = kMalformed;

  int m() const { return static_cast<int>(steps.size()); }
  bool operator==(const ReasoningPath&) const = default;
};

struct Question {
  long long id = 0;
  long long start_value = 0;
  std::vector<std::pair<Op, int>> ops;
  TokenSeq text_tokens;
  long long gold_answer = 0;
  ReasoningPath gold_path;
};

enum class Split { train, test };

/// Deterministic per (seed, split, index); train and test are disjoint as
/// token sequences (enforced by hash parity of the question tokens).
std::vector<Question> generate_dataset(std::uint64_t seed, int n,
                                       std::pair<int, int> depth_range, Split split);

ReasoningPath oracle_solve(const Question& q);
bool check_answer(const Question& q, Answer answer);
bool check_step(const Question& q, std::span<const std::string> prefix, const std::string& step);

std::string format_step(long long x, Op op, int y, long long z);
bool parse_step(const std::string& step, long long& x, Op& op, int& y, long long& z);

// Codec. encode requires well-formed input and throws std::invalid_argument
// otherwise; decode is total and degrades to a MALFORMED final answer.
TokenSeq encode_question(const Question& q);
TokenSeq encode_path(const ReasoningPath& path);
TokenSeq encode(const Question& q, const ReasoningPath* path = nullptr);
TokenSeq encode_prefix(const Question& q, std::span<const std::string> prefix_steps);
ReasoningPath decode(const TokenSeq& completion);

std::string render_tokens(std::span<const int> tokens);
TokenSeq tokenize_step(const std::string& text);

void write_dataset_jsonl(const std::string& path, std::span<const Question> questions);
std::vector<Question> read_dataset_jsonl(const std::string& path);
void write_vocab_json(const std::string& path);

}  // namespace sipf::task
