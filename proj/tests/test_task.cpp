#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sipf/rng.hpp"
#include "sipf/task.hpp"
#include "support/oracles.hpp"

#include <filesystem>
#include <set>
#include <sstream>

using namespace sipf;
using namespace sipf::task;

namespace {

Question make_question(long long start, std::vector<std::pair<Op, int>> ops) {
  Question q;
  q.id = 0;
  q.start_value = start;
  q.ops = std::move(ops);
  q.text_tokens = encode_question(q);
  q.gold_path = oracle_solve(q);
  q.gold_answer = *q.gold_path.final_answer;
  return q;
}

std::string serialize(const std::vector<Question>& qs) {
  std::ostringstream s;
  for (const Question& q : qs) {
    s << q.id << '|' << q.start_value;
    for (const auto& [op, y] : q.ops) s << op_char(op) << y;
    s << '|' << q.gold_answer << '\n';
  }
  return s.str();
}

}  // namespace

TEST_CASE("oracle_solve walks the chain with exact arithmetic") {
  const Question q1 = make_question(5, {{Op::add, 3}, {Op::mul, 2}});
  CHECK(q1.gold_path.steps == std::vector<std::string>{"5 + 3 = 8", "8 * 2 = 16"});
  CHECK(q1.gold_answer == 16);

  const Question q2 = make_question(0, {{Op::mul, 9}, {Op::mul, 9}});
  CHECK(q2.gold_answer == 0);

  const Question q3 = make_question(-4, {{Op::sub, 7}, {Op::add, 1}});
  CHECK(q3.gold_answer == -10);
  CHECK(q3.gold_path.steps.front() == "-4 - 7 = -11");
}

TEST_CASE("check_answer") {
  const Question q = make_question(5, {{Op::add, 3}, {Op::mul, 2}});
  CHECK(check_answer(q, 16));
  CHECK_FALSE(check_answer(q, -16));
  CHECK_FALSE(check_answer(q, kMalformed));
}

TEST_CASE("check_step accepts exactly the scheduled, consistent, correct step") {
  const Question q = make_question(5, {{Op::add, 3}, {Op::mul, 2}});
  const std::vector<std::string> empty;
  CHECK(check_step(q, empty, "5 + 3 = 8"));
  CHECK_FALSE(check_step(q, empty, "5 + 3 = 9"));   // arithmetic error
  CHECK_FALSE(check_step(q, empty, "5 - 3 = 2"));   // unscheduled operation
  CHECK_FALSE(check_step(q, empty, "4 + 3 = 7"));   // wrong running value
  CHECK_FALSE(check_step(q, empty, "gibberish"));   // unparseable, not an error

  const std::vector<std::string> prefix = {"5 + 3 = 8"};
  CHECK(check_step(q, prefix, "8 * 2 = 16"));
  CHECK_FALSE(check_step(q, prefix, "9 * 2 = 18"));  // consistency break
  const std::vector<std::string> both = {"5 + 3 = 8", "8 * 2 = 16"};
  CHECK_FALSE(check_step(q, both, "16 + 0 = 16"));   // nothing left to schedule
}

TEST_CASE("generation respects depth, determinism, and the value cage") {
  const auto one = generate_dataset(7, 1, {2, 2}, Split::train);
  REQUIRE(one.size() == 1);
  CHECK(one[0].gold_path.m() == 2);

  const auto a = generate_dataset(42, 500, {2, 5}, Split::train);
  const auto b = generate_dataset(42, 500, {2, 5}, Split::train);
  CHECK(serialize(a) == serialize(b));

  for (const Question& q : a) {
    CHECK(q.ops.size() >= 2);
    CHECK(q.ops.size() <= 5);
    long long v = q.start_value;
    for (const auto& [op, y] : q.ops) {
      v = apply_op(v, op, y);
      CHECK(v >= -999);
      CHECK(v <= 999);
      CHECK((op != Op::mul || y != 0));
    }
    // gold path passes the step checker all the way through
    for (int j = 0; j < q.gold_path.m(); ++j) {
      const std::span<const std::string> prefix(q.gold_path.steps.data(),
                                                static_cast<std::size_t>(j));
      CHECK(check_step(q, prefix, q.gold_path.steps[static_cast<std::size_t>(j)]));
    }
    CHECK(check_answer(q, q.gold_path.final_answer));
  }
}

TEST_CASE("train and test splits share no token sequences") {
  const auto train = generate_dataset(7, 100, {2, 4}, Split::train);
  const auto test = generate_dataset(7, 100, {2, 4}, Split::test);
  std::set<TokenSeq> train_tokens;
  for (const Question& q : train) train_tokens.insert(q.text_tokens);
  for (const Question& q : test) CHECK(train_tokens.count(q.text_tokens) == 0);
}

TEST_CASE("depth range outside [2,5] is a configuration error") {
  CHECK_THROWS_AS(generate_dataset(1, 1, {1, 3}, Split::train), std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset(1, 1, {2, 6}, Split::train), std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset(1, 0, {2, 3}, Split::train), std::invalid_argument);
}

TEST_CASE("codec round-trips gold sequences and degrades garbage to MALFORMED") {
  const auto qs = generate_dataset(11, 50, {2, 5}, Split::train);
  for (const Question& q : qs) {
    const TokenSeq completion = encode_path(q.gold_path);
    const ReasoningPath back = decode(completion);
    CHECK(back == q.gold_path);
    CHECK(encode_path(back) == completion);
  }

  // No answer marker anywhere: malformed, steps still split on the separator.
  const TokenSeq no_ans = {kDigit0 + 5, kAdd, kDigit0 + 3, kEq, kDigit0 + 8, kSep};
  const ReasoningPath p = decode(no_ans);
  CHECK_FALSE(p.final_answer.has_value());
  CHECK(p.steps == std::vector<std::string>{"5 + 3 = 8"});
}

TEST_CASE("decode never throws and well-formed decodes re-encode losslessly") {
  Rng rng(123);
  int round_trips = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    TokenSeq toks(static_cast<std::size_t>(rng.next_int(0, 40)));
    for (int& t : toks) t = rng.next_int(0, TokenCodec::kVocabSize - 1);
    ReasoningPath p;
    CHECK_NOTHROW(p = decode(toks));
    if (p.final_answer.has_value() && p.m() >= 1) {
      const ReasoningPath again = decode(encode_path(p));
      CHECK(again == p);
      ++round_trips;
    }
  }
  CHECK(round_trips > 0);  // the fuzz stream must exercise the well-formed branch
}

TEST_CASE("dataset JSONL round-trips and validates against the oracle") {
  const auto qs = generate_dataset(3, 20, {2, 4}, Split::test);
  const std::string path = (std::filesystem::temp_directory_path() / "sipf_ds.jsonl").string();
  write_dataset_jsonl(path, qs);
  const auto back = read_dataset_jsonl(path);
  REQUIRE(back.size() == qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) {
    CHECK(back[i].id == qs[i].id);
    CHECK(back[i].text_tokens == qs[i].text_tokens);
    CHECK(back[i].gold_answer == qs[i].gold_answer);
    CHECK(back[i].gold_path == qs[i].gold_path);
  }
}

TEST_CASE("corruption oracle: every corrupted gold path has a zero-suffix truth") {
  const auto qs = generate_dataset(5, 40, {2, 5}, Split::train);
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const testing::CorruptedPath c = testing::corrupt_gold_path(qs[i], true, 1000 + i);
    REQUIRE(c.truth.size() == static_cast<std::size_t>(c.path.m()));
    for (int j = 0; j < c.path.m(); ++j) {
      CHECK(c.truth[static_cast<std::size_t>(j)] == (j < c.corrupt_index ? 1 : 0));
    }
    CHECK_FALSE(check_answer(qs[i], c.path.final_answer));
  }
}
