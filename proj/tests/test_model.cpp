#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aftlab/model.hpp"
#include "aftlab/task.hpp"
#include "aftlab/util.hpp"
#include "support/test_helpers.hpp"

#include <cmath>
#include <random>

using namespace aftlab;
using namespace aftlab::testing;

namespace {

const Vocabulary& vocab = Vocabulary::standard();

Problem fixture_problem() { return make_problem(5, {{'+', 3}, {'*', 2}}, 100); }

}  // namespace

TEST_CASE("uniform-logit model scores -ln V per token") {
  Problem p = fixture_problem();
  ModelParams zp = ModelParams::zeros(reference_model(), vocab.size());
  SequenceScore s = score_sequence(zp, p.question_tokens, p.reference_response);
  CHECK(s.value == doctest::Approx(-std::log(vocab.size())).epsilon(1e-12));
  CHECK(s.token_count == static_cast<int>(p.reference_response.size()));
  CHECK(perplexity(zp, p.question_tokens, p.reference_response) ==
        doctest::Approx(static_cast<double>(vocab.size())).epsilon(1e-12));
}

TEST_CASE("single-token response scores the log of its probability") {
  Problem p = fixture_problem();
  ModelParams mp = ModelParams::init(micro_model(), vocab.size());
  TokenSeq one = {vocab.digit(7)};
  SequenceScore s = score_sequence(mp, p.question_tokens, one);

  TokenSeq prefix;
  prefix.push_back(vocab.bos());
  for (int t : p.question_tokens) prefix.push_back(t);
  Matrix logits = forward_logits_nograd(mp, prefix);
  Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
  double denom = (row.array() - row.maxCoeff()).exp().sum();
  double prob = std::exp(row(vocab.digit(7)) - row.maxCoeff()) / denom;
  CHECK(s.value == doctest::Approx(std::log(prob)).epsilon(1e-10));
}

TEST_CASE("score equals an independent per-token slow path") {
  Problem p = fixture_problem();
  ModelParams mp = ModelParams::init(micro_model(17), vocab.size());
  TokenSeq response = {vocab.digit(3), vocab.digit(1), vocab.plus(), vocab.digit(2), vocab.eos()};
  SequenceScore s = score_sequence(mp, p.question_tokens, response);
  REQUIRE(s.token_count == 5);

  TokenSeq full;
  full.push_back(vocab.bos());
  for (int t : p.question_tokens) full.push_back(t);
  for (int t : response) full.push_back(t);
  TokenSeq inputs(full.begin(), full.end() - 1);
  Matrix logits = forward_logits_nograd(mp, inputs);

  long double total = 0.0L;
  std::size_t q = p.question_tokens.size();
  for (std::size_t j = 0; j < response.size(); ++j) {
    Eigen::Index row = static_cast<Eigen::Index>(q + j);
    long double denom = 0.0L;  // plain exp-sum, no max shift
    for (Eigen::Index c = 0; c < logits.cols(); ++c) denom += std::exp((long double)logits(row, c));
    total += (long double)logits(row, full[q + j + 1]) - std::log(denom);
  }
  CHECK(s.value == doctest::Approx(static_cast<double>(total / 5.0L)).epsilon(1e-12));
}

TEST_CASE("perplexity is exp of the negative score") {
  Problem p = fixture_problem();
  ModelParams mp = ModelParams::init(micro_model(9), vocab.size());
  SequenceScore s = score_sequence(mp, p.question_tokens, p.reference_response);
  CHECK(perplexity(mp, p.question_tokens, p.reference_response) ==
        doctest::Approx(std::exp(-s.value)).epsilon(1e-14));
  CHECK(perplexity(mp, p.question_tokens, p.reference_response) >= 1.0);
}

TEST_CASE("scores are log-probabilities: never positive") {
  std::mt19937_64 rng(4);
  for (int it = 0; it < 10; ++it) {
    ModelParams mp = ModelParams::init(micro_model(100 + it), vocab.size());
    Problem p = generate_dataset(1, 50 + it, TaskConfig{})[0];
    CHECK(score_sequence(mp, p.question_tokens, p.reference_response).value <= 0.0);
  }
}

TEST_CASE("softmax normalization at every position") {
  ModelParams mp = ModelParams::init(reference_model(23), vocab.size());
  Problem p = fixture_problem();
  TokenSeq full;
  full.push_back(vocab.bos());
  for (int t : p.question_tokens) full.push_back(t);
  for (int t : p.reference_response) full.push_back(t);
  Matrix logits = forward_logits_nograd(mp, full);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = logits.row(i).maxCoeff();
    Eigen::ArrayXd probs = (logits.row(i).array() - mx).exp();
    probs /= probs.sum();
    CHECK(std::abs(probs.sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("causality: future tokens cannot move past logits") {
  ModelParams mp = ModelParams::init(reference_model(29), vocab.size());
  Problem p = fixture_problem();
  TokenSeq full;
  full.push_back(vocab.bos());
  for (int t : p.question_tokens) full.push_back(t);
  for (int t : p.reference_response) full.push_back(t);

  Matrix base = forward_logits_nograd(mp, full);
  std::mt19937_64 rng(8);
  for (int it = 0; it < 5; ++it) {
    std::size_t pos = full.size() - 1 - static_cast<std::size_t>(rng_int(rng, 0, 5));
    TokenSeq pert = full;
    pert[pos] = vocab.digit(rng_int(rng, 0, 9));
    Matrix moved = forward_logits_nograd(mp, pert);
    CHECK((base.topRows(static_cast<Eigen::Index>(pos)) - moved.topRows(static_cast<Eigen::Index>(pos)))
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("batch order never changes a score") {
  ModelParams mp = ModelParams::init(micro_model(31), vocab.size());
  std::vector<Problem> ps = generate_dataset(6, 19, TaskConfig{});
  std::vector<double> forward_order, reverse_order;
  for (const Problem& p : ps)
    forward_order.push_back(score_sequence(mp, p.question_tokens, p.reference_response).value);
  for (auto it = ps.rbegin(); it != ps.rend(); ++it)
    reverse_order.push_back(score_sequence(mp, it->question_tokens, it->reference_response).value);
  for (std::size_t i = 0; i < ps.size(); ++i)
    CHECK(std::abs(forward_order[i] - reverse_order[ps.size() - 1 - i]) <= 1e-12);
}

TEST_CASE("differentiable and plain forwards agree") {
  ModelParams mp = ModelParams::init(reference_model(41), vocab.size());
  Problem p = fixture_problem();
  TokenSeq full;
  full.push_back(vocab.bos());
  for (int t : p.question_tokens) full.push_back(t);
  for (int t : p.reference_response) full.push_back(t);
  Tape tape;
  BoundModel bound(tape, mp, false);
  Matrix graph = bound.logits(full).val();
  Matrix plain = forward_logits_nograd(mp, full);
  CHECK((graph - plain).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("sampling: greedy limit, determinism, uniform unigram") {
  Problem p = fixture_problem();

  SUBCASE("temperature 0 is an explicit argmax decode") {
    ModelParams mp = ModelParams::init(micro_model(55), vocab.size());
    std::mt19937_64 rng(1);
    SampleResult greedy = sample_cot(mp, p.question_tokens, 0.0, rng, 24);

    TokenSeq prefix;
    prefix.push_back(vocab.bos());
    for (int t : p.question_tokens) prefix.push_back(t);
    TokenSeq expect;
    for (int step = 0; step < 24; ++step) {
      Matrix logits = forward_logits_nograd(mp, prefix);
      Eigen::Index j;
      logits.row(logits.rows() - 1).maxCoeff(&j);
      expect.push_back(static_cast<int>(j));
      prefix.push_back(static_cast<int>(j));
      if (static_cast<int>(j) == vocab.eos()) break;
    }
    CHECK(greedy.tokens == expect);
  }

  SUBCASE("fixed seed reproduces the sample") {
    ModelParams mp = ModelParams::init(micro_model(56), vocab.size());
    std::mt19937_64 r1(99), r2(99);
    SampleResult a = sample_cot(mp, p.question_tokens, 1.0, r1, 40);
    SampleResult b = sample_cot(mp, p.question_tokens, 1.0, r2, 40);
    CHECK(a.tokens == b.tokens);
    CHECK(a.score == b.score);
  }

  SUBCASE("uniform model first-token frequencies sit within 3 sigma of 1/V") {
    ModelParams zp = ModelParams::zeros(micro_model(), vocab.size());
    std::mt19937_64 rng(2024);
    const int n = 10000;
    std::vector<int> counts(static_cast<std::size_t>(vocab.size()), 0);
    for (int i = 0; i < n; ++i) {
      SampleResult s = sample_cot(zp, p.question_tokens, 1.0, rng, 1);
      REQUIRE(s.tokens.size() == 1);
      ++counts[static_cast<std::size_t>(s.tokens[0])];
    }
    double expect = 1.0 / vocab.size();
    double sigma = std::sqrt(expect * (1 - expect) / n);
    for (int tok = 0; tok < vocab.size(); ++tok) {
      double freq = static_cast<double>(counts[static_cast<std::size_t>(tok)]) / n;
      CHECK(std::abs(freq - expect) < 3 * sigma);
    }
  }

  SUBCASE("truncation is flagged, not an error") {
    ModelParams zp = ModelParams::zeros(micro_model(), vocab.size());
    std::mt19937_64 rng(3);
    SampleResult s = sample_cot(zp, p.question_tokens, 0.0, rng, 4);
    // greedy uniform model repeats token 0 and never emits <eos>
    CHECK(s.truncated);
    CHECK(s.tokens.size() == 4);
  }
}

TEST_CASE("sampled score matches rescoring the same tokens") {
  ModelParams mp = ModelParams::init(micro_model(77), vocab.size());
  Problem p = fixture_problem();
  std::mt19937_64 rng(5);
  SampleResult s = sample_cot(mp, p.question_tokens, 1.0, rng, 40);
  REQUIRE(!s.tokens.empty());
  SequenceScore rescored = score_sequence(mp, p.question_tokens, s.tokens);
  CHECK(s.score == doctest::Approx(rescored.value).epsilon(1e-10));
  CHECK(s.token_count == rescored.token_count);
}

TEST_CASE("sequence length errors carry the lengths") {
  ModelConfig small = micro_model();
  small.context_len = 16;
  ModelParams mp = ModelParams::init(small, vocab.size());
  Problem p = make_problem(5, {{'+', 3}, {'*', 2}, {'-', 4}, {'+', 8}, {'*', 9}}, 100);
  CHECK_THROWS_WITH_AS(score_sequence(mp, p.question_tokens, p.reference_response),
                       doctest::Contains("context_len"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(score_sequence(mp, p.question_tokens, {}), doctest::Contains("empty"),
                       std::invalid_argument);
}

TEST_CASE("init is seed-deterministic and parameter count is sane") {
  ModelParams a = ModelParams::init(reference_model(7), vocab.size());
  ModelParams b = ModelParams::init(reference_model(7), vocab.size());
  ModelParams c = ModelParams::init(reference_model(8), vocab.size());
  bool same = true, diff = false;
  a.for_each([&](const std::string& name, const Matrix& m) {
    b.for_each([&](const std::string& name2, const Matrix& m2) {
      if (name == name2) same = same && (m - m2).isZero(0.0);
    });
    c.for_each([&](const std::string& name2, const Matrix& m2) {
      if (name == name2) diff = diff || !(m - m2).isZero(0.0);
    });
  });
  CHECK(same);
  CHECK(diff);
  CHECK(a.parameter_count() > 50000);  // 2-layer hidden-64 reference config
}
