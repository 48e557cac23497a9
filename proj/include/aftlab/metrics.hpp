// Evaluation: task accuracy, assessment accuracy, positive-COT perplexity,
// Pearson correlation, and self-consistency voting.
#pragma once

#include "aftlab/model.hpp"
#include "aftlab/task.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace aftlab {

// Fixed positive/negative COTs for one question, used for assessment accuracy
// and positive-COT perplexity.
struct ProbeSet {
  int question_index = -1;
  std::vector<TokenSeq> positives;
  std::vector<TokenSeq> negatives;
};

// Fraction of greedy-decoded answers matching the oracle.
double eval_t_accuracy(const ModelParams& params, std::span<const Problem> test, int max_len,
                       int workers);

// Fraction of (positive, negative) score pairs with the positive strictly
// higher; ties count as failures.
double pairwise_accuracy(std::span<const double> pos_scores, std::span<const double> neg_scores);

// Assessment accuracy: fraction of (positive, negative) pairs where the model
// scores the positive strictly higher; ties count as failures. Every probe set
// must carry exactly `expect_pos` positives and `expect_neg` negatives.
double eval_a_accuracy(const ModelParams& params, std::span<const Problem> questions,
                       std::span<const ProbeSet> probes, int workers, int expect_pos = 3,
                       int expect_neg = 3);

struct PplReport {
  double mean_seq_ppl = 0.0;      // mean over sequences of exp(-avg logp)
  double token_pooled_ppl = 0.0;  // exp(-(sum logp) / (sum tokens)), secondary
  int sequences = 0;
};

// Perplexity over the probe sets' positive COTs.
PplReport eval_pos_ppl(const ModelParams& params, std::span<const Problem> questions,
                       std::span<const ProbeSet> probes, int workers);

// Sample Pearson correlation; needs >= 2 points and nonzero variance on both sides.
double pearson(std::span<const double> xs, std::span<const double> ys);

struct VoteCandidate {
  std::optional<int> answer;
  double score = 0.0;  // sequence score of the supporting COT
};

struct VoteOutcome {
  std::optional<int> answer;  // nullopt = abstention (no parseable path)
  int votes = 0;
};

// Majority vote; ties go to the answer whose best supporting COT scores
// highest, then to the smallest answer value.
VoteOutcome vote(std::span<const VoteCandidate> candidates);

// Samples `paths` COTs and votes on the extracted answers.
VoteOutcome self_consistency(const ModelParams& params, const Problem& problem, int paths,
                             double temperature, std::uint64_t seed, int max_len);

// Per-question evaluation rows; aggregates above are exactly recomputable
// from these.
struct QuestionEval {
  int question_index = -1;
  bool t_correct = false;
};

struct ProbeEval {
  int question_index = -1;
  int pairs_correct = 0;
  int pairs_total = 0;
  double pos_logp_sum = 0.0;  // summed token logp over positives
  int pos_tokens = 0;
  double pos_seq_ppl_sum = 0.0;
  int pos_sequences = 0;
};

struct EvalReport {
  double t_accuracy = 0.0;
  double a_accuracy = 0.0;
  double pos_ppl = 0.0;
  double pos_ppl_token_pooled = 0.0;
  int n_eval = 0;
  std::uint64_t seed = 0;
  std::vector<QuestionEval> test_rows;
  std::vector<ProbeEval> probe_rows;
};

// Runs the three evaluations and assembles a report with per-question rows.
EvalReport evaluate_model(const ModelParams& params, std::span<const Problem> test,
                          std::span<const Problem> probe_questions,
                          std::span<const ProbeSet> probes, int max_len, std::uint64_t seed,
                          int workers);

}  // namespace aftlab
