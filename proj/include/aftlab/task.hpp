// Synthetic chain-of-thought task: modular arithmetic chains with
// machine-checkable answers and a programmatic per-step quality rater.
//
// Sequence layout (token symbols):
//   question:  Q: <start> <op1> <d1> ... <opL> <dL> A:
//   response:  <v0> <op1> <d1> = <v1> ; ... ; # <answer> <eos>
// where every number is one digit token per digit.
#pragma once

#include "aftlab/vocab.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace aftlab {

struct TaskConfig {
  int modulus = 100;
  int min_steps = 2;
  int max_steps = 5;
};

struct Step {
  char op = '+';  // one of + - *
  int operand = 1;
};

struct Problem {
  int start = 0;
  std::vector<Step> steps;
  int modulus = 100;
  int answer = 0;

  std::string question_text;
  std::string reference_cot;
  TokenSeq question_tokens;
  TokenSeq reference_response;  // cot tokens + <eos>
};

struct QualityRating {
  int correct_steps = 0;
  int total_steps = 0;
  double score = 0.0;  // correct_steps / total_steps
  bool answer_correct = false;
};

// Replays the chain from `start`; element i is the value after step i.
std::vector<int> oracle_values(const Problem& p);

// Builds a Problem from its parts: computes the answer by replay and renders
// question/COT text and tokens.
Problem make_problem(int start, std::vector<Step> steps, int modulus);

std::vector<Problem> generate_dataset(int n, std::uint64_t seed, const TaskConfig& config);

struct DatasetSplits {
  std::vector<Problem> train, valid, test;
};

// Three splits from distinct seed streams; disjoint by construction (a problem
// sampled for one split is rejected for the others).
DatasetSplits generate_splits(const TaskConfig& config, int n_train, int n_valid, int n_test,
                              std::uint64_t seed);

// First answer marker, then the maximal digit run after it.
std::optional<int> extract_answer(const TokenSeq& response);

// Malformed chains are incorrect, never an error.
bool check_answer(const Problem& p, const TokenSeq& response);

// Stated value per step segment, in order, stopping at the answer segment;
// nullopt for segments that do not parse as "<a> <op> <b> = <v>".
std::vector<std::optional<int>> parse_step_values(const TokenSeq& response);

QualityRating rate_quality(const Problem& p, const TokenSeq& response);

// Reconstructs start/steps from rendered question text (used by JSONL load).
Problem parse_question(const std::string& question_text, int modulus);

// JSONL row format: {"question": ..., "cot": ..., "answer": ..., "seed": ..., "split": ...}
std::string dataset_to_jsonl(const std::vector<Problem>& problems, std::uint64_t seed,
                             const std::string& split);
std::vector<Problem> dataset_from_jsonl(const std::string& jsonl, int modulus);

}  // namespace aftlab
