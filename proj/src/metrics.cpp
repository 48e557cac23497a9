#include "aftlab/metrics.hpp"

#include "aftlab/util.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace aftlab {

double eval_t_accuracy(const ModelParams& params, std::span<const Problem> test, int max_len,
                       int workers) {
  if (test.empty()) return 0.0;
  std::vector<char> correct(test.size(), 0);
  parallel_for(test.size(), workers, [&](std::size_t i) {
    std::mt19937_64 rng(0);  // unused at temperature 0
    SampleResult s = sample_cot(params, test[i].question_tokens, 0.0, rng, max_len);
    correct[i] = check_answer(test[i], s.tokens) ? 1 : 0;
  });
  long n = 0;
  for (char c : correct) n += c;
  return static_cast<double>(n) / static_cast<double>(test.size());
}

namespace {

void check_probe_shape(const ProbeSet& p, int expect_pos, int expect_neg) {
  if (static_cast<int>(p.positives.size()) != expect_pos ||
      static_cast<int>(p.negatives.size()) != expect_neg)
    throw std::invalid_argument(
        "malformed probe set for question " + std::to_string(p.question_index) + ": have " +
        std::to_string(p.positives.size()) + "+" + std::to_string(p.negatives.size()) +
        ", expected " + std::to_string(expect_pos) + "+" + std::to_string(expect_neg));
}

}  // namespace

double pairwise_accuracy(std::span<const double> pos_scores, std::span<const double> neg_scores) {
  if (pos_scores.empty() || neg_scores.empty())
    throw std::invalid_argument("pairwise_accuracy: empty score list");
  long correct = 0;
  for (double a : pos_scores)
    for (double b : neg_scores)
      if (a > b) ++correct;  // strict: ties count as failures
  return static_cast<double>(correct) /
         static_cast<double>(pos_scores.size() * neg_scores.size());
}

double eval_a_accuracy(const ModelParams& params, std::span<const Problem> questions,
                       std::span<const ProbeSet> probes, int workers, int expect_pos,
                       int expect_neg) {
  if (probes.empty()) throw std::invalid_argument("eval_a_accuracy: no probe sets");
  for (const ProbeSet& p : probes) check_probe_shape(p, expect_pos, expect_neg);

  std::vector<long> correct(probes.size(), 0), total(probes.size(), 0);
  parallel_for(probes.size(), workers, [&](std::size_t i) {
    const ProbeSet& p = probes[i];
    const TokenSeq& q = questions[static_cast<std::size_t>(p.question_index)].question_tokens;
    std::vector<double> sp, sn;
    for (const TokenSeq& c : p.positives) sp.push_back(score_sequence(params, q, c).value);
    for (const TokenSeq& c : p.negatives) sn.push_back(score_sequence(params, q, c).value);
    for (double a : sp)
      for (double b : sn) {
        ++total[i];
        if (a > b) ++correct[i];  // strict: ties count as failures
      }
  });
  long num = 0, den = 0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    num += correct[i];
    den += total[i];
  }
  return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
}

PplReport eval_pos_ppl(const ModelParams& params, std::span<const Problem> questions,
                       std::span<const ProbeSet> probes, int workers) {
  if (probes.empty()) throw std::invalid_argument("eval_pos_ppl: no probe sets");
  struct Acc {
    double seq_ppl_sum = 0.0;
    double logp_sum = 0.0;
    long tokens = 0;
    int sequences = 0;
  };
  std::vector<Acc> acc(probes.size());
  parallel_for(probes.size(), workers, [&](std::size_t i) {
    const ProbeSet& p = probes[i];
    const TokenSeq& q = questions[static_cast<std::size_t>(p.question_index)].question_tokens;
    for (const TokenSeq& c : p.positives) {
      SequenceScore s = score_sequence(params, q, c);
      acc[i].seq_ppl_sum += std::exp(-s.value);
      acc[i].logp_sum += s.value * s.token_count;
      acc[i].tokens += s.token_count;
      ++acc[i].sequences;
    }
  });
  PplReport out;
  double logp = 0.0;
  long tokens = 0;
  double ppl = 0.0;
  for (const Acc& a : acc) {
    ppl += a.seq_ppl_sum;
    logp += a.logp_sum;
    tokens += a.tokens;
    out.sequences += a.sequences;
  }
  if (out.sequences == 0) throw std::invalid_argument("eval_pos_ppl: probe sets have no positives");
  out.mean_seq_ppl = ppl / out.sequences;
  out.token_pooled_ppl = std::exp(-logp / static_cast<double>(tokens));
  return out;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pearson: length mismatch");
  if (xs.size() < 2) throw std::invalid_argument("pearson: need at least 2 points");
  double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: zero variance input");
  return sxy / std::sqrt(sxx * syy);
}

VoteOutcome vote(std::span<const VoteCandidate> candidates) {
  std::map<int, int> counts;
  std::map<int, double> best_score;
  for (const VoteCandidate& c : candidates) {
    if (!c.answer) continue;
    int a = *c.answer;
    auto [it, fresh] = counts.try_emplace(a, 0);
    ++it->second;
    auto [bs, fresh2] = best_score.try_emplace(a, c.score);
    if (!fresh2) bs->second = std::max(bs->second, c.score);
  }
  VoteOutcome out;
  if (counts.empty()) return out;  // abstention
  int best_count = 0;
  for (const auto& [a, n] : counts) best_count = std::max(best_count, n);
  // tie break: highest best supporting score, then smallest answer value
  std::optional<int> winner;
  for (const auto& [a, n] : counts) {  // std::map iterates answers ascending
    if (n != best_count) continue;
    if (!winner || best_score[a] > best_score[*winner]) winner = a;
  }
  out.answer = winner;
  out.votes = best_count;
  return out;
}

VoteOutcome self_consistency(const ModelParams& params, const Problem& problem, int paths,
                             double temperature, std::uint64_t seed, int max_len) {
  if (paths < 1) throw std::invalid_argument("self_consistency: paths must be >= 1");
  std::mt19937_64 rng(mix_seed(seed, "self-consistency", 0));
  std::vector<VoteCandidate> candidates;
  candidates.reserve(static_cast<std::size_t>(paths));
  for (int i = 0; i < paths; ++i) {
    SampleResult s = sample_cot(params, problem.question_tokens, temperature, rng, max_len);
    candidates.push_back({extract_answer(s.tokens), s.score});
  }
  return vote(candidates);
}

EvalReport evaluate_model(const ModelParams& params, std::span<const Problem> test,
                          std::span<const Problem> probe_questions,
                          std::span<const ProbeSet> probes, int max_len, std::uint64_t seed,
                          int workers) {
  EvalReport report;
  report.seed = seed;
  report.n_eval = static_cast<int>(test.size());

  report.test_rows.resize(test.size());
  parallel_for(test.size(), workers, [&](std::size_t i) {
    std::mt19937_64 rng(0);
    SampleResult s = sample_cot(params, test[i].question_tokens, 0.0, rng, max_len);
    report.test_rows[i] = {static_cast<int>(i), check_answer(test[i], s.tokens)};
  });
  long t_hits = 0;
  for (const QuestionEval& r : report.test_rows) t_hits += r.t_correct ? 1 : 0;
  report.t_accuracy = test.empty() ? 0.0 : static_cast<double>(t_hits) / test.size();

  report.probe_rows.resize(probes.size());
  parallel_for(probes.size(), workers, [&](std::size_t i) {
    const ProbeSet& p = probes[i];
    check_probe_shape(p, 3, 3);
    const TokenSeq& q =
        probe_questions[static_cast<std::size_t>(p.question_index)].question_tokens;
    ProbeEval row;
    row.question_index = p.question_index;
    std::vector<double> sp, sn;
    for (const TokenSeq& c : p.positives) {
      SequenceScore s = score_sequence(params, q, c);
      sp.push_back(s.value);
      row.pos_logp_sum += s.value * s.token_count;
      row.pos_tokens += s.token_count;
      row.pos_seq_ppl_sum += std::exp(-s.value);
      ++row.pos_sequences;
    }
    for (const TokenSeq& c : p.negatives) sn.push_back(score_sequence(params, q, c).value);
    for (double a : sp)
      for (double b : sn) {
        ++row.pairs_total;
        if (a > b) ++row.pairs_correct;
      }
    report.probe_rows[i] = row;
  });
  long pc = 0, pt = 0, seqs = 0, tokens = 0;
  double ppl_sum = 0.0, logp_sum = 0.0;
  for (const ProbeEval& r : report.probe_rows) {
    pc += r.pairs_correct;
    pt += r.pairs_total;
    seqs += r.pos_sequences;
    tokens += r.pos_tokens;
    ppl_sum += r.pos_seq_ppl_sum;
    logp_sum += r.pos_logp_sum;
  }
  report.a_accuracy = pt > 0 ? static_cast<double>(pc) / static_cast<double>(pt) : 0.0;
  report.pos_ppl = seqs > 0 ? ppl_sum / static_cast<double>(seqs) : 0.0;
  report.pos_ppl_token_pooled =
      tokens > 0 ? std::exp(-logp_sum / static_cast<double>(tokens)) : 0.0;
  return report;
}

}  // namespace aftlab
