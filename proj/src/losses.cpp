#include "aftlab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace aftlab {

namespace {

// Compact numeric form for row labels: "0.15", "1", "0.05".
std::string fmt_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

// log[1 + sum exp(x_i)] as one stable logsumexp over [0, x...].
Value log1p_sum_exp(Tape& tape, std::vector<Value> exponents) {
  std::vector<Value> parts;
  parts.reserve(exponents.size() + 1);
  parts.push_back(tape.constant(0.0));
  for (Value& e : exponents) parts.push_back(e);
  return logsumexp(concat_rows(parts));
}

double min_value(std::span<const Value> xs) {
  double m = xs[0].item();
  for (const Value& x : xs.subspan(1)) m = std::min(m, x.item());
  return m;
}

bool has_strict_pair(std::span<const RankedScore> items) {
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::size_t j = i + 1; j < items.size(); ++j)
      if (items[i].tier < items[j].tier) return true;
  return false;
}

}  // namespace

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::VFT: return "VFT";
    case LossKind::AFT_DC: return "AFT_DC";
    case LossKind::AFT_BC: return "AFT_BC";
    case LossKind::AFT_RBC: return "AFT_RBC";
    case LossKind::RDC1: return "RDC1";
    case LossKind::RDC2: return "RDC2";
    case LossKind::R_UNCONSTRAINED: return "R_UNCONSTRAINED";
    case LossKind::A_UNCONSTRAINED: return "A_UNCONSTRAINED";
    case LossKind::RRHF: return "RRHF";
    case LossKind::PRO: return "PRO";
    case LossKind::DPO: return "DPO";
  }
  throw std::logic_error("unknown LossKind");
}

LossKind loss_kind_from_string(const std::string& name) {
  static const std::pair<const char*, LossKind> table[] = {
      {"VFT", LossKind::VFT},
      {"AFT_DC", LossKind::AFT_DC},
      {"AFT_BC", LossKind::AFT_BC},
      {"AFT_RBC", LossKind::AFT_RBC},
      {"RDC1", LossKind::RDC1},
      {"RDC2", LossKind::RDC2},
      {"R_UNCONSTRAINED", LossKind::R_UNCONSTRAINED},
      {"A_UNCONSTRAINED", LossKind::A_UNCONSTRAINED},
      {"RRHF", LossKind::RRHF},
      {"PRO", LossKind::PRO},
      {"DPO", LossKind::DPO},
  };
  for (const auto& [n, k] : table)
    if (name == n) return k;
  throw std::invalid_argument("unknown loss kind: '" + name + "'");
}

bool is_binary_kind(LossKind kind) {
  return kind == LossKind::AFT_DC || kind == LossKind::AFT_BC ||
         kind == LossKind::A_UNCONSTRAINED;
}

bool is_ranking_kind(LossKind kind) {
  switch (kind) {
    case LossKind::AFT_RBC:
    case LossKind::RDC1:
    case LossKind::RDC2:
    case LossKind::R_UNCONSTRAINED:
    case LossKind::RRHF:
    case LossKind::PRO:
    case LossKind::DPO:
      return true;
    default:
      return false;
  }
}

std::string LossSpec::label() const {
  std::string name = to_string(kind);
  switch (kind) {
    case LossKind::AFT_BC:
    case LossKind::AFT_RBC:
      return name + "(beta=" + fmt_label(beta_boundary) + ")";
    case LossKind::RRHF:
      return name + (rrhf_constraint ? "+DC" : "") + "(scale=" + fmt_label(rrhf_scale) + ")";
    case LossKind::PRO:
      return name + (pro_use_tau ? "" : "-tau") + (pro_constraint ? "+DC" : "");
    case LossKind::DPO:
      return name + "(beta=" + fmt_label(dpo_beta) + ")";
    default:
      return name;
  }
}

double quality_reward(bool answer_correct, double step_score) {
  return 0.5 * ((answer_correct ? 1.0 : 0.0) + step_score);
}

int FeedbackGroup::positives() const {
  int n = 0;
  for (const FeedbackMember& m : members) n += m.correct ? 1 : 0;
  return n;
}

int FeedbackGroup::negatives() const { return static_cast<int>(members.size()) - positives(); }

FeedbackGroup make_feedback_group(int question_index, bool ranking_mode,
                                  std::vector<FeedbackMember> members) {
  FeedbackGroup g;
  g.question_index = question_index;
  g.ranking_mode = ranking_mode;
  g.members = std::move(members);
  if (!ranking_mode) {
    g.usable = g.positives() >= 1 && g.negatives() >= 1;
    return g;
  }
  std::stable_sort(g.members.begin(), g.members.end(),
                   [](const FeedbackMember& a, const FeedbackMember& b) {
                     if (a.correct != b.correct) return a.correct;
                     if (a.quality != b.quality) return a.quality > b.quality;
                     if (a.sampled_score != b.sampled_score) return a.sampled_score > b.sampled_score;
                     return a.gen_index < b.gen_index;
                   });
  g.tiers.resize(g.members.size());
  int tier = 0;
  for (std::size_t i = 0; i < g.members.size(); ++i) {
    if (i > 0 && (g.members[i].correct != g.members[i - 1].correct ||
                  g.members[i].quality != g.members[i - 1].quality))
      ++tier;
    g.tiers[i] = tier;
  }
  g.usable = !g.tiers.empty() && g.tiers.back() > 0;  // at least one strict pair
  return g;
}

// --- score-level losses ---------------------------------------------------------

Value loss_vft(Value token_logp_sum) { return neg(token_logp_sum); }

std::optional<Value> loss_align_unconstrained(std::span<const Value> pos,
                                              std::span<const Value> neg_scores) {
  if (pos.empty() || neg_scores.empty()) return std::nullopt;
  Tape& tape = pos[0].tape();
  std::vector<Value> exps;
  exps.reserve(pos.size() * neg_scores.size());
  for (const Value& p : pos)
    for (const Value& n : neg_scores) exps.push_back(sub(n, p));
  return log1p_sum_exp(tape, std::move(exps));
}

std::optional<Value> loss_align_dc(std::span<const Value> pos, std::span<const Value> neg_scores) {
  if (pos.empty() || neg_scores.empty()) return std::nullopt;
  Tape& tape = pos[0].tape();
  std::vector<Value> exps;
  exps.reserve(pos.size() * neg_scores.size());
  for (const Value& p : pos)
    for (const Value& n : neg_scores) exps.push_back(sub(detach(n), p));
  return log1p_sum_exp(tape, std::move(exps));
}

std::optional<Value> loss_align_bc(std::span<const Value> pos, std::span<const Value> neg_scores,
                                   double beta) {
  if (pos.empty() || neg_scores.empty()) return std::nullopt;
  Tape& tape = pos[0].tape();
  // T = 2 s_p* - 2 beta - s_p with s_p* and s_p entering as detached constants,
  // so the constraint term's gradient lands on s_n alone.
  double sp_star = min_value(pos);
  std::vector<Value> exps;
  exps.reserve(2 * pos.size() * neg_scores.size());
  for (const Value& p : pos) {
    double t_pn = 2.0 * sp_star - 2.0 * beta - p.item();
    for (const Value& n : neg_scores) {
      exps.push_back(sub(n, p));     // alignment term
      exps.push_back(sub(t_pn, n));  // constraint term
    }
  }
  return log1p_sum_exp(tape, std::move(exps));
}

std::optional<Value> loss_align_rbc(std::span<const RankedScore> items, double beta) {
  if (items.size() < 2 || !has_strict_pair(items)) return std::nullopt;
  Tape& tape = items[0].s.tape();
  std::vector<Value> exps;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t j = i + 1; j < items.size(); ++j) {
      if (items[i].tier >= items[j].tier) continue;
      // s_j* = current minimum score among items strictly better than c_j
      double sj_star = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < items.size(); ++k)
        if (items[k].tier < items[j].tier) sj_star = std::min(sj_star, items[k].s.item());
      exps.push_back(sub(items[j].s, items[i].s));
      exps.push_back(sub(2.0 * sj_star - 2.0 * beta - items[i].s.item(), items[j].s));
    }
  }
  return log1p_sum_exp(tape, std::move(exps));
}

std::optional<Value> loss_rdc1(std::span<const RankedScore> items) {
  if (items.size() < 2 || !has_strict_pair(items)) return std::nullopt;
  Tape& tape = items[0].s.tape();
  std::vector<Value> exps;
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::size_t j = i + 1; j < items.size(); ++j)
      if (items[i].tier < items[j].tier) exps.push_back(sub(detach(items[j].s), items[i].s));
  return log1p_sum_exp(tape, std::move(exps));
}

std::optional<Value> loss_rdc2(std::span<const RankedScore> items) {
  if (items.size() < 2 || !has_strict_pair(items)) return std::nullopt;
  Tape& tape = items[0].s.tape();
  int max_tier = 0;
  for (const RankedScore& r : items) max_tier = std::max(max_tier, r.tier);
  std::vector<Value> exps;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t j = i + 1; j < items.size(); ++j) {
      if (items[i].tier >= items[j].tier) continue;
      bool in_cmin = items[j].tier == max_tier;  // lowest-quality set
      Value worse = in_cmin ? detach(items[j].s) : items[j].s;
      exps.push_back(sub(worse, items[i].s));
    }
  }
  return log1p_sum_exp(tape, std::move(exps));
}

std::optional<Value> loss_r_unconstrained(std::span<const RankedScore> items) {
  if (items.size() < 2 || !has_strict_pair(items)) return std::nullopt;
  Tape& tape = items[0].s.tape();
  std::vector<Value> exps;
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::size_t j = i + 1; j < items.size(); ++j)
      if (items[i].tier < items[j].tier) exps.push_back(sub(items[j].s, items[i].s));
  return log1p_sum_exp(tape, std::move(exps));
}

std::optional<Value> loss_rrhf(std::span<const RankedScore> items, double scale, bool constrained) {
  if (items.size() < 2 || !has_strict_pair(items)) return std::nullopt;
  std::vector<Value> hinges;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t j = i + 1; j < items.size(); ++j) {
      if (items[i].tier >= items[j].tier) continue;
      Value worse = constrained ? detach(items[j].s) : items[j].s;
      hinges.push_back(relu(sub(worse, items[i].s)));
    }
  }
  return mul(sum_all(concat_rows(hinges)), scale);
}

std::optional<Value> loss_pro(std::span<const RankedScore> items, bool use_tau, bool constrained) {
  if (items.size() < 2) return std::nullopt;
  Tape& tape = items[0].s.tape();
  // epsilon per rank position breaks reward ties; every position pair becomes
  // a compared pair with tau > 0.
  std::vector<double> reward(items.size());
  for (std::size_t i = 0; i < items.size(); ++i)
    reward[i] = items[i].reward - kProTieBreakEps * static_cast<double>(i);

  std::optional<Value> total;
  for (std::size_t i = 0; i + 1 < items.size(); ++i) {
    double tau_max = reward[i] - reward[items.size() - 1];
    std::vector<Value> exps;
    exps.reserve(items.size() - i - 1);
    for (std::size_t j = i + 1; j < items.size(); ++j) {
      double tau = reward[i] - reward[j];
      if (use_tau && tau <= 0.0)
        throw std::invalid_argument("loss_pro: non-positive tau after tie-break (rewards out of order)");
      double tj = use_tau ? tau : 1.0;
      double ti = use_tau ? tau_max : 1.0;
      Value worse = constrained ? detach(items[j].s) : items[j].s;
      exps.push_back(sub(mul(worse, tj), mul(items[i].s, ti)));
    }
    Value term = log1p_sum_exp(tape, std::move(exps));
    total = total ? add(*total, term) : term;
  }
  return total;
}

std::optional<Value> loss_dpo(std::span<const RankedScore> items,
                              std::span<const double> ref_scores, double beta) {
  if (items.size() != ref_scores.size())
    throw std::invalid_argument("loss_dpo: missing reference score (have " +
                                std::to_string(ref_scores.size()) + " for " +
                                std::to_string(items.size()) + " items)");
  if (items.size() < 2 || !has_strict_pair(items)) return std::nullopt;
  Tape& tape = items[0].s.tape();
  std::optional<Value> total;
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::vector<Value> exps;
    for (std::size_t j = i + 1; j < items.size(); ++j) {
      if (items[i].tier >= items[j].tier) continue;
      // beta * ((s_j - s_j_ref) - (s_i - s_i_ref)); ref scores are constants
      Value delta = sub(sub(items[j].s, ref_scores[j]), sub(items[i].s, ref_scores[i]));
      exps.push_back(mul(delta, beta));
    }
    if (exps.empty()) continue;
    Value term = log1p_sum_exp(tape, std::move(exps));
    total = total ? add(*total, term) : term;
  }
  return total;
}

// --- batch objective -----------------------------------------------------------------

namespace {

std::optional<Value> align_term_for(const BoundModel& model, const Problem& problem,
                                    const FeedbackGroup& group, const LossSpec& spec) {
  if (is_binary_kind(spec.kind) && group.ranking_mode)
    throw std::invalid_argument("loss/feedback mismatch: " + to_string(spec.kind) +
                                " needs binary (G_P, G_N) feedback, got a ranking group");
  if (is_ranking_kind(spec.kind) && !group.ranking_mode)
    throw std::invalid_argument("loss/feedback mismatch: " + to_string(spec.kind) +
                                " needs ranking feedback, got a binary group");

  if (is_binary_kind(spec.kind)) {
    std::vector<Value> pos, neg_scores;
    for (const FeedbackMember& m : group.members) {
      Value s = score_sequence_graph(model, problem.question_tokens, m.response).average;
      (m.correct ? pos : neg_scores).push_back(s);
    }
    switch (spec.kind) {
      case LossKind::AFT_DC: return loss_align_dc(pos, neg_scores);
      case LossKind::AFT_BC: return loss_align_bc(pos, neg_scores, spec.beta_boundary);
      case LossKind::A_UNCONSTRAINED: return loss_align_unconstrained(pos, neg_scores);
      default: break;
    }
    throw std::logic_error("unhandled binary loss kind");
  }

  std::vector<RankedScore> items;
  std::vector<double> refs;
  items.reserve(group.members.size());
  for (std::size_t i = 0; i < group.members.size(); ++i) {
    const FeedbackMember& m = group.members[i];
    RankedScore r;
    r.s = score_sequence_graph(model, problem.question_tokens, m.response).average;
    r.tier = group.tiers.at(i);
    r.reward = quality_reward(m.correct, m.quality);
    items.push_back(r);
    if (spec.kind == LossKind::DPO) {
      if (!m.ref_score)
        throw std::invalid_argument("loss_dpo: member " + std::to_string(m.gen_index) +
                                    " of question " + std::to_string(group.question_index) +
                                    " has no reference score");
      refs.push_back(*m.ref_score);
    }
  }
  switch (spec.kind) {
    case LossKind::AFT_RBC: return loss_align_rbc(items, spec.beta_boundary);
    case LossKind::RDC1: return loss_rdc1(items);
    case LossKind::RDC2: return loss_rdc2(items);
    case LossKind::R_UNCONSTRAINED: return loss_r_unconstrained(items);
    case LossKind::RRHF: return loss_rrhf(items, spec.rrhf_scale, spec.rrhf_constraint);
    case LossKind::PRO: return loss_pro(items, spec.pro_use_tau, spec.pro_constraint);
    case LossKind::DPO: return loss_dpo(items, refs, spec.dpo_beta);
    default: break;
  }
  throw std::logic_error("unhandled ranking loss kind");
}

}  // namespace

TotalLoss total_loss(const BoundModel& model, std::span<const BatchItem> batch,
                     const LossSpec& spec) {
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  TotalLoss out;
  std::optional<Value> acc;
  for (const BatchItem& item : batch) {
    if (!item.problem) throw std::invalid_argument("total_loss: null problem in batch");
    const Problem& problem = *item.problem;
    const TokenSeq& response = item.response ? *item.response : problem.reference_response;
    ScoreGraph ref = score_sequence_graph(model, problem.question_tokens, response);
    Value term = loss_vft(ref.sum);
    if (spec.vft_weight != 1.0) term = mul(term, spec.vft_weight);

    if (spec.kind != LossKind::VFT && item.feedback) {
      std::optional<Value> align =
          item.feedback->usable ? align_term_for(model, problem, *item.feedback, spec)
                                : std::nullopt;
      if (align) {
        term = add(term, *align);
        ++out.align_applied;
      } else {
        ++out.align_skipped;
      }
    } else if (spec.kind != LossKind::VFT) {
      ++out.align_skipped;
    }
    acc = acc ? add(*acc, term) : term;
  }
  out.value = *acc;
  return out;
}

}  // namespace aftlab
