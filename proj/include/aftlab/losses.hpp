// Training objectives: maximum-likelihood fine-tuning, the constraint
// alignment family (detached / boundary / ranking-boundary), and the
// RRHF / PRO / DPO comparison set with optional constraint retrofits.
//
// Every exp-sum is evaluated in log space: log[1 + sum_i exp(x_i)] is
// logsumexp over [0, x_1, ..., x_m], so nothing overflows.
#pragma once

#include "aftlab/autodiff.hpp"
#include "aftlab/model.hpp"
#include "aftlab/task.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace aftlab {

enum class LossKind {
  VFT,
  AFT_DC,
  AFT_BC,
  AFT_RBC,
  RDC1,
  RDC2,
  R_UNCONSTRAINED,
  A_UNCONSTRAINED,
  RRHF,
  PRO,
  DPO,
};

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

// Binary kinds consume a (G_P, G_N) partition; ranking kinds consume a
// quality-ordered sequence. VFT consumes neither.
bool is_binary_kind(LossKind kind);
bool is_ranking_kind(LossKind kind);

struct LossSpec {
  LossKind kind = LossKind::VFT;
  double beta_boundary = 0.15;  // boundary constraint beta
  bool rrhf_constraint = false;
  double rrhf_scale = 1.0;      // RRHF gradient-weight scaling factor
  bool pro_constraint = false;
  bool pro_use_tau = true;      // false removes PRO's dynamic temperature
  double dpo_beta = 0.1;
  double vft_weight = 1.0;      // fixed 1.0; exposed as a knob only

  std::string label() const;  // stable row label for reports
};

// One sampled COT inside a feedback group.
struct FeedbackMember {
  TokenSeq response;
  bool correct = false;
  double quality = 0.0;  // step-score in [0, 1]
  int gen_index = 0;
  double sampled_score = 0.0;             // s at sampling time (rank tie-break)
  std::optional<double> ref_score;        // frozen reference score (DPO)
};

// Rank-consistent scalar reward in [0, 1]: correct chains sit in the upper
// half, ordered by step score within each half.
double quality_reward(bool answer_correct, double step_score);

// Per-rank-position epsilon subtracted from PRO rewards to break ties.
inline constexpr double kProTieBreakEps = 1e-6;

// Binary partition or quality ranking for one question. In ranking mode the
// members are sorted best-first and `tiers` groups equal-quality members
// (tier 0 = best); strict pairs are pairs from different tiers.
struct FeedbackGroup {
  int question_index = -1;
  bool ranking_mode = false;
  std::vector<FeedbackMember> members;
  std::vector<int> tiers;
  bool usable = false;  // false = flagged (empty side / no strict pair); VFT-only downstream
  int dedup_removed = 0;

  int positives() const;
  int negatives() const;
};

// Sorts members, assigns tiers, and sets flags. Binary mode keeps generation
// order; ranking mode orders by (correct desc, quality desc, sampled score
// desc, gen index asc).
FeedbackGroup make_feedback_group(int question_index, bool ranking_mode,
                                  std::vector<FeedbackMember> members);

// --- score-level losses -------------------------------------------------------
// All take differentiable sequence scores s (scalars on one tape); nullopt is
// the skip signal (no usable pair), never an error.

// Negative token-summed log-likelihood of the reference response.
Value loss_vft(Value token_logp_sum);

std::optional<Value> loss_align_unconstrained(std::span<const Value> pos,
                                              std::span<const Value> neg);
std::optional<Value> loss_align_dc(std::span<const Value> pos, std::span<const Value> neg);
std::optional<Value> loss_align_bc(std::span<const Value> pos, std::span<const Value> neg,
                                   double beta);

struct RankedScore {
  Value s;
  int tier = 0;
  double reward = 0.0;
};

std::optional<Value> loss_align_rbc(std::span<const RankedScore> items, double beta);
std::optional<Value> loss_rdc1(std::span<const RankedScore> items);
std::optional<Value> loss_rdc2(std::span<const RankedScore> items);
std::optional<Value> loss_r_unconstrained(std::span<const RankedScore> items);
std::optional<Value> loss_rrhf(std::span<const RankedScore> items, double scale, bool constrained);
std::optional<Value> loss_pro(std::span<const RankedScore> items, bool use_tau, bool constrained);
std::optional<Value> loss_dpo(std::span<const RankedScore> items,
                              std::span<const double> ref_scores, double beta);

// --- batch objective ------------------------------------------------------------

struct BatchItem {
  const Problem* problem = nullptr;
  const TokenSeq* response = nullptr;       // null: the problem's reference response
  const FeedbackGroup* feedback = nullptr;  // null or unusable: VFT term only
};

struct TotalLoss {
  Value value;
  int align_applied = 0;
  int align_skipped = 0;
};

// VFT term plus the selected alignment term, summed over the batch.
TotalLoss total_loss(const BoundModel& model, std::span<const BatchItem> batch,
                     const LossSpec& spec);

}  // namespace aftlab
