// The three-step training paradigm end to end: maximum-likelihood training,
// COT sampling into feedback groups, and alignment training on top of the
// resulting checkpoint; plus the rejection-sampling baseline and the pilot
// protocol.
#pragma once

#include "aftlab/losses.hpp"
#include "aftlab/metrics.hpp"
#include "aftlab/model.hpp"
#include "aftlab/task.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace aftlab {

struct TrainConfig {
  int epochs = 10;
  double learning_rate = 3e-3;
  double momentum = 0.9;
  int batch_size = 8;
  std::uint64_t seed = 0;
  std::optional<double> grad_clip;  // global-norm clip
  int patience = 3;                 // consecutive non-improving epochs before stopping; <=0 disables
  int workers = 1;                  // validation scoring only; training itself is sequential
};

struct SamplingConfig {
  int k = 6;
  double temperature = 1.0;
  int max_len = 56;
  bool dedup = true;
  std::uint64_t seed = 0;
};

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;  // nats per response token
  double valid_loss = 0.0;
  int align_applied = 0;
  int align_skipped = 0;
};

// Full resumable training state: reloading one of these and continuing
// reproduces an uninterrupted run bit for bit, so the optimizer velocity and
// the shuffle rng ride along with the weights.
struct Checkpoint {
  ModelParams params;
  std::vector<Matrix> velocity;  // per parameter, ModelParams::for_each order
  std::uint64_t step = 0;
  std::string rng_state;  // serialized shuffle rng
  std::uint64_t config_fingerprint = 0;
};

bool params_equal(const ModelParams& a, const ModelParams& b);

// Named-tensor file: little-endian u64 header length, JSON header, raw
// little-endian float64 tensor data in header order.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct VftResult {
  Checkpoint checkpoint;  // best-validation state (falls back to final when no valid set)
  std::vector<EpochStat> history;
  std::vector<Checkpoint> snapshots;  // at the requested epoch numbers, in order
  int best_epoch = 0;
};

// Minimizes the MLE objective on reference responses; returns the checkpoint
// with the best validation loss. Diverging (non-finite) loss is an error
// naming the step.
VftResult train_vft(const std::vector<Problem>& train, const std::vector<Problem>& valid,
                    const ModelConfig& mcfg, const TrainConfig& cfg,
                    const std::vector<int>& snapshot_epochs = {});

struct FeedbackStats {
  int questions = 0;
  int samples = 0;
  int dedup_removed = 0;
  int truncated = 0;
  int empty_pos = 0;  // questions with no correct sample
  int empty_neg = 0;  // questions with no incorrect sample
  int unusable = 0;   // flagged groups (contribute only the MLE term downstream)
};

struct FeedbackResult {
  std::vector<FeedbackGroup> groups;  // aligned with `questions` by index
  FeedbackStats stats;
};

// Step 2: sample k COTs per question from the checkpoint, deduplicate exact
// token duplicates, and partition (binary) or order (ranking). Pure function
// of (checkpoint, questions, config); per-question seed streams.
FeedbackResult build_feedback(const Checkpoint& ckpt, const std::vector<Problem>& questions,
                              const SamplingConfig& scfg, bool ranking_mode, int workers);

std::string feedback_to_jsonl(const FeedbackResult& feedback, bool ranking_mode);
FeedbackResult feedback_from_jsonl(const std::string& jsonl);

struct AftResult {
  Checkpoint checkpoint;  // final state (alignment runs for a fixed budget)
  std::vector<EpochStat> history;
};

// Step 3: continue from `start` minimizing the combined objective. Group
// membership stays fixed; scores are recomputed from current weights every
// step. For DPO the reference scores are computed once from `start`.
AftResult train_aft(const Checkpoint& start, const std::vector<Problem>& train,
                    const std::vector<Problem>& valid, const std::vector<FeedbackGroup>& feedback,
                    const LossSpec& spec, const TrainConfig& cfg);

struct RftResult {
  Checkpoint checkpoint;
  std::vector<EpochStat> history;
  int augmented_rows = 0;  // |original| + deduplicated positives
};

// Rejection-sampling baseline: MLE training on references plus deduplicated
// positive samples, starting over from the base initialization.
RftResult train_rft(const std::vector<Problem>& train, const std::vector<Problem>& valid,
                    const std::vector<FeedbackGroup>& feedback, const ModelConfig& mcfg,
                    const TrainConfig& cfg);

struct ProbeConfig {
  int n_pos = 3;
  int n_neg = 3;
  int budget = 64;  // sampling attempts per question before exclusion
  double temperature = 1.0;
  int max_len = 56;
  std::uint64_t seed = 0;
};

struct ProbeSamples {
  std::vector<ProbeSet> sets;  // only questions that completed the full set
  int excluded = 0;
};

// Samples until n_pos positive and n_neg negative COTs are found per question
// (within budget). When `avoid` is given, samples that exactly match that
// question's feedback members are discarded so probes stay distinct from
// training COTs.
ProbeSamples sample_probe_sets(const ModelParams& params, const std::vector<Problem>& questions,
                               const ProbeConfig& pcfg, const std::vector<FeedbackGroup>* avoid,
                               int workers);

struct PilotReport {
  double t_accuracy = 0.0;
  double a_accuracy = 0.0;
  int questions_complete = 0;
  int questions_excluded = 0;
};

// The pilot protocol for one checkpoint: self-sampled 3+3 probe sets on the
// training questions, assessment accuracy over them, task accuracy on the
// test set. Errors when no question completes a probe set.
PilotReport run_pilot(const Checkpoint& ckpt, const std::vector<Problem>& probe_questions,
                      const std::vector<Problem>& test_set, const ProbeConfig& pcfg, int max_len,
                      int workers);

}  // namespace aftlab
