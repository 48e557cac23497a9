#include "aftlab/pipeline.hpp"

#include "aftlab/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace aftlab {

using json = nlohmann::json;

namespace {

struct TrainRow {
  const Problem* problem = nullptr;
  const TokenSeq* response = nullptr;  // null: reference response
  const FeedbackGroup* feedback = nullptr;
};

struct TrainState {
  ModelParams params;
  std::vector<Matrix> velocity;
  std::mt19937_64 rng;
  std::uint64_t step = 0;
};

std::vector<Matrix*> param_ptrs(ModelParams& p) {
  std::vector<Matrix*> out;
  p.for_each([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<Matrix> zero_velocity(const ModelParams& p) {
  std::vector<Matrix> out;
  p.for_each([&](const std::string&, const Matrix& m) { out.push_back(Matrix::Zero(m.rows(), m.cols())); });
  return out;
}

std::string serialize_rng(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

std::mt19937_64 deserialize_rng(const std::string& state) {
  std::mt19937_64 rng;
  if (!state.empty()) {
    std::istringstream ss(state);
    ss >> rng;
    if (ss.fail()) throw std::runtime_error("checkpoint rng state failed to parse");
  }
  return rng;
}

Checkpoint to_checkpoint(const TrainState& state, std::uint64_t fingerprint) {
  Checkpoint c;
  c.params = state.params;
  c.velocity = state.velocity;
  c.step = state.step;
  c.rng_state = serialize_rng(state.rng);
  c.config_fingerprint = fingerprint;
  return c;
}

TrainState from_checkpoint(const Checkpoint& ckpt) {
  TrainState s;
  s.params = ckpt.params;
  s.velocity = ckpt.velocity.empty() ? zero_velocity(ckpt.params) : ckpt.velocity;
  s.rng = deserialize_rng(ckpt.rng_state);
  s.step = ckpt.step;
  return s;
}

std::uint64_t stage_fingerprint(const ModelConfig& mcfg, const TrainConfig& cfg,
                                const std::string& stage) {
  json j = {{"stage", stage},
            {"layers", mcfg.layers},
            {"hidden_dim", mcfg.hidden_dim},
            {"heads", mcfg.heads},
            {"context_len", mcfg.context_len},
            {"model_seed", mcfg.seed},
            {"epochs", cfg.epochs},
            {"learning_rate", cfg.learning_rate},
            {"momentum", cfg.momentum},
            {"batch_size", cfg.batch_size},
            {"seed", cfg.seed}};
  return fnv1a(j.dump());
}

struct StepInfo {
  double loss = 0.0;
  long tokens = 0;
  int align_applied = 0;
  int align_skipped = 0;
};

StepInfo sgd_step(TrainState& state, std::span<const TrainRow> batch, const LossSpec& spec,
                  const TrainConfig& cfg) {
  StepInfo info;
  Tape tape;
  BoundModel bound(tape, state.params, /*requires_grad=*/true);
  std::vector<BatchItem> items;
  items.reserve(batch.size());
  for (const TrainRow& row : batch) {
    items.push_back({row.problem, row.response, row.feedback});
    const TokenSeq& r = row.response ? *row.response : row.problem->reference_response;
    info.tokens += static_cast<long>(r.size());
  }
  TotalLoss loss = total_loss(bound, items, spec);
  info.loss = loss.value.item();
  info.align_applied = loss.align_applied;
  info.align_skipped = loss.align_skipped;
  if (!std::isfinite(info.loss))
    throw std::runtime_error("training diverged: non-finite loss at step " +
                             std::to_string(state.step));
  tape.backward(loss.value);

  std::vector<Matrix> grads;
  grads.reserve(bound.bound_count());
  for (std::size_t i = 0; i < bound.bound_count(); ++i) grads.push_back(bound.grad(i));

  if (cfg.grad_clip) {
    double sq = 0.0;
    for (const Matrix& g : grads) sq += g.squaredNorm();
    double norm = std::sqrt(sq);
    if (norm > *cfg.grad_clip && norm > 0.0) {
      double scale = *cfg.grad_clip / norm;
      for (Matrix& g : grads) g *= scale;
    }
  }

  std::vector<Matrix*> params = param_ptrs(state.params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.velocity[i] = cfg.momentum * state.velocity[i] + grads[i];
    *params[i] -= cfg.learning_rate * state.velocity[i];
  }
  ++state.step;
  return info;
}

// Mean MLE nats per response token over a holdout set.
double eval_valid_loss(const ModelParams& params, const std::vector<Problem>& valid, int workers) {
  if (valid.empty()) return 0.0;
  std::vector<double> logp(valid.size());
  std::vector<long> tokens(valid.size());
  parallel_for(valid.size(), workers, [&](std::size_t i) {
    SequenceScore s = score_sequence(params, valid[i].question_tokens, valid[i].reference_response);
    logp[i] = s.value * s.token_count;
    tokens[i] = s.token_count;
  });
  double lp = 0.0;
  long tk = 0;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    lp += logp[i];
    tk += tokens[i];
  }
  return -lp / static_cast<double>(tk);
}

struct LoopResult {
  std::vector<EpochStat> history;
  std::vector<Checkpoint> snapshots;
  TrainState final_state;
  TrainState best_state;
  int best_epoch = 0;
};

LoopResult train_loop(const std::vector<TrainRow>& rows, const std::vector<Problem>& valid,
                      TrainState state, const LossSpec& spec, const TrainConfig& cfg,
                      bool select_best, const std::vector<int>& snapshot_epochs,
                      std::uint64_t fingerprint) {
  if (rows.empty()) throw std::invalid_argument("training needs a non-empty dataset");
  LoopResult out;
  out.best_state = state;
  out.best_epoch = 0;
  double best_valid = std::numeric_limits<double>::infinity();
  int stale = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)  // Fisher-Yates on the shuffle stream
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng_int(state.rng, 0, static_cast<int>(i) - 1))]);

    EpochStat stat;
    stat.epoch = epoch;
    double loss_sum = 0.0;
    long token_sum = 0;
    std::size_t at = 0;
    while (at < order.size()) {
      std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                               order.size() - at);
      std::vector<TrainRow> batch;
      batch.reserve(take);
      for (std::size_t i = 0; i < take; ++i) batch.push_back(rows[order[at + i]]);
      at += take;
      StepInfo info;
      try {
        info = sgd_step(state, batch, spec, cfg);
      } catch (const AutodiffError& e) {
        throw std::runtime_error("training diverged at step " + std::to_string(state.step) + ": " +
                                 e.what());
      }
      loss_sum += info.loss;
      token_sum += info.tokens;
      stat.align_applied += info.align_applied;
      stat.align_skipped += info.align_skipped;
    }
    stat.train_loss = token_sum > 0 ? loss_sum / static_cast<double>(token_sum) : 0.0;
    stat.valid_loss = eval_valid_loss(state.params, valid, cfg.workers);
    out.history.push_back(stat);

    if (std::find(snapshot_epochs.begin(), snapshot_epochs.end(), epoch) != snapshot_epochs.end())
      out.snapshots.push_back(to_checkpoint(state, fingerprint));

    if (select_best && !valid.empty()) {
      if (stat.valid_loss < best_valid) {
        best_valid = stat.valid_loss;
        out.best_state = state;
        out.best_epoch = epoch;
        stale = 0;
      } else if (++stale >= cfg.patience && cfg.patience > 0) {
        break;  // validation loss plateaued
      }
    }
  }
  if (!select_best || valid.empty()) {
    out.best_state = state;
    out.best_epoch = out.history.empty() ? 0 : out.history.back().epoch;
  }
  out.final_state = std::move(state);
  return out;
}

std::vector<TrainRow> reference_rows(const std::vector<Problem>& train) {
  std::vector<TrainRow> rows;
  rows.reserve(train.size());
  for (const Problem& p : train) rows.push_back({&p, nullptr, nullptr});
  return rows;
}

}  // namespace

bool params_equal(const ModelParams& a, const ModelParams& b) {
  bool equal = true;
  std::vector<const Matrix*> av, bv;
  a.for_each([&](const std::string&, const Matrix& m) { av.push_back(&m); });
  b.for_each([&](const std::string&, const Matrix& m) { bv.push_back(&m); });
  if (av.size() != bv.size()) return false;
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i]->rows() != bv[i]->rows() || av[i]->cols() != bv[i]->cols()) return false;
    if (av[i]->size() > 0 && std::memcmp(av[i]->data(), bv[i]->data(),
                                         sizeof(double) * static_cast<std::size_t>(av[i]->size())) != 0)
      equal = false;
  }
  return equal;
}

VftResult train_vft(const std::vector<Problem>& train, const std::vector<Problem>& valid,
                    const ModelConfig& mcfg, const TrainConfig& cfg,
                    const std::vector<int>& snapshot_epochs) {
  if (train.empty()) throw std::invalid_argument("train_vft: empty dataset");
  TrainState state;
  state.params = ModelParams::init(mcfg, Vocabulary::standard().size());
  state.velocity = zero_velocity(state.params);
  state.rng.seed(mix_seed(cfg.seed, "train-shuffle", 0));
  std::uint64_t fp = stage_fingerprint(mcfg, cfg, "vft");

  LossSpec spec;
  spec.kind = LossKind::VFT;
  LoopResult loop = train_loop(reference_rows(train), valid, std::move(state), spec, cfg,
                               /*select_best=*/true, snapshot_epochs, fp);
  VftResult out;
  out.checkpoint = to_checkpoint(loop.best_state, fp);
  out.history = std::move(loop.history);
  out.snapshots = std::move(loop.snapshots);
  out.best_epoch = loop.best_epoch;
  return out;
}

FeedbackResult build_feedback(const Checkpoint& ckpt, const std::vector<Problem>& questions,
                              const SamplingConfig& scfg, bool ranking_mode, int workers) {
  if (scfg.k < 1) throw std::invalid_argument("build_feedback: k must be >= 1");
  FeedbackResult out;
  out.groups.resize(questions.size());
  struct QStat {
    int dedup = 0;
    int truncated = 0;
  };
  std::vector<QStat> qstats(questions.size());

  parallel_for(questions.size(), workers, [&](std::size_t qi) {
    std::mt19937_64 rng(mix_seed(scfg.seed, "feedback", qi));
    std::vector<FeedbackMember> members;
    std::vector<TokenSeq> seen;
    for (int g = 0; g < scfg.k; ++g) {
      SampleResult s = sample_cot(ckpt.params, questions[qi].question_tokens, scfg.temperature,
                                  rng, scfg.max_len);
      if (s.truncated) ++qstats[qi].truncated;
      if (scfg.dedup) {
        bool dup = false;
        for (const TokenSeq& t : seen)
          if (t == s.tokens) {
            dup = true;
            break;
          }
        if (dup) {
          ++qstats[qi].dedup;
          continue;
        }
        seen.push_back(s.tokens);
      }
      FeedbackMember m;
      m.correct = check_answer(questions[qi], s.tokens);
      m.quality = rate_quality(questions[qi], s.tokens).score;
      m.gen_index = g;
      m.sampled_score = s.score;
      m.response = std::move(s.tokens);
      members.push_back(std::move(m));
    }
    FeedbackGroup group = make_feedback_group(static_cast<int>(qi), ranking_mode, std::move(members));
    group.dedup_removed = qstats[qi].dedup;
    out.groups[qi] = std::move(group);
  });

  out.stats.questions = static_cast<int>(questions.size());
  out.stats.samples = static_cast<int>(questions.size()) * scfg.k;
  for (std::size_t qi = 0; qi < questions.size(); ++qi) {
    const FeedbackGroup& g = out.groups[qi];
    out.stats.dedup_removed += qstats[qi].dedup;
    out.stats.truncated += qstats[qi].truncated;
    if (g.positives() == 0) ++out.stats.empty_pos;
    if (g.negatives() == 0) ++out.stats.empty_neg;
    if (!g.usable) ++out.stats.unusable;
  }
  return out;
}

std::string feedback_to_jsonl(const FeedbackResult& feedback, bool ranking_mode) {
  std::string out;
  for (const FeedbackGroup& g : feedback.groups) {
    json members = json::array();
    for (const FeedbackMember& m : g.members) {
      json row = {{"tokens", m.response},
                  {"correct", m.correct},
                  {"quality", m.quality},
                  {"gen_index", m.gen_index},
                  {"score", m.sampled_score}};
      if (m.ref_score) row["ref_score"] = *m.ref_score;
      members.push_back(std::move(row));
    }
    json line = {{"question_index", g.question_index},
                 {"ranking", ranking_mode},
                 {"dedup_removed", g.dedup_removed},
                 {"members", std::move(members)}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

FeedbackResult feedback_from_jsonl(const std::string& jsonl) {
  FeedbackResult out;
  std::istringstream ss(jsonl);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    json row = json::parse(line);
    std::vector<FeedbackMember> members;
    for (const json& jm : row.at("members")) {
      FeedbackMember m;
      m.response = jm.at("tokens").get<TokenSeq>();
      m.correct = jm.at("correct").get<bool>();
      m.quality = jm.at("quality").get<double>();
      m.gen_index = jm.at("gen_index").get<int>();
      m.sampled_score = jm.at("score").get<double>();
      if (jm.contains("ref_score")) m.ref_score = jm.at("ref_score").get<double>();
      members.push_back(std::move(m));
    }
    FeedbackGroup g = make_feedback_group(row.at("question_index").get<int>(),
                                          row.at("ranking").get<bool>(), std::move(members));
    g.dedup_removed = row.at("dedup_removed").get<int>();
    out.groups.push_back(std::move(g));
  }
  out.stats.questions = static_cast<int>(out.groups.size());
  for (const FeedbackGroup& g : out.groups) {
    out.stats.samples += static_cast<int>(g.members.size()) + g.dedup_removed;
    out.stats.dedup_removed += g.dedup_removed;
    if (g.positives() == 0) ++out.stats.empty_pos;
    if (g.negatives() == 0) ++out.stats.empty_neg;
    if (!g.usable) ++out.stats.unusable;
  }
  return out;
}

AftResult train_aft(const Checkpoint& start, const std::vector<Problem>& train,
                    const std::vector<Problem>& valid, const std::vector<FeedbackGroup>& feedback,
                    const LossSpec& spec, const TrainConfig& cfg) {
  if (feedback.size() != train.size())
    throw std::invalid_argument("train_aft: feedback groups (" + std::to_string(feedback.size()) +
                                ") must align with training questions (" +
                                std::to_string(train.size()) + ")");

  // DPO scores its members against the frozen starting model exactly once.
  std::vector<FeedbackGroup> groups = feedback;
  if (spec.kind == LossKind::DPO) {
    for (FeedbackGroup& g : groups)
      for (FeedbackMember& m : g.members)
        m.ref_score = score_sequence(start.params,
                                     train[static_cast<std::size_t>(g.question_index)].question_tokens,
                                     m.response)
                          .value;
  }

  std::vector<TrainRow> rows;
  rows.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) rows.push_back({&train[i], nullptr, &groups[i]});

  TrainState state = from_checkpoint(start);
  std::uint64_t fp = stage_fingerprint(state.params.config, cfg, "aft:" + spec.label());
  LoopResult loop = train_loop(rows, valid, std::move(state), spec, cfg,
                               /*select_best=*/false, {}, fp);
  AftResult out;
  out.checkpoint = to_checkpoint(loop.final_state, fp);
  out.history = std::move(loop.history);
  return out;
}

RftResult train_rft(const std::vector<Problem>& train, const std::vector<Problem>& valid,
                    const std::vector<FeedbackGroup>& feedback, const ModelConfig& mcfg,
                    const TrainConfig& cfg) {
  if (feedback.size() != train.size())
    throw std::invalid_argument("train_rft: feedback groups must align with training questions");

  // Augmented rows own their response storage for the duration of training.
  std::vector<TokenSeq> positives;
  std::vector<int> positive_question;
  for (std::size_t i = 0; i < train.size(); ++i) {
    std::vector<TokenSeq> kept;
    for (const FeedbackMember& m : feedback[i].members) {
      if (!m.correct) continue;
      if (m.response == train[i].reference_response) continue;  // dedup against reference
      if (std::find(kept.begin(), kept.end(), m.response) != kept.end()) continue;
      kept.push_back(m.response);
    }
    for (TokenSeq& t : kept) {
      positives.push_back(std::move(t));
      positive_question.push_back(static_cast<int>(i));
    }
  }

  std::vector<TrainRow> rows = reference_rows(train);
  for (std::size_t j = 0; j < positives.size(); ++j)
    rows.push_back({&train[static_cast<std::size_t>(positive_question[j])], &positives[j], nullptr});

  TrainState state;
  state.params = ModelParams::init(mcfg, Vocabulary::standard().size());
  state.velocity = zero_velocity(state.params);
  state.rng.seed(mix_seed(cfg.seed, "train-shuffle", 0));
  std::uint64_t fp = stage_fingerprint(mcfg, cfg, "rft");

  LossSpec spec;
  spec.kind = LossKind::VFT;
  LoopResult loop = train_loop(rows, valid, std::move(state), spec, cfg,
                               /*select_best=*/true, {}, fp);
  RftResult out;
  out.checkpoint = to_checkpoint(loop.best_state, fp);
  out.history = std::move(loop.history);
  out.augmented_rows = static_cast<int>(rows.size());
  return out;
}

ProbeSamples sample_probe_sets(const ModelParams& params, const std::vector<Problem>& questions,
                               const ProbeConfig& pcfg, const std::vector<FeedbackGroup>* avoid,
                               int workers) {
  if (avoid && avoid->size() != questions.size())
    throw std::invalid_argument("sample_probe_sets: avoid groups must align with questions");
  std::vector<std::optional<ProbeSet>> slots(questions.size());
  parallel_for(questions.size(), workers, [&](std::size_t qi) {
    std::mt19937_64 rng(mix_seed(pcfg.seed, "probe", qi));
    ProbeSet set;
    set.question_index = static_cast<int>(qi);
    for (int attempt = 0; attempt < pcfg.budget; ++attempt) {
      if (static_cast<int>(set.positives.size()) >= pcfg.n_pos &&
          static_cast<int>(set.negatives.size()) >= pcfg.n_neg)
        break;
      SampleResult s =
          sample_cot(params, questions[qi].question_tokens, pcfg.temperature, rng, pcfg.max_len);
      if (avoid) {
        bool overlap = false;
        for (const FeedbackMember& m : (*avoid)[qi].members)
          if (m.response == s.tokens) {
            overlap = true;
            break;
          }
        if (overlap) continue;  // probes must stay distinct from training COTs
      }
      bool correct = check_answer(questions[qi], s.tokens);
      if (correct && static_cast<int>(set.positives.size()) < pcfg.n_pos)
        set.positives.push_back(std::move(s.tokens));
      else if (!correct && static_cast<int>(set.negatives.size()) < pcfg.n_neg)
        set.negatives.push_back(std::move(s.tokens));
    }
    if (static_cast<int>(set.positives.size()) == pcfg.n_pos &&
        static_cast<int>(set.negatives.size()) == pcfg.n_neg)
      slots[qi] = std::move(set);
  });
  ProbeSamples out;
  for (std::optional<ProbeSet>& s : slots) {
    if (s)
      out.sets.push_back(std::move(*s));
    else
      ++out.excluded;
  }
  return out;
}

PilotReport run_pilot(const Checkpoint& ckpt, const std::vector<Problem>& probe_questions,
                      const std::vector<Problem>& test_set, const ProbeConfig& pcfg, int max_len,
                      int workers) {
  ProbeSamples probes = sample_probe_sets(ckpt.params, probe_questions, pcfg, nullptr, workers);
  if (probes.sets.empty())
    throw std::runtime_error("pilot: sampling budget exhausted for every question");
  PilotReport report;
  report.questions_complete = static_cast<int>(probes.sets.size());
  report.questions_excluded = probes.excluded;
  report.a_accuracy = eval_a_accuracy(ckpt.params, probe_questions, probes.sets, workers,
                                      pcfg.n_pos, pcfg.n_neg);
  report.t_accuracy = eval_t_accuracy(ckpt.params, test_set, max_len, workers);
  return report;
}

// --- checkpoint io ----------------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json header;
  header["magic"] = "aftlab-checkpoint";
  header["version"] = 1;
  header["model"] = {{"layers", ckpt.params.config.layers},
                     {"hidden_dim", ckpt.params.config.hidden_dim},
                     {"heads", ckpt.params.config.heads},
                     {"context_len", ckpt.params.config.context_len},
                     {"seed", ckpt.params.config.seed}};
  header["vocab_size"] = ckpt.params.vocab_size;
  header["step"] = ckpt.step;
  header["rng_state"] = ckpt.rng_state;
  header["config_fingerprint"] = ckpt.config_fingerprint;

  json tensors = json::array();
  std::vector<const Matrix*> blobs;
  ckpt.params.for_each([&](const std::string& name, const Matrix& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    blobs.push_back(&m);
  });
  std::size_t vi = 0;
  ckpt.params.for_each([&](const std::string& name, const Matrix& m) {
    if (vi < ckpt.velocity.size()) {
      const Matrix& v = ckpt.velocity[vi];
      if (v.rows() != m.rows() || v.cols() != m.cols())
        throw std::runtime_error("checkpoint velocity shape mismatch at " + name);
      tensors.push_back({{"name", "velocity." + name}, {"rows", v.rows()}, {"cols", v.cols()}});
      blobs.push_back(&ckpt.velocity[vi]);
    }
    ++vi;
  });
  header["tensors"] = std::move(tensors);

  std::string head = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  std::uint64_t len = head.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));  // little-endian host
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const Matrix* m : blobs)
    out.write(reinterpret_cast<const char*>(m->data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m->size())));
  if (!out) throw std::runtime_error("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string head(len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  json header = json::parse(head);
  if (header.at("magic") != "aftlab-checkpoint")
    throw std::runtime_error("not a checkpoint file: " + path);

  ModelConfig mcfg;
  mcfg.layers = header.at("model").at("layers").get<int>();
  mcfg.hidden_dim = header.at("model").at("hidden_dim").get<int>();
  mcfg.heads = header.at("model").at("heads").get<int>();
  mcfg.context_len = header.at("model").at("context_len").get<int>();
  mcfg.seed = header.at("model").at("seed").get<std::uint64_t>();

  Checkpoint ckpt;
  ckpt.params = ModelParams::zeros(mcfg, header.at("vocab_size").get<int>());
  ckpt.step = header.at("step").get<std::uint64_t>();
  ckpt.rng_state = header.at("rng_state").get<std::string>();
  ckpt.config_fingerprint = header.at("config_fingerprint").get<std::uint64_t>();

  std::map<std::string, Matrix*> slots;
  ckpt.params.for_each([&](const std::string& name, Matrix& m) { slots[name] = &m; });
  ckpt.velocity = zero_velocity(ckpt.params);
  std::size_t vi = 0;
  ckpt.params.for_each([&](const std::string& name, Matrix&) {
    slots["velocity." + name] = &ckpt.velocity[vi++];
  });

  for (const json& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    auto it = slots.find(name);
    if (it == slots.end()) throw std::runtime_error("checkpoint tensor unknown to this build: " + name);
    Matrix& m = *it->second;
    if (m.rows() != t.at("rows").get<Eigen::Index>() || m.cols() != t.at("cols").get<Eigen::Index>())
      throw std::runtime_error("checkpoint tensor shape mismatch: " + name);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
  }
  if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
  return ckpt;
}

}  // namespace aftlab
