// Tiny decoder-only autoregressive model with differentiable token
// log-probabilities. Pre-norm blocks with RMSNorm, per-head attention
// projections, relu MLP, no biases. Reference configuration: 2 layers,
// hidden 64, 4 heads, learned positional embeddings, context 96.
#pragma once

#include "aftlab/autodiff.hpp"
#include "aftlab/vocab.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace aftlab {

struct ModelConfig {
  int layers = 2;
  int hidden_dim = 64;
  int heads = 4;
  int context_len = 96;
  std::uint64_t seed = 0;
};

struct LayerParams {
  std::vector<Matrix> wq, wk, wv;  // per head: hidden x head_dim
  Matrix wo;                       // hidden x hidden
  Matrix w1, w2;                   // hidden x 4*hidden, 4*hidden x hidden
  Matrix attn_gain, mlp_gain;      // 1 x hidden
};

struct ModelParams {
  ModelConfig config;
  int vocab_size = 0;
  Matrix tok_embed;  // vocab x hidden
  Matrix pos_embed;  // context x hidden
  std::vector<LayerParams> layers;
  Matrix final_gain;  // 1 x hidden
  Matrix lm_head;     // hidden x vocab

  // Scaled-normal init (std 0.02), gains at 1; deterministic in config.seed.
  static ModelParams init(const ModelConfig& config, int vocab_size);
  // All-zero weights: exactly uniform logits. Used by tests and oracles.
  static ModelParams zeros(const ModelConfig& config, int vocab_size);

  // Fixed iteration order; this order defines checkpoint layout and the
  // optimizer's accumulation order.
  void for_each(const std::function<void(const std::string&, Matrix&)>& fn);
  void for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const;
  std::size_t parameter_count() const;
};

// Model parameters bound to a tape as leaves, one graph per tape.
class BoundModel {
 public:
  BoundModel(Tape& tape, const ModelParams& params, bool requires_grad);

  // Causal logits for every position of `tokens` (T x vocab). T must fit the
  // context window.
  Value logits(const TokenSeq& tokens) const;

  // Gradient of a parameter after backward(), in ModelParams::for_each order.
  Matrix grad(std::size_t param_index) const;
  std::size_t bound_count() const { return bound_.size(); }
  const ModelConfig& config() const { return config_; }

 private:
  Tape* tape_;
  ModelConfig config_;
  int vocab_size_;
  std::vector<Value> bound_;  // for_each order
  // indices into bound_ for the structured pieces
  Value tok_embed_, pos_embed_, final_gain_, lm_head_;
  struct BoundLayer {
    std::vector<Value> wq, wk, wv;
    Value wo, w1, w2, attn_gain, mlp_gain;
  };
  std::vector<BoundLayer> layers_;
};

struct SequenceScore {
  double value = 0.0;   // token-averaged log-likelihood over the response span
  int token_count = 0;  // span length (response tokens incl. <eos>)
};

struct ScoreGraph {
  Value average;  // differentiable s
  Value sum;      // differentiable token-summed log-likelihood
  int token_count = 0;
};

// Differentiable token-averaged log-likelihood of `response` given `question`.
// The scored span covers exactly the response tokens; question tokens (and the
// <bos> framing token) are conditioning context only.
ScoreGraph score_sequence_graph(const BoundModel& model, const TokenSeq& question,
                                const TokenSeq& response);

// Convenience non-differentiable scoring on a local tape.
SequenceScore score_sequence(const ModelParams& params, const TokenSeq& question,
                             const TokenSeq& response);

double perplexity(const ModelParams& params, const TokenSeq& question, const TokenSeq& response);

struct SampleResult {
  TokenSeq tokens;         // generated response tokens; ends with <eos> unless truncated
  bool truncated = false;  // hit max_len before <eos>
  double score = 0.0;      // token-averaged log-likelihood of the generated span
  int token_count = 0;
};

// Ancestral sampling from softmax(logits / temperature); temperature 0 decodes
// greedily (argmax, ties to the lowest token id). Deterministic given rng state.
SampleResult sample_cot(const ModelParams& params, const TokenSeq& question, double temperature,
                        std::mt19937_64& rng, int max_len);

// Plain (non-tape) forward used by the sampling loop; exposed so tests can pin
// it against the differentiable path.
Matrix forward_logits_nograd(const ModelParams& params, const TokenSeq& tokens);

}  // namespace aftlab
