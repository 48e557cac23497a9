#include "aftlab/model.hpp"

#include "aftlab/util.hpp"

#include <cmath>
#include <stdexcept>

namespace aftlab {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kNormEps = 1e-6;
constexpr double kMaskedScore = -1e9;

// Box-Muller on explicit 53-bit uniforms; std::normal_distribution is
// implementation-defined and would tie checkpoints to one standard library.
class Gaussian {
 public:
  explicit Gaussian(std::uint64_t seed) : rng_(seed) {}
  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = rng_uniform(rng_);
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 rng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

ModelParams make_shapes(const ModelConfig& config, int vocab_size) {
  if (config.layers <= 0 || config.hidden_dim <= 0 || config.heads <= 0 || config.context_len <= 0)
    throw std::invalid_argument("model config: all dimensions must be positive");
  if (config.hidden_dim % config.heads != 0)
    throw std::invalid_argument("model config: hidden_dim must be divisible by heads");
  if (vocab_size <= 0) throw std::invalid_argument("model config: vocab_size must be positive");
  int d = config.hidden_dim;
  int dh = d / config.heads;
  ModelParams p;
  p.config = config;
  p.vocab_size = vocab_size;
  p.tok_embed = Matrix::Zero(vocab_size, d);
  p.pos_embed = Matrix::Zero(config.context_len, d);
  p.layers.resize(static_cast<std::size_t>(config.layers));
  for (auto& layer : p.layers) {
    layer.wq.assign(static_cast<std::size_t>(config.heads), Matrix::Zero(d, dh));
    layer.wk.assign(static_cast<std::size_t>(config.heads), Matrix::Zero(d, dh));
    layer.wv.assign(static_cast<std::size_t>(config.heads), Matrix::Zero(d, dh));
    layer.wo = Matrix::Zero(d, d);
    layer.w1 = Matrix::Zero(d, 4 * d);
    layer.w2 = Matrix::Zero(4 * d, d);
    layer.attn_gain = Matrix::Ones(1, d);
    layer.mlp_gain = Matrix::Ones(1, d);
  }
  p.final_gain = Matrix::Ones(1, d);
  p.lm_head = Matrix::Zero(d, vocab_size);
  return p;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, int vocab_size) {
  ModelParams p = make_shapes(config, vocab_size);
  Gaussian g(mix_seed(config.seed, "model-init", 0));
  p.for_each([&](const std::string& name, Matrix& m) {
    if (name.find("gain") != std::string::npos) return;  // gains stay at 1
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = kInitStd * g.next();
  });
  return p;
}

ModelParams ModelParams::zeros(const ModelConfig& config, int vocab_size) {
  ModelParams p = make_shapes(config, vocab_size);
  p.final_gain.setOnes();
  for (auto& layer : p.layers) {
    layer.attn_gain.setOnes();
    layer.mlp_gain.setOnes();
  }
  return p;
}

void ModelParams::for_each(const std::function<void(const std::string&, Matrix&)>& fn) {
  fn("tok_embed", tok_embed);
  fn("pos_embed", pos_embed);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::string prefix = "layer" + std::to_string(l) + ".";
    LayerParams& layer = layers[l];
    for (std::size_t h = 0; h < layer.wq.size(); ++h) fn(prefix + "wq" + std::to_string(h), layer.wq[h]);
    for (std::size_t h = 0; h < layer.wk.size(); ++h) fn(prefix + "wk" + std::to_string(h), layer.wk[h]);
    for (std::size_t h = 0; h < layer.wv.size(); ++h) fn(prefix + "wv" + std::to_string(h), layer.wv[h]);
    fn(prefix + "wo", layer.wo);
    fn(prefix + "w1", layer.w1);
    fn(prefix + "w2", layer.w2);
    fn(prefix + "attn_gain", layer.attn_gain);
    fn(prefix + "mlp_gain", layer.mlp_gain);
  }
  fn("final_gain", final_gain);
  fn("lm_head", lm_head);
}

void ModelParams::for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  const_cast<ModelParams*>(this)->for_each(
      [&](const std::string& name, Matrix& m) { fn(name, static_cast<const Matrix&>(m)); });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

// --- differentiable forward ---------------------------------------------------

BoundModel::BoundModel(Tape& tape, const ModelParams& params, bool requires_grad)
    : tape_(&tape), config_(params.config), vocab_size_(params.vocab_size) {
  auto bind = [&](const Matrix& m) {
    Value v = tape.leaf(m, requires_grad);
    bound_.push_back(v);
    return v;
  };
  // Must mirror ModelParams::for_each order exactly.
  tok_embed_ = bind(params.tok_embed);
  pos_embed_ = bind(params.pos_embed);
  layers_.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& src = params.layers[l];
    BoundLayer& dst = layers_[l];
    for (const Matrix& m : src.wq) dst.wq.push_back(bind(m));
    for (const Matrix& m : src.wk) dst.wk.push_back(bind(m));
    for (const Matrix& m : src.wv) dst.wv.push_back(bind(m));
    dst.wo = bind(src.wo);
    dst.w1 = bind(src.w1);
    dst.w2 = bind(src.w2);
    dst.attn_gain = bind(src.attn_gain);
    dst.mlp_gain = bind(src.mlp_gain);
  }
  final_gain_ = bind(params.final_gain);
  lm_head_ = bind(params.lm_head);
}

Matrix BoundModel::grad(std::size_t param_index) const {
  return tape_->grad(bound_.at(param_index));
}

namespace {

Value rmsnorm(Value x, Value gain) {
  Value ms = mean_rows(mul(x, x));
  Value inv = exp(mul(log(add(ms, kNormEps)), -0.5));
  return scale_cols(scale_rows(x, inv), gain);
}

Matrix causal_mask(int t) {
  Matrix m = Matrix::Zero(t, t);
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) m(i, j) = kMaskedScore;
  return m;
}

std::vector<int> iota(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

}  // namespace

Value BoundModel::logits(const TokenSeq& tokens) const {
  int t = static_cast<int>(tokens.size());
  if (t == 0) throw std::invalid_argument("logits: empty token sequence");
  if (t > config_.context_len)
    throw std::invalid_argument("logits: sequence length " + std::to_string(t) +
                                " exceeds context_len " + std::to_string(config_.context_len));
  for (int id : tokens)
    if (id < 0 || id >= vocab_size_)
      throw std::invalid_argument("logits: token id " + std::to_string(id) + " outside vocabulary");

  Tape& tape = *tape_;
  double scale = 1.0 / std::sqrt(static_cast<double>(config_.hidden_dim / config_.heads));
  Value x = add(gather_rows(tok_embed_, tokens), gather_rows(pos_embed_, iota(t)));
  Value mask = tape.constant(causal_mask(t));

  for (const BoundLayer& layer : layers_) {
    Value h = rmsnorm(x, layer.attn_gain);
    std::vector<Value> head_outs;
    head_outs.reserve(layer.wq.size());
    for (std::size_t k = 0; k < layer.wq.size(); ++k) {
      Value q = matmul(h, layer.wq[k]);
      Value key = matmul(h, layer.wk[k]);
      Value v = matmul(h, layer.wv[k]);
      Value scores = add(mul(matmul(q, transpose(key)), scale), mask);
      head_outs.push_back(matmul(softmax_rows(scores), v));
    }
    x = add(x, matmul(concat_cols(head_outs), layer.wo));
    Value m = rmsnorm(x, layer.mlp_gain);
    x = add(x, matmul(relu(matmul(m, layer.w1)), layer.w2));
  }
  return matmul(rmsnorm(x, final_gain_), lm_head_);
}

ScoreGraph score_sequence_graph(const BoundModel& model, const TokenSeq& question,
                                const TokenSeq& response) {
  if (response.empty()) throw std::invalid_argument("score_sequence: empty COT/response");
  const Vocabulary& vocab = Vocabulary::standard();
  int qn = static_cast<int>(question.size());
  int rn = static_cast<int>(response.size());
  if (qn + rn > model.config().context_len)
    throw std::invalid_argument("score_sequence: question (" + std::to_string(qn) +
                                ") + response (" + std::to_string(rn) + ") exceeds context_len " +
                                std::to_string(model.config().context_len));

  TokenSeq full;
  full.reserve(static_cast<std::size_t>(1 + qn + rn));
  full.push_back(vocab.bos());
  full.insert(full.end(), question.begin(), question.end());
  full.insert(full.end(), response.begin(), response.end());

  TokenSeq inputs(full.begin(), full.end() - 1);
  std::vector<int> targets(full.begin() + 1, full.end());

  Value logit_rows = model.logits(inputs);
  Value token_logp = sub(take_per_row(logit_rows, targets), logsumexp_rows(logit_rows));

  std::vector<int> span;
  span.reserve(static_cast<std::size_t>(rn));
  for (int i = qn; i < qn + rn; ++i) span.push_back(i);

  ScoreGraph out;
  out.token_count = rn;
  out.sum = sum_all(gather_rows(token_logp, span));
  out.average = mul(out.sum, 1.0 / static_cast<double>(rn));
  return out;
}

SequenceScore score_sequence(const ModelParams& params, const TokenSeq& question,
                             const TokenSeq& response) {
  Tape tape;
  BoundModel model(tape, params, /*requires_grad=*/false);
  ScoreGraph g = score_sequence_graph(model, question, response);
  return {g.average.item(), g.token_count};
}

double perplexity(const ModelParams& params, const TokenSeq& question, const TokenSeq& response) {
  return std::exp(-score_sequence(params, question, response).value);
}

// --- plain forward (sampling path) ----------------------------------------------

namespace {

Matrix rmsnorm_ng(const Matrix& x, const Matrix& gain) {
  Eigen::ArrayXd ms = x.array().square().rowwise().mean();
  Eigen::ArrayXd inv = ((ms + kNormEps).log() * -0.5).exp();
  Matrix scaled = x.array().colwise() * inv;
  return scaled.array().rowwise() * gain.row(0).array();
}

Matrix softmax_rows_ng(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::ArrayXd e = (m.row(i).array() - m.row(i).maxCoeff()).exp();
    out.row(i) = (e / e.sum()).matrix().transpose();
  }
  return out;
}

}  // namespace

Matrix forward_logits_nograd(const ModelParams& params, const TokenSeq& tokens) {
  int t = static_cast<int>(tokens.size());
  if (t == 0) throw std::invalid_argument("forward: empty token sequence");
  if (t > params.config.context_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(t) +
                                " exceeds context_len " + std::to_string(params.config.context_len));
  int d = params.config.hidden_dim;
  double scale = 1.0 / std::sqrt(static_cast<double>(d / params.config.heads));

  Matrix x(t, d);
  for (int i = 0; i < t; ++i)
    x.row(i) = params.tok_embed.row(tokens[static_cast<std::size_t>(i)]) + params.pos_embed.row(i);
  Matrix mask = causal_mask(t);

  for (const LayerParams& layer : params.layers) {
    Matrix h = rmsnorm_ng(x, layer.attn_gain);
    Matrix attn(t, d);
    int dh = d / params.config.heads;
    for (std::size_t k = 0; k < layer.wq.size(); ++k) {
      Matrix q = h * layer.wq[k];
      Matrix key = h * layer.wk[k];
      Matrix v = h * layer.wv[k];
      Matrix scores = (q * key.transpose()) * scale + mask;
      attn.middleCols(static_cast<Eigen::Index>(k) * dh, dh) = softmax_rows_ng(scores) * v;
    }
    x += attn * layer.wo;
    Matrix m = rmsnorm_ng(x, layer.mlp_gain);
    x += (m * layer.w1).cwiseMax(0.0) * layer.w2;
  }
  return rmsnorm_ng(x, params.final_gain) * params.lm_head;
}

SampleResult sample_cot(const ModelParams& params, const TokenSeq& question, double temperature,
                        std::mt19937_64& rng, int max_len) {
  if (temperature < 0.0) throw std::invalid_argument("sample_cot: temperature must be >= 0");
  if (max_len <= 0) throw std::invalid_argument("sample_cot: max_len must be positive");
  const Vocabulary& vocab = Vocabulary::standard();

  TokenSeq prefix;
  prefix.reserve(question.size() + 1 + static_cast<std::size_t>(max_len));
  prefix.push_back(vocab.bos());
  prefix.insert(prefix.end(), question.begin(), question.end());
  if (static_cast<int>(prefix.size()) >= params.config.context_len)
    throw std::invalid_argument("sample_cot: question alone fills the context window");

  SampleResult result;
  double logp_sum = 0.0;
  for (int step = 0; step < max_len; ++step) {
    if (static_cast<int>(prefix.size()) >= params.config.context_len) {
      result.truncated = true;  // context exhausted before <eos>
      break;
    }
    Matrix logits = forward_logits_nograd(params, prefix);
    Eigen::RowVectorXd row = logits.row(logits.rows() - 1);

    int choice;
    if (temperature == 0.0) {
      Eigen::Index j;
      row.maxCoeff(&j);  // first max = lowest token id on ties
      choice = static_cast<int>(j);
    } else {
      Eigen::ArrayXd z = row.array() / temperature;
      Eigen::ArrayXd p = (z - z.maxCoeff()).exp();
      p /= p.sum();
      double u = rng_uniform(rng);
      double cum = 0.0;
      choice = static_cast<int>(p.size()) - 1;
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        cum += p(j);
        if (u < cum) {
          choice = static_cast<int>(j);
          break;
        }
      }
    }

    // score is always the temperature-1 log-likelihood of the chosen token
    double lse = row.maxCoeff() + std::log((row.array() - row.maxCoeff()).exp().sum());
    logp_sum += row(choice) - lse;

    prefix.push_back(choice);
    result.tokens.push_back(choice);
    if (choice == vocab.eos()) break;
    if (step == max_len - 1) result.truncated = true;
  }
  if (result.tokens.empty()) result.truncated = true;
  result.token_count = static_cast<int>(result.tokens.size());
  result.score = result.token_count > 0 ? logp_sum / result.token_count : 0.0;
  return result;
}

}  // namespace aftlab
