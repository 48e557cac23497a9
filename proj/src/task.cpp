#include "aftlab/task.hpp"

#include "aftlab/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace aftlab {

using json = nlohmann::json;

// --- vocabulary ----------------------------------------------------------------

Vocabulary::Vocabulary() {
  symbols_ = {"<pad>", "<bos>", "<eos>", "Q:", "A:", "#", "=", ";", "+", "-", "*",
              "0",     "1",     "2",     "3",  "4",  "5", "6", "7", "8", "9"};
  for (int i = 0; i < static_cast<int>(symbols_.size()); ++i) ids_[symbols_[i]] = i;
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v;
  return v;
}

int Vocabulary::op_token(char op) const {
  switch (op) {
    case '+': return plus();
    case '-': return minus();
    case '*': return times();
    default: throw std::invalid_argument(std::string("unknown operator: ") + op);
  }
}

char Vocabulary::op_char(int id) const {
  if (id == plus()) return '+';
  if (id == minus()) return '-';
  if (id == times()) return '*';
  throw std::invalid_argument("token " + std::to_string(id) + " is not an operator");
}

const std::string& Vocabulary::symbol(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range: " + std::to_string(id));
  return symbols_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& symbol) const {
  auto it = ids_.find(symbol);
  if (it == ids_.end()) throw std::invalid_argument("unknown token symbol: '" + symbol + "'");
  return it->second;
}

std::string Vocabulary::render(const TokenSeq& tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += symbol(tokens[i]);
  }
  return out;
}

TokenSeq Vocabulary::parse(const std::string& text) const {
  TokenSeq out;
  std::istringstream ss(text);
  std::string sym;
  while (ss >> sym) out.push_back(id(sym));
  return out;
}

TokenSeq Vocabulary::digits_of(int n) const {
  if (n < 0) throw std::invalid_argument("digits_of: negative value " + std::to_string(n));
  std::string s = std::to_string(n);
  TokenSeq out;
  out.reserve(s.size());
  for (char c : s) out.push_back(digit(c - '0'));
  return out;
}

// --- problem construction ----------------------------------------------------------

namespace {

int apply_step(int value, const Step& s, int modulus) {
  long long v = value;
  switch (s.op) {
    case '+': v = v + s.operand; break;
    case '-': v = v - s.operand; break;
    case '*': v = v * s.operand; break;
    default: throw std::invalid_argument(std::string("unknown operator: ") + s.op);
  }
  long long m = modulus;
  return static_cast<int>(((v % m) + m) % m);
}

void append(TokenSeq& out, const TokenSeq& part) { out.insert(out.end(), part.begin(), part.end()); }

std::string problem_key(int start, const std::vector<Step>& steps) {
  std::string k = std::to_string(start);
  for (const Step& s : steps) {
    k += '|';
    k += s.op;
    k += std::to_string(s.operand);
  }
  return k;
}

Problem random_problem(std::mt19937_64& rng, const TaskConfig& config) {
  int L = rng_int(rng, config.min_steps, config.max_steps);
  int start = rng_int(rng, 0, config.modulus - 1);
  std::vector<Step> steps;
  steps.reserve(static_cast<std::size_t>(L));
  static const char ops[3] = {'+', '-', '*'};
  for (int i = 0; i < L; ++i) {
    char op = ops[rng_int(rng, 0, 2)];
    int operand = rng_int(rng, 1, 9);
    steps.push_back({op, operand});
  }
  return make_problem(start, std::move(steps), config.modulus);
}

double problem_space_size(const TaskConfig& config) {
  double total = 0.0;
  for (int L = config.min_steps; L <= config.max_steps; ++L) {
    double per_len = config.modulus;
    for (int i = 0; i < L; ++i) per_len *= 27.0;  // 3 ops x 9 operands
    total += per_len;
  }
  return total;
}

}  // namespace

std::vector<int> oracle_values(const Problem& p) {
  std::vector<int> values;
  values.reserve(p.steps.size());
  int v = p.start;
  for (const Step& s : p.steps) {
    v = apply_step(v, s, p.modulus);
    values.push_back(v);
  }
  return values;
}

Problem make_problem(int start, std::vector<Step> steps, int modulus) {
  if (modulus < 2) throw std::invalid_argument("modulus must be >= 2");
  if (steps.empty()) throw std::invalid_argument("problem needs at least one step");
  Problem p;
  p.start = start;
  p.steps = std::move(steps);
  p.modulus = modulus;

  const Vocabulary& vocab = Vocabulary::standard();
  std::vector<int> values = oracle_values(p);
  p.answer = values.back();

  TokenSeq q;
  q.push_back(vocab.q_marker());
  append(q, vocab.digits_of(p.start));
  for (const Step& s : p.steps) {
    q.push_back(vocab.op_token(s.op));
    append(q, vocab.digits_of(s.operand));
  }
  q.push_back(vocab.a_marker());
  p.question_tokens = std::move(q);
  p.question_text = vocab.render(p.question_tokens);

  TokenSeq r;
  int prev = p.start;
  for (std::size_t i = 0; i < p.steps.size(); ++i) {
    append(r, vocab.digits_of(prev));
    r.push_back(vocab.op_token(p.steps[i].op));
    append(r, vocab.digits_of(p.steps[i].operand));
    r.push_back(vocab.equals());
    append(r, vocab.digits_of(values[i]));
    r.push_back(vocab.step_sep());
    prev = values[i];
  }
  r.push_back(vocab.answer_marker());
  append(r, vocab.digits_of(p.answer));
  p.reference_cot = vocab.render(r);
  r.push_back(vocab.eos());
  p.reference_response = std::move(r);
  return p;
}

std::vector<Problem> generate_dataset(int n, std::uint64_t seed, const TaskConfig& config) {
  if (n <= 0) throw std::invalid_argument("generate_dataset: n must be positive");
  if (static_cast<double>(n) > problem_space_size(config))
    throw std::invalid_argument("generate_dataset: requested " + std::to_string(n) +
                                " unique problems but the problem space is smaller");
  std::mt19937_64 rng(seed);
  std::vector<Problem> out;
  out.reserve(static_cast<std::size_t>(n));
  std::unordered_set<std::string> seen;
  long long attempts = 0, cap = 100LL * n + 10000;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > cap)
      throw std::runtime_error("generate_dataset: rejection sampling exhausted its attempt budget");
    Problem p = random_problem(rng, config);
    if (!seen.insert(problem_key(p.start, p.steps)).second) continue;
    out.push_back(std::move(p));
  }
  return out;
}

DatasetSplits generate_splits(const TaskConfig& config, int n_train, int n_valid, int n_test,
                              std::uint64_t seed) {
  double space = problem_space_size(config);
  if (static_cast<double>(n_train) + n_valid + n_test > space)
    throw std::invalid_argument("generate_splits: requested more unique problems than the space holds");
  std::unordered_set<std::string> seen;
  auto fill = [&](int n, std::uint64_t stream) {
    std::mt19937_64 rng(mix_seed(seed, "split", stream));
    std::vector<Problem> out;
    out.reserve(static_cast<std::size_t>(n));
    long long attempts = 0, cap = 100LL * n + 10000;
    while (static_cast<int>(out.size()) < n) {
      if (++attempts > cap)
        throw std::runtime_error("generate_splits: rejection sampling exhausted its attempt budget");
      Problem p = random_problem(rng, config);
      if (!seen.insert(problem_key(p.start, p.steps)).second) continue;
      out.push_back(std::move(p));
    }
    return out;
  };
  DatasetSplits splits;
  splits.train = fill(n_train, 0);
  splits.valid = fill(n_valid, 1);
  splits.test = fill(n_test, 2);
  return splits;
}

// --- response parsing -----------------------------------------------------------------

namespace {

const int kMaxAnswerDigits = 9;

// Parses a maximal digit run starting at i; advances i past it.
std::optional<int> parse_number(const TokenSeq& tokens, std::size_t& i) {
  const Vocabulary& vocab = Vocabulary::standard();
  if (i >= tokens.size() || !vocab.is_digit(tokens[i])) return std::nullopt;
  long long v = 0;
  int digits = 0;
  while (i < tokens.size() && vocab.is_digit(tokens[i])) {
    if (++digits > kMaxAnswerDigits) return std::nullopt;
    v = v * 10 + vocab.digit_value(tokens[i]);
    ++i;
  }
  return static_cast<int>(v);
}

bool is_op(int id) {
  const Vocabulary& vocab = Vocabulary::standard();
  return id == vocab.plus() || id == vocab.minus() || id == vocab.times();
}

}  // namespace

std::optional<int> extract_answer(const TokenSeq& response) {
  const Vocabulary& vocab = Vocabulary::standard();
  for (std::size_t i = 0; i < response.size(); ++i) {
    if (response[i] != vocab.answer_marker()) continue;
    std::size_t j = i + 1;
    return parse_number(response, j);  // nullopt when no digits follow
  }
  return std::nullopt;
}

bool check_answer(const Problem& p, const TokenSeq& response) {
  std::optional<int> ans = extract_answer(response);
  return ans.has_value() && *ans == p.answer;
}

std::vector<std::optional<int>> parse_step_values(const TokenSeq& response) {
  const Vocabulary& vocab = Vocabulary::standard();
  std::vector<std::optional<int>> out;
  std::size_t i = 0;
  while (i < response.size()) {
    // collect one segment up to ';' (exclusive)
    std::size_t end = i;
    while (end < response.size() && response[end] != vocab.step_sep()) ++end;
    // the answer segment terminates step parsing
    bool is_answer_segment = false;
    for (std::size_t k = i; k < end; ++k)
      if (response[k] == vocab.answer_marker()) is_answer_segment = true;
    if (is_answer_segment) break;
    if (end == i) {  // empty segment (stray ';')
      out.push_back(std::nullopt);
      i = end + 1;
      continue;
    }
    // expect: <a> <op> <b> = <v>, nothing else
    std::size_t j = i;
    std::optional<int> value;
    std::optional<int> a = parse_number(response, j);
    if (a && j < end && is_op(response[j])) {
      ++j;
      std::optional<int> b = parse_number(response, j);
      if (b && j < end && response[j] == vocab.equals()) {
        ++j;
        std::optional<int> v = parse_number(response, j);
        if (v && j == end) value = v;
      }
    }
    out.push_back(value);
    i = (end < response.size()) ? end + 1 : end;
  }
  return out;
}

QualityRating rate_quality(const Problem& p, const TokenSeq& response) {
  QualityRating r;
  r.total_steps = static_cast<int>(p.steps.size());
  r.answer_correct = check_answer(p, response);
  std::vector<int> oracle = oracle_values(p);
  std::vector<std::optional<int>> stated = parse_step_values(response);
  for (std::size_t i = 0; i < oracle.size() && i < stated.size(); ++i)
    if (stated[i] && *stated[i] == oracle[i]) ++r.correct_steps;
  r.score = r.total_steps > 0 ? static_cast<double>(r.correct_steps) / r.total_steps : 0.0;
  return r;
}

Problem parse_question(const std::string& question_text, int modulus) {
  const Vocabulary& vocab = Vocabulary::standard();
  TokenSeq tokens = vocab.parse(question_text);
  std::size_t i = 0;
  auto fail = [&]() -> std::runtime_error {
    return std::runtime_error("malformed question text: '" + question_text + "'");
  };
  if (i >= tokens.size() || tokens[i] != vocab.q_marker()) throw fail();
  ++i;
  std::optional<int> start = parse_number(tokens, i);
  if (!start) throw fail();
  std::vector<Step> steps;
  while (i < tokens.size() && tokens[i] != vocab.a_marker()) {
    if (!is_op(tokens[i])) throw fail();
    char op = vocab.op_char(tokens[i]);
    ++i;
    std::optional<int> operand = parse_number(tokens, i);
    if (!operand) throw fail();
    steps.push_back({op, *operand});
  }
  if (i != tokens.size() - 1 || tokens[i] != vocab.a_marker() || steps.empty()) throw fail();
  return make_problem(*start, std::move(steps), modulus);
}

std::string dataset_to_jsonl(const std::vector<Problem>& problems, std::uint64_t seed,
                             const std::string& split) {
  std::string out;
  for (const Problem& p : problems) {
    json row = {{"question", p.question_text},
                {"cot", p.reference_cot},
                {"answer", p.answer},
                {"seed", seed},
                {"split", split}};
    out += row.dump();
    out += '\n';
  }
  return out;
}

std::vector<Problem> dataset_from_jsonl(const std::string& jsonl, int modulus) {
  std::vector<Problem> out;
  std::istringstream ss(jsonl);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    json row = json::parse(line);
    Problem p = parse_question(row.at("question").get<std::string>(), modulus);
    if (p.answer != row.at("answer").get<int>())
      throw std::runtime_error("dataset row answer disagrees with replay for question: " +
                               row.at("question").get<std::string>());
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace aftlab
