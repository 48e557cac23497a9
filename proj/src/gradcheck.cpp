#include "aftlab/gradcheck.hpp"

#include "aftlab/losses.hpp"
#include "aftlab/model.hpp"
#include "aftlab/task.hpp"
#include "aftlab/util.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace aftlab {

FdReport check_gradients(const FdForward& forward, std::vector<Matrix> params,
                         const std::vector<Matrix>& analytic, const FdOptions& opt) {
  if (params.size() != analytic.size())
    throw std::invalid_argument("check_gradients: parameter/gradient count mismatch");
  FdReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& m = params[p];
    const Matrix& ad = analytic[p];
    if (ad.rows() != m.rows() || ad.cols() != m.cols())
      throw std::invalid_argument("check_gradients: gradient shape mismatch at parameter " +
                                  std::to_string(p));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        double orig = m(i, j);
        m(i, j) = orig + opt.step;
        double fp = forward(params);
        m(i, j) = orig - opt.step;
        double fm = forward(params);
        m(i, j) = orig;
        double fd = (fp - fm) / (2.0 * opt.step);
        double a = ad(i, j);
        double diff = std::abs(a - fd);
        double scale = std::max(std::abs(a), std::abs(fd));
        ++report.entries;
        if (diff > opt.abs_floor && scale > 0.0)
          report.max_rel_err = std::max(report.max_rel_err, diff / scale);
        if (diff > std::max(opt.abs_floor, opt.rel_tol * scale)) {
          report.ok = false;
          report.issues.push_back(
              {static_cast<int>(p), static_cast<int>(i), static_cast<int>(j), a, fd});
        }
      }
    }
  }
  return report;
}

// --- loss suite -----------------------------------------------------------------
//
// The oracle side below evaluates each published formula in plain long-double
// arithmetic with every detached quantity frozen at the instance's base point,
// which is exactly the function whose derivative the backward pass claims to
// compute.

namespace {

double l1pse(const std::vector<long double>& xs) {  // log(1 + sum exp(x))
  long double mx = 0.0L;
  for (long double x : xs) mx = std::max(mx, x);
  long double s = std::exp(-mx);
  for (long double x : xs) s += std::exp(x - mx);
  return static_cast<double>(mx + std::log(s));
}

struct Instance {
  // binary view
  int n_pos = 0;
  int n_neg = 0;
  // ranking view
  std::vector<int> tiers;
  std::vector<double> rewards;
  std::vector<double> refs;
  // shared base scores: binary instances store positives first
  std::vector<double> base;
};

Instance random_instance(std::mt19937_64& rng) {
  Instance inst;
  inst.n_pos = rng_int(rng, 1, 3);
  inst.n_neg = rng_int(rng, 1, 3);
  int k = inst.n_pos + inst.n_neg;
  int tier = 0;
  for (int i = 0; i < k; ++i) {
    if (i > 0 && rng_uniform(rng) > 0.3) ++tier;  // occasional quality ties
    inst.tiers.push_back(tier);
    inst.rewards.push_back(1.0 - 0.2 * tier);
    inst.refs.push_back(-0.1 - 2.9 * rng_uniform(rng));
    inst.base.push_back(-0.05 - 3.95 * rng_uniform(rng));
  }
  // ranking needs at least one strict pair; force one if everything tied
  if (inst.tiers.back() == 0) {
    inst.tiers.back() = 1;
    inst.rewards.back() = 0.8;
  }
  return inst;
}

using OracleFn = std::function<double(const std::vector<Matrix>&, const Instance&)>;
using GraphFn = std::function<Value(Tape&, const std::vector<Value>&, const Instance&)>;

std::vector<RankedScore> as_ranked(const std::vector<Value>& scores, const Instance& inst) {
  std::vector<RankedScore> items;
  for (std::size_t i = 0; i < scores.size(); ++i)
    items.push_back({scores[i], inst.tiers[i], inst.rewards[i]});
  return items;
}

SuiteCase run_case(const std::string& name, const GraphFn& graph, const OracleFn& oracle,
                   const Instance& inst, const FdOptions& opt) {
  std::vector<Matrix> params;
  for (double s : inst.base) params.push_back(Matrix::Constant(1, 1, s));

  Tape tape;
  std::vector<Value> leaves;
  for (const Matrix& m : params) leaves.push_back(tape.leaf(m, true));
  Value loss = graph(tape, leaves, inst);
  tape.backward(loss);
  std::vector<Matrix> grads;
  for (const Value& v : leaves) grads.push_back(tape.grad(v));

  SuiteCase c;
  c.name = name;
  c.forward_gap = std::abs(loss.item() - oracle(params, inst));
  c.fd = check_gradients([&](const std::vector<Matrix>& ps) { return oracle(ps, inst); }, params,
                         grads, opt);
  c.ok = c.fd.ok && c.forward_gap < 1e-10;
  return c;
}

}  // namespace

SuiteResult run_loss_fd_suite(int instances, std::uint64_t seed, const FdOptions& opt) {
  auto t0 = std::chrono::steady_clock::now();
  SuiteResult result;
  std::mt19937_64 rng(mix_seed(seed, "loss-fd", 0));
  const double beta = 0.15;
  const double rrhf_scale = 0.7;
  const double dpo_beta = 0.1;

  auto val = [](const Matrix& m) { return m(0, 0); };
  auto pos_of = [](const std::vector<Matrix>& ps, const Instance& inst) {
    std::vector<double> out;
    for (int i = 0; i < inst.n_pos; ++i) out.push_back(ps[i](0, 0));
    return out;
  };
  auto neg_of = [](const std::vector<Matrix>& ps, const Instance& inst) {
    std::vector<double> out;
    for (std::size_t i = inst.n_pos; i < ps.size(); ++i) out.push_back(ps[i](0, 0));
    return out;
  };

  struct Def {
    std::string name;
    GraphFn graph;
    OracleFn oracle;
  };
  std::vector<Def> defs;

  defs.push_back({"vft",
                  [](Tape&, const std::vector<Value>& s, const Instance&) {
                    std::vector<Value> parts(s.begin(), s.end());
                    return loss_vft(sum_all(concat_rows(parts)));
                  },
                  [&](const std::vector<Matrix>& ps, const Instance&) {
                    long double sum = 0.0L;
                    for (const Matrix& m : ps) sum += val(m);
                    return static_cast<double>(-sum);
                  }});

  defs.push_back({"align_unconstrained",
                  [](Tape&, const std::vector<Value>& s, const Instance& inst) {
                    std::vector<Value> pos(s.begin(), s.begin() + inst.n_pos);
                    std::vector<Value> neg(s.begin() + inst.n_pos, s.end());
                    return *loss_align_unconstrained(pos, neg);
                  },
                  [&](const std::vector<Matrix>& ps, const Instance& inst) {
                    std::vector<long double> xs;
                    for (double p : pos_of(ps, inst))
                      for (double n : neg_of(ps, inst)) xs.push_back(n - p);
                    return l1pse(xs);
                  }});

  defs.push_back({"align_dc",
                  [](Tape&, const std::vector<Value>& s, const Instance& inst) {
                    std::vector<Value> pos(s.begin(), s.begin() + inst.n_pos);
                    std::vector<Value> neg(s.begin() + inst.n_pos, s.end());
                    return *loss_align_dc(pos, neg);
                  },
                  [&](const std::vector<Matrix>& ps, const Instance& inst) {
                    // negatives frozen at the base point (detached)
                    std::vector<long double> xs;
                    for (double p : pos_of(ps, inst))
                      for (std::size_t j = 0; j < neg_of(ps, inst).size(); ++j)
                        xs.push_back(inst.base[inst.n_pos + j] - p);
                    return l1pse(xs);
                  }});

  defs.push_back({"align_bc",
                  [&](Tape&, const std::vector<Value>& s, const Instance& inst) {
                    std::vector<Value> pos(s.begin(), s.begin() + inst.n_pos);
                    std::vector<Value> neg(s.begin() + inst.n_pos, s.end());
                    return *loss_align_bc(pos, neg, beta);
                  },
                  [&](const std::vector<Matrix>& ps, const Instance& inst) {
                    double sp_star = inst.base[0];
                    for (int i = 1; i < inst.n_pos; ++i) sp_star = std::min(sp_star, inst.base[i]);
                    std::vector<long double> xs;
                    std::vector<double> pos = pos_of(ps, inst), neg = neg_of(ps, inst);
                    for (int i = 0; i < inst.n_pos; ++i) {
                      double t_p = 2.0 * sp_star - 2.0 * beta - inst.base[i];
                      for (double n : neg) {
                        xs.push_back(n - pos[static_cast<std::size_t>(i)]);
                        xs.push_back(t_p - n);
                      }
                    }
                    return l1pse(xs);
                  }});

  auto strict_pairs = [](const Instance& inst) {
    std::vector<std::pair<int, int>> out;
    int k = static_cast<int>(inst.tiers.size());
    for (int i = 0; i < k; ++i)
      for (int j = i + 1; j < k; ++j)
        if (inst.tiers[i] < inst.tiers[j]) out.emplace_back(i, j);
    return out;
  };

  defs.push_back({"align_rbc",
                  [&](Tape&, const std::vector<Value>& s, const Instance& inst) {
                    return *loss_align_rbc(as_ranked(s, inst), beta);
                  },
                  [&](const std::vector<Matrix>& ps, const Instance& inst) {
                    std::vector<long double> xs;
                    for (auto [i, j] : strict_pairs(inst)) {
                      double sj_star = std::numeric_limits<double>::infinity();
                      for (std::size_t k = 0; k < inst.tiers.size(); ++k)
                        if (inst.tiers[k] < inst.tiers[static_cast<std::size_t>(j)])
                          sj_star = std::min(sj_star, inst.base[k]);
                      xs.push_back(val(ps[j]) - val(ps[i]));
                      xs.push_back(2.0 * sj_star - 2.0 * beta - inst.base[static_cast<std::size_t>(i)] -
                                   val(ps[j]));
                    }
                    return l1pse(xs);
                  }});

  defs.push_back({"rdc1",
                  [](Tape&, const std::vector<Value>& s, const Instance& inst) {
                    return *loss_rdc1(as_ranked(s, inst));
                  },
                  [&](const std::vector<Matrix>& ps, const Instance& inst) {
                    std::vector<long double> xs;
                    for (auto [i, j] : strict_pairs(inst))
                      xs.push_back(inst.base[static_cast<std::size_t>(j)] - val(ps[i]));
                    return l1pse(xs);
                  }});

  defs.push_back({"rdc2",
                  [](Tape&, const std::vector<Value>& s, const Instance& inst) {
                    return *loss_rdc2(as_ranked(s, inst));
                  },
                  [&](const std::vector<Matrix>& ps, const Instance& inst) {
                    int max_tier = 0;
                    for (int t : inst.tiers) max_tier = std::max(max_tier, t);
                    std::vector<long double> xs;
                    for (auto [i, j] : strict_pairs(inst)) {
                      bool in_cmin = inst.tiers[static_cast<std::size_t>(j)] == max_tier;
                      xs.push_back((in_cmin ? inst.base[static_cast<std::size_t>(j)] : val(ps[j])) -
                                   val(ps[i]));
                    }
                    return l1pse(xs);
                  }});

  defs.push_back({"r_unconstrained",
                  [](Tape&, const std::vector<Value>& s, const Instance& inst) {
                    return *loss_r_unconstrained(as_ranked(s, inst));
                  },
                  [&](const std::vector<Matrix>& ps, const Instance& inst) {
                    std::vector<long double> xs;
                    for (auto [i, j] : strict_pairs(inst)) xs.push_back(val(ps[j]) - val(ps[i]));
                    return l1pse(xs);
                  }});

  for (bool constrained : {false, true}) {
    std::string name = constrained ? "rrhf_dc" : "rrhf";
    defs.push_back({name,
                    [&, constrained](Tape&, const std::vector<Value>& s, const Instance& inst) {
                      return *loss_rrhf(as_ranked(s, inst), rrhf_scale, constrained);
                    },
                    [&, constrained](const std::vector<Matrix>& ps, const Instance& inst) {
                      long double sum = 0.0L;
                      for (auto [i, j] : strict_pairs(inst)) {
                        double worse =
                            constrained ? inst.base[static_cast<std::size_t>(j)] : val(ps[j]);
                        sum += std::max(0.0, worse - val(ps[i]));
                      }
                      return static_cast<double>(rrhf_scale * sum);
                    }});
  }

  for (int variant = 0; variant < 3; ++variant) {
    bool use_tau = variant != 1;
    bool constrained = variant == 2;
    std::string name = variant == 0 ? "pro" : (variant == 1 ? "pro_no_tau" : "pro_dc");
    defs.push_back({name,
                    [use_tau, constrained](Tape&, const std::vector<Value>& s, const Instance& inst) {
                      return *loss_pro(as_ranked(s, inst), use_tau, constrained);
                    },
                    [&, use_tau, constrained](const std::vector<Matrix>& ps, const Instance& inst) {
                      std::size_t k = ps.size();
                      std::vector<double> r(k);
                      for (std::size_t i = 0; i < k; ++i)
                        r[i] = inst.rewards[i] - kProTieBreakEps * static_cast<double>(i);
                      long double total = 0.0L;
                      for (std::size_t i = 0; i + 1 < k; ++i) {
                        double tau_max = use_tau ? r[i] - r[k - 1] : 1.0;
                        std::vector<long double> xs;
                        for (std::size_t j = i + 1; j < k; ++j) {
                          double tau = use_tau ? r[i] - r[j] : 1.0;
                          double worse = constrained ? inst.base[j] : val(ps[j]);
                          xs.push_back(tau * worse - tau_max * val(ps[i]));
                        }
                        total += l1pse(xs);
                      }
                      return static_cast<double>(total);
                    }});
  }

  defs.push_back({"dpo",
                  [&](Tape&, const std::vector<Value>& s, const Instance& inst) {
                    return *loss_dpo(as_ranked(s, inst), inst.refs, dpo_beta);
                  },
                  [&](const std::vector<Matrix>& ps, const Instance& inst) {
                    long double total = 0.0L;
                    std::size_t k = ps.size();
                    for (std::size_t i = 0; i < k; ++i) {
                      std::vector<long double> xs;
                      for (std::size_t j = i + 1; j < k; ++j) {
                        if (inst.tiers[i] >= inst.tiers[j]) continue;
                        xs.push_back(dpo_beta * ((val(ps[j]) - inst.refs[j]) -
                                                 (val(ps[i]) - inst.refs[i])));
                      }
                      if (!xs.empty()) total += l1pse(xs);
                    }
                    return static_cast<double>(total);
                  }});

  for (const Def& def : defs) {
    for (int n = 0; n < instances; ++n) {
      Instance inst = random_instance(rng);
      SuiteCase c = run_case(def.name + "#" + std::to_string(n), def.graph, def.oracle, inst, opt);
      result.ok = result.ok && c.ok;
      result.cases.push_back(std::move(c));
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

SuiteResult run_model_fd_suite(std::uint64_t seed, const FdOptions& opt) {
  auto t0 = std::chrono::steady_clock::now();
  SuiteResult result;

  ModelConfig micro;
  micro.layers = 1;
  micro.hidden_dim = 8;
  micro.heads = 2;
  micro.context_len = 32;
  micro.seed = mix_seed(seed, "model-fd", 0);
  const Vocabulary& vocab = Vocabulary::standard();
  ModelParams base = ModelParams::init(micro, vocab.size());

  Problem problem = make_problem(7, {{'+', 4}, {'*', 3}}, 100);
  // one synthetic positive (the reference) and one wrong-answer negative
  FeedbackMember pos;
  pos.response = problem.reference_response;
  pos.correct = true;
  pos.quality = 1.0;
  FeedbackMember neg = pos;
  neg.correct = false;
  neg.quality = 0.0;
  neg.gen_index = 1;
  neg.response[neg.response.size() - 2] = vocab.digit(9);  // corrupt final answer digit
  FeedbackGroup group = make_feedback_group(0, /*ranking=*/false, {pos, neg});

  auto run_total = [&](const LossSpec& spec, const std::string& name) {
    std::vector<Matrix> params;
    base.for_each([&](const std::string&, Matrix& m) { params.push_back(m); });

    auto rebuild = [&](const std::vector<Matrix>& ps) {
      ModelParams p = base;
      std::size_t k = 0;
      p.for_each([&](const std::string&, Matrix& m) { m = ps[k++]; });
      return p;
    };
    auto forward = [&](const std::vector<Matrix>& ps) {
      ModelParams p = rebuild(ps);
      Tape tape;
      BoundModel bound(tape, p, false);
      BatchItem item{&problem, nullptr, &group};
      return total_loss(bound, std::span<const BatchItem>(&item, 1), spec).value.item();
    };

    Tape tape;
    BoundModel bound(tape, base, true);
    BatchItem item{&problem, nullptr, &group};
    TotalLoss loss = total_loss(bound, std::span<const BatchItem>(&item, 1), spec);
    tape.backward(loss.value);
    std::vector<Matrix> grads;
    for (std::size_t i = 0; i < bound.bound_count(); ++i) grads.push_back(bound.grad(i));

    SuiteCase c;
    c.name = name;
    c.fd = check_gradients(forward, params, grads, opt);
    c.forward_gap = 0.0;
    c.ok = c.fd.ok;
    result.ok = result.ok && c.ok;
    result.cases.push_back(std::move(c));
  };

  // Both objectives are detach-free, so the real forward is the legal
  // function to difference.
  LossSpec vft;
  vft.kind = LossKind::VFT;
  run_total(vft, "model_vft");
  LossSpec align;
  align.kind = LossKind::A_UNCONSTRAINED;
  run_total(align, "model_align_unconstrained");

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace aftlab
