#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cbfe/beliefs.hpp"
#include "cbfe/counting.hpp"
#include "cbfe/error.hpp"
#include "cbfe/model.hpp"
#include "cbfe/rng.hpp"

namespace cbfe {

/// Log-space messages for every incidence (a, i): factor-to-node m_{a->i} and
/// node-to-factor n_{i->a}. Each message is normalized (sum of exp == 1).
class MessageSet {
 public:
  MessageSet() = default;

  explicit MessageSet(const FactorGraph& g) {
    offset_.reserve(g.num_incidences() + 1);
    offset_.push_back(0);
    for (std::size_t a = 0; a < g.num_factors(); ++a)
      for (std::size_t v : g.scope(a)) offset_.push_back(offset_.back() + g.cardinality(v));
    to_node_.resize(offset_.back());
    to_factor_.resize(offset_.back());
    for (std::size_t a = 0; a < g.num_factors(); ++a)
      for (std::size_t k = 0; k < g.scope(a).size(); ++k) {
        const std::size_t e = g.incidence_id(a, k);
        const double u = -std::log(static_cast<double>(g.cardinality(g.scope(a)[k])));
        std::fill(to_node_.begin() + static_cast<std::ptrdiff_t>(offset_[e]),
                  to_node_.begin() + static_cast<std::ptrdiff_t>(offset_[e + 1]), u);
        std::fill(to_factor_.begin() + static_cast<std::ptrdiff_t>(offset_[e]),
                  to_factor_.begin() + static_cast<std::ptrdiff_t>(offset_[e + 1]), u);
      }
  }

  std::size_t num_incidences() const { return offset_.empty() ? 0 : offset_.size() - 1; }

  std::span<double> to_node(std::size_t e) { return {to_node_.data() + offset_[e], offset_[e + 1] - offset_[e]}; }
  std::span<const double> to_node(std::size_t e) const {
    return {to_node_.data() + offset_[e], offset_[e + 1] - offset_[e]};
  }
  std::span<double> to_factor(std::size_t e) {
    return {to_factor_.data() + offset_[e], offset_[e + 1] - offset_[e]};
  }
  std::span<const double> to_factor(std::size_t e) const {
    return {to_factor_.data() + offset_[e], offset_[e + 1] - offset_[e]};
  }

  /// Largest absolute difference over all entries of both directions.
  double max_abs_diff(const MessageSet& other) const {
    double d = 0.0;
    for (std::size_t k = 0; k < to_node_.size(); ++k) {
      d = std::max(d, std::abs(to_node_[k] - other.to_node_[k]));
      d = std::max(d, std::abs(to_factor_[k] - other.to_factor_[k]));
    }
    return d;
  }

  bool matches(const FactorGraph& g) const {
    return num_incidences() == g.num_incidences() && MessageSet(g).offset_ == offset_;
  }

 private:
  std::vector<std::size_t> offset_;
  std::vector<double> to_node_;
  std::vector<double> to_factor_;
};

enum class Schedule { sequential, synchronous };

struct PropagationOptions {
  double damping = 0.5;  // weight of the fresh update, in (0, 1]
  std::size_t max_iters = 10000;
  double tol = 1e-8;  // on the max absolute log-message change per sweep
  Schedule schedule = Schedule::sequential;
  std::uint64_t seed = 0;
  /// Standard deviation of seeded log-space noise added to the initial
  /// messages; 0 gives the uniform start.
  double init_noise = 0.0;
  /// Called after every sweep with the 1-based sweep index.
  std::function<void(std::size_t, const MessageSet&)> observer;
};

struct InferenceResult {
  BeliefSet beliefs;
  double log_partition_estimate = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  MessageSet messages;
};

struct EntropyVector {
  std::vector<double> node;
  std::vector<double> factor;
  std::vector<double> multi_information;  // I_a = sum_{i in a} H_i - H_a
};

// ---------------------------------------------------------------------------

/// True when some c_a is zero or some incident pair has c_a - q_i + 1 == 0,
/// where q_i = (1 - c_i) / d_i. The generalized message exponents are undefined there.
inline bool is_singular(const FactorGraph& g, const CountingNumbers& c, double eps = 1e-12) {
  c.check_shape(g);
  for (std::size_t a = 0; a < g.num_factors(); ++a) {
    if (std::abs(c.factor[a]) <= eps) return true;
    for (std::size_t v : g.scope(a)) {
      const double q = (1.0 - c.node[v]) / static_cast<double>(g.degree(v));
      if (std::abs(c.factor[a] - q + 1.0) <= eps) return true;
    }
  }
  return false;
}

namespace detail {

// Per-factor constants of the update rules.
struct FactorPlan {
  std::vector<std::size_t> strides;
  std::vector<double> scaled;  // theta_a / c_a
  std::vector<double> e_mm, e_mn;  // m <- m0^e_mm * n0^e_mn
  std::vector<double> e_nm, e_nn;  // n <- m0^e_nm * n0^e_nn
  bool coupled = false;            // some e_nm != 0, so n's update needs m0
};

class CountingBp {
 public:
  CountingBp(const FactorGraph& g, const LogPotentials& p, const CountingNumbers& c)
      : g_(g), p_(p) {
    p.validate(g);
    c.check_shape(g);
    plans_.resize(g.num_factors());
    for (std::size_t a = 0; a < g.num_factors(); ++a) {
      const double ca = c.factor[a];
      if (std::abs(ca) <= 1e-12)
        throw SingularCountingError("counting number of factor " + std::to_string(a) + " is zero");
      FactorPlan& fp = plans_[a];
      fp.strides = g.strides(a);
      fp.scaled = p.factor[a];
      for (double& v : fp.scaled) v /= ca;
      for (std::size_t v : g.scope(a)) {
        const double q = (1.0 - c.node[v]) / static_cast<double>(g.degree(v));
        const double den = ca - q + 1.0;
        if (std::abs(den) <= 1e-12)
          throw SingularCountingError("c_a - q_i + 1 = 0 at factor " + std::to_string(a) + ", variable " +
                                      std::to_string(v));
        fp.e_mm.push_back(ca / den);
        fp.e_mn.push_back((q - ca) / den);
        fp.e_nm.push_back((q - 1.0) / den);
        fp.e_nn.push_back(1.0 / den);
        if (fp.e_nm.back() != 0.0) fp.coupled = true;
      }
    }
    std::size_t max_card = 1;
    for (std::size_t k : g.cardinalities()) max_card = std::max(max_card, k);
    std::size_t max_table = 1;
    for (std::size_t a = 0; a < g.num_factors(); ++a) max_table = std::max(max_table, g.table_size(a));
    joint_.resize(max_table);
    upd_.resize(max_card);
  }

  // n0_{i->a}(x) = theta_i(x) + sum_{b ni i, b != a} m_{b->i}(x)
  void node_cavity(const MessageSet& msg, std::size_t a, std::size_t k, std::vector<double>& out) const {
    const std::size_t i = g_.scope(a)[k];
    out.assign(p_.node[i].begin(), p_.node[i].end());
    for (const auto& inc : g_.incidences(i)) {
      if (inc.factor == a) continue;
      const auto m = msg.to_node(g_.incidence_id(inc.factor, inc.position));
      for (std::size_t x = 0; x < out.size(); ++x) out[x] += m[x];
    }
  }

  // m0_{a->i}(x_i) = log sum_{x_a \ x_i} exp(theta_a / c_a + sum_{j != i} n_{j->a}(x_j)) for all positions.
  void factor_cavity(const MessageSet& msg, std::size_t a, std::vector<std::vector<double>>& out) {
    const Scope& s = g_.scope(a);
    const FactorPlan& fp = plans_[a];
    const std::size_t n = fp.scaled.size();
    for (std::size_t x = 0; x < n; ++x) {
      double v = fp.scaled[x];
      for (std::size_t k = 0; k < s.size(); ++k)
        v += msg.to_factor(g_.incidence_id(a, k))[(x / fp.strides[k]) % g_.cardinality(s[k])];
      joint_[x] = v;
    }
    out.resize(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      const std::size_t card = g_.cardinality(s[k]);
      const auto nk = msg.to_factor(g_.incidence_id(a, k));
      auto& o = out[k];
      o.assign(card, -std::numeric_limits<double>::infinity());
      for (std::size_t x = 0; x < n; ++x) {
        const std::size_t xk = (x / fp.strides[k]) % card;
        o[xk] = std::max(o[xk], joint_[x] - nk[xk]);
      }
      std::vector<double> acc(card, 0.0);
      for (std::size_t x = 0; x < n; ++x) {
        const std::size_t xk = (x / fp.strides[k]) % card;
        acc[xk] += std::exp(joint_[x] - nk[xk] - o[xk]);
      }
      for (std::size_t xk = 0; xk < card; ++xk) o[xk] += std::log(acc[xk]);
    }
  }

  // Damped, normalized write of `update` into `dst`; returns the max change.
  double write(std::span<double> dst, std::span<const double> update, double gamma, std::size_t sweep,
               std::size_t a, std::size_t k) {
    for (std::size_t x = 0; x < dst.size(); ++x) upd_[x] = (1.0 - gamma) * dst[x] + gamma * update[x];
    std::span<double> u(upd_.data(), dst.size());
    log_normalize(u);
    double d = 0.0;
    for (std::size_t x = 0; x < dst.size(); ++x) {
      if (!std::isfinite(u[x]))
        throw NumericalError("non-finite message at iteration " + std::to_string(sweep) + ", factor " +
                             std::to_string(a) + ", variable " + std::to_string(g_.scope(a)[k]));
      d = std::max(d, std::abs(u[x] - dst[x]));
      dst[x] = u[x];
    }
    return d;
  }

  // One factor update. Reads cavities from `src` and writes into `dst`
  // (the same object in sequential mode).
  double update_factor(const MessageSet& src, MessageSet& dst, std::size_t a, double gamma, std::size_t sweep,
                       bool sequential) {
    const Scope& s = g_.scope(a);
    const FactorPlan& fp = plans_[a];
    n0_.resize(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) node_cavity(src, a, k, n0_[k]);
    if (fp.coupled || !sequential) factor_cavity(src, a, m0_);
    double delta = 0.0;
    std::vector<double> tmp;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const std::size_t card = g_.cardinality(s[k]);
      tmp.resize(card);
      for (std::size_t x = 0; x < card; ++x) {
        double v = fp.e_nn[k] * n0_[k][x];
        if (fp.e_nm[k] != 0.0) v += fp.e_nm[k] * m0_[k][x];
        tmp[x] = v;
      }
      delta = std::max(delta, write(dst.to_factor(g_.incidence_id(a, k)), tmp, gamma, sweep, a, k));
    }
    // Sequential mode: the factor-to-node update sees the node-to-factor messages just written.
    if (sequential) factor_cavity(dst, a, m0_);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const std::size_t card = g_.cardinality(s[k]);
      tmp.resize(card);
      for (std::size_t x = 0; x < card; ++x) {
        double v = fp.e_mm[k] * m0_[k][x];
        if (fp.e_mn[k] != 0.0) v += fp.e_mn[k] * n0_[k][x];
        tmp[x] = v;
      }
      delta = std::max(delta, write(dst.to_node(g_.incidence_id(a, k)), tmp, gamma, sweep, a, k));
    }
    return delta;
  }

  double sweep(MessageSet& msg, double gamma, Schedule schedule, std::size_t sweep_index) {
    double delta = 0.0;
    if (schedule == Schedule::sequential) {
      for (std::size_t a = 0; a < g_.num_factors(); ++a)
        delta = std::max(delta, update_factor(msg, msg, a, gamma, sweep_index, true));
    } else {
      const MessageSet old = msg;
      for (std::size_t a = 0; a < g_.num_factors(); ++a)
        delta = std::max(delta, update_factor(old, msg, a, gamma, sweep_index, false));
    }
    return delta;
  }

 private:
  const FactorGraph& g_;
  const LogPotentials& p_;
  std::vector<FactorPlan> plans_;
  std::vector<double> joint_;
  std::vector<double> upd_;
  std::vector<std::vector<double>> n0_;
  std::vector<std::vector<double>> m0_;
};

}  // namespace detail

/// Beliefs from messages: mu_a ~ exp(theta_a / c_a) prod_{i in a} n_{i->a};
/// mu_i is the average of the marginals of its adjacent factor beliefs
/// (softmax of theta_i for isolated variables).
inline BeliefSet extract_beliefs(const FactorGraph& g, const LogPotentials& p, const CountingNumbers& c,
                                 const MessageSet& msg) {
  BeliefSet b;
  b.factor.resize(g.num_factors());
  for (std::size_t a = 0; a < g.num_factors(); ++a) {
    const Scope& s = g.scope(a);
    const auto st = g.strides(a);
    std::vector<double> t(p.factor[a]);
    for (std::size_t x = 0; x < t.size(); ++x) {
      t[x] /= c.factor[a];
      for (std::size_t k = 0; k < s.size(); ++k)
        t[x] += msg.to_factor(g.incidence_id(a, k))[(x / st[k]) % g.cardinality(s[k])];
    }
    log_normalize(t);
    for (double& v : t) v = std::exp(v);
    b.factor[a] = std::move(t);
  }
  b.node.resize(g.num_vars());
  for (std::size_t i = 0; i < g.num_vars(); ++i) {
    if (g.degree(i) == 0) {
      std::vector<double> t(p.node[i]);
      log_normalize(t);
      for (double& v : t) v = std::exp(v);
      b.node[i] = std::move(t);
      continue;
    }
    std::vector<double> avg(g.cardinality(i), 0.0);
    for (const auto& inc : g.incidences(i)) {
      const auto m = marginalize(g, inc.factor, inc.position, b.factor[inc.factor]);
      for (std::size_t x = 0; x < avg.size(); ++x) avg[x] += m[x];
    }
    const double total = std::accumulate(avg.begin(), avg.end(), 0.0);
    for (double& v : avg) v /= total;
    b.node[i] = std::move(avg);
  }
  return b;
}

/// Local entropies and multi-informations of a belief set (nats).
inline EntropyVector entropy_vector(const FactorGraph& g, const BeliefSet& b) {
  EntropyVector h;
  h.node.resize(g.num_vars());
  for (std::size_t i = 0; i < g.num_vars(); ++i) h.node[i] = entropy(b.node[i]);
  h.factor.resize(g.num_factors());
  h.multi_information.resize(g.num_factors());
  for (std::size_t a = 0; a < g.num_factors(); ++a) {
    h.factor[a] = entropy(b.factor[a]);
    double s = -h.factor[a];
    for (std::size_t v : g.scope(a)) s += h.node[v];
    h.multi_information[a] = s;
  }
  return h;
}

/// theta'mu + sum_i c_i H_i(mu_i) + sum_a c_a H_a(mu_a).
inline double evaluate_objective(const FactorGraph& g, const BeliefSet& b, const LogPotentials& p,
                                 const CountingNumbers& c) {
  double f = 0.0;
  for (std::size_t i = 0; i < g.num_vars(); ++i) {
    for (std::size_t x = 0; x < b.node[i].size(); ++x) f += p.node[i][x] * b.node[i][x];
    f += c.node[i] * entropy(b.node[i]);
  }
  for (std::size_t a = 0; a < g.num_factors(); ++a) {
    for (std::size_t x = 0; x < b.factor[a].size(); ++x) f += p.factor[a][x] * b.factor[a][x];
    f += c.factor[a] * entropy(b.factor[a]);
  }
  return f;
}

/// Approximate entropy H_c(mu).
inline double approximate_entropy(const FactorGraph& g, const BeliefSet& b, const CountingNumbers& c) {
  double h = 0.0;
  for (std::size_t i = 0; i < g.num_vars(); ++i) h += c.node[i] * entropy(b.node[i]);
  for (std::size_t a = 0; a < g.num_factors(); ++a) h += c.factor[a] * entropy(b.factor[a]);
  return h;
}

struct EntropyGap {
  double lhs = 0.0;  // H_c(mu) - H_b(mu)
  double rhs = 0.0;  // sum_a (1 - c_a) I_a(mu_a)
};

/// Both sides of the entropy-gap identity for variable-valid c.
inline EntropyGap entropy_gap_identity(const FactorGraph& g, const BeliefSet& b, const CountingNumbers& c) {
  if (!is_variable_valid(c, g, 1e-9)) throw InvalidArgument("entropy gap identity needs variable-valid counting numbers");
  EntropyGap gap;
  gap.lhs = approximate_entropy(g, b, c) - approximate_entropy(g, b, bethe_numbers(g));
  const EntropyVector h = entropy_vector(g, b);
  for (std::size_t a = 0; a < g.num_factors(); ++a) gap.rhs += (1.0 - c.factor[a]) * h.multi_information[a];
  return gap;
}

inline MessageSet initial_messages(const FactorGraph& g, const PropagationOptions& opts) {
  MessageSet msg(g);
  if (opts.init_noise > 0.0) {
    Rng rng(derive_seed(opts.seed, 0x6d7367));
    for (std::size_t e = 0; e < msg.num_incidences(); ++e) {
      for (auto span : {msg.to_node(e), msg.to_factor(e)}) {
        for (double& v : span) v += opts.init_noise * rng.normal();
        log_normalize(span);
      }
    }
  }
  return msg;
}

/// Generalized belief propagation for arbitrary counting numbers with
/// c_a != 0. Reduces to standard sum-product for the Bethe numbers.
/// Non-convergence is reported through `converged`, not thrown.
inline InferenceResult run_counting_bp(const FactorGraph& g, const LogPotentials& p, const CountingNumbers& c,
                                       const PropagationOptions& opts = {}, const MessageSet* warm_start = nullptr) {
  if (!(opts.damping > 0.0 && opts.damping <= 1.0)) throw InvalidArgument("damping must lie in (0, 1]");
  if (!(opts.tol > 0.0)) throw InvalidArgument("tolerance must be positive");
  detail::CountingBp bp(g, p, c);
  InferenceResult r;
  if (warm_start && warm_start->matches(g)) r.messages = *warm_start;
  else r.messages = initial_messages(g, opts);

  if (g.num_factors() == 0) r.converged = true;
  for (std::size_t it = 1; it <= opts.max_iters && !r.converged; ++it) {
    const double delta = bp.sweep(r.messages, opts.damping, opts.schedule, it);
    r.iterations = it;
    if (opts.observer) opts.observer(it, r.messages);
    if (delta < opts.tol) r.converged = true;
  }
  r.beliefs = extract_beliefs(g, p, c, r.messages);
  r.log_partition_estimate = evaluate_objective(g, r.beliefs, p, c);
  return r;
}

}  // namespace cbfe
