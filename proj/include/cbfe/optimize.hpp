#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cbfe/counting.hpp"
#include "cbfe/error.hpp"
#include "cbfe/linprog.hpp"
#include "cbfe/model.hpp"
#include "cbfe/polytope.hpp"
#include "cbfe/propagation.hpp"
#include "cbfe/quadprog.hpp"

namespace cbfe {

// ---------------------------------------------------------------------------
// Static choices: closest certified counting numbers

struct CountingQpResult {
  CountingNumbers c;
  ConvexityCertificate certificate;
  double objective = 0.0;  // (c - b)' W (c - b)
  double kkt_residual = 0.0;
  bool converged = false;
  std::string warning;
};

namespace detail {

// Rows of c -> (c_i + sum_{a ni i} c_a) for every variable.
inline Eigen::MatrixXd variable_validity_map(const FactorGraph& g) {
  Eigen::MatrixXd E = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.num_vars()),
                                            static_cast<Eigen::Index>(g.num_vars() + g.num_factors()));
  for (std::size_t i = 0; i < g.num_vars(); ++i) {
    E(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
    for (const auto& inc : g.incidences(i))
      E(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g.num_vars() + inc.factor)) = 1.0;
  }
  return E;
}

// min (Mz - b)' W (Mz - b) over z >= 0, optionally with variable validity.
inline CountingQpResult closest_certified(const FactorGraph& g, const Eigen::MatrixXd& W, bool variable_valid) {
  const CertificateLayout layout(g);
  const Eigen::MatrixXd M = layout.counting_map(g);
  const Eigen::VectorXd b = bethe_numbers(g).stacked();
  QuadraticProgram qp;
  qp.H = 2.0 * M.transpose() * W * M;
  qp.H = 0.5 * (qp.H + qp.H.transpose()).eval();
  qp.g = -2.0 * M.transpose() * (W * b);
  if (variable_valid) {
    qp.A = variable_validity_map(g) * M;
    qp.b = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(g.num_vars()));
  } else {
    qp.A.resize(0, M.cols());
    qp.b.resize(0);
  }
  const QpResult r = solve_qp(qp);
  CountingQpResult out;
  out.certificate = layout.certificate(g, r.x);
  out.c = layout.counting(g, out.certificate);
  const Eigen::VectorXd d = out.c.stacked() - b;
  out.objective = d.dot(W * d);
  out.kkt_residual = r.kkt_residual;
  out.converged = r.kkt_residual <= 1e-8;
  if (!out.converged) out.warning = "QP KKT residual " + std::to_string(r.kkt_residual) + " above 1e-8";
  return out;
}

}  // namespace detail

/// Certified, variable-valid counting numbers closest to Bethe in Euclidean norm.
inline CountingQpResult convex_bethe_c(const FactorGraph& g) {
  const auto n = static_cast<Eigen::Index>(g.num_vars() + g.num_factors());
  return detail::closest_certified(g, Eigen::MatrixXd::Identity(n, n), true);
}

/// Certified counting numbers closest to Bethe in the entropy-moment norm
/// (b - c)' A (b - c); variable validity is optional.
inline CountingQpResult convex_bethe_mu(const FactorGraph& g, const EntropyMoments& moments,
                                        bool enforce_variable_valid) {
  const auto n = static_cast<Eigen::Index>(g.num_vars() + g.num_factors());
  if (moments.A.rows() != n || moments.A.cols() != n)
    throw InvalidArgument("entropy moments do not match the graph");
  CountingQpResult r = detail::closest_certified(g, moments.A, enforce_variable_valid);
  if (!moments.converged) {
    const std::string w = "entropy moments did not pass the convergence diagnostic";
    r.warning = r.warning.empty() ? w : r.warning + "; " + w;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Inner problem: max over L(G) of the free energy at fixed c

struct InnerOptions {
  PropagationOptions bp;
  /// Retry (cold start) when the first run does not converge.
  double retry_damping = 0.1;
  std::size_t retry_iters = 20000;
  AscentOptions ascent;
};

struct InnerSolution {
  BeliefSet beliefs;
  double value = 0.0;                     // max_mu F_c
  std::vector<double> multi_information;  // I_a at the maximizer
  bool converged = false;
  bool fallback = false;
};

/// Solves the inner problem repeatedly for nearby counting numbers, carrying
/// messages between calls and falling back to direct ascent over L(G) when
/// propagation does not converge.
class InnerSolver {
 public:
  InnerSolver(const FactorGraph& g, const LogPotentials& p, InnerOptions opts = {})
      : g_(g), p_(p), opts_(std::move(opts)) {}

  InnerSolution solve(const CountingNumbers& c) {
    ++calls_;
    InnerSolution s;
    std::optional<InferenceResult> r;
    try {
      r = run_counting_bp(g_, p_, c, opts_.bp, have_warm_ ? &warm_ : nullptr);
      if (!r->converged) {
        PropagationOptions slow = opts_.bp;
        slow.damping = std::min(slow.damping, opts_.retry_damping);
        slow.max_iters = std::max(slow.max_iters, opts_.retry_iters);
        r = run_counting_bp(g_, p_, c, slow);
      }
    } catch (const NumericalError&) {
      r.reset();
    }
    if (r && r->converged) {
      warm_ = r->messages;
      have_warm_ = true;
      s.beliefs = std::move(r->beliefs);
      s.value = r->log_partition_estimate;
      s.converged = true;
    } else {
      if (!poly_) poly_ = std::make_unique<LocalPolytope>(g_);
      const AscentResult a = maximize_free_energy(*poly_, p_, c, opts_.ascent);
      s.beliefs = a.beliefs;
      s.value = a.objective;
      s.converged = a.converged;
      s.fallback = true;
      ++fallbacks_;
    }
    s.multi_information = entropy_vector(g_, s.beliefs).multi_information;
    return s;
  }

  std::size_t calls() const { return calls_; }
  std::size_t fallbacks() const { return fallbacks_; }

 private:
  const FactorGraph& g_;
  const LogPotentials& p_;
  InnerOptions opts_;
  MessageSet warm_;
  bool have_warm_ = false;
  std::unique_ptr<LocalPolytope> poly_;
  std::size_t calls_ = 0;
  std::size_t fallbacks_ = 0;
};

/// Derivative of max_mu F_c with respect to c_a inside the variable-valid
/// set (c_i moving with its factors): -I_a at the inner maximizer.
inline std::vector<double> subgradient_wrt_counting(const FactorGraph& g, const LogPotentials& p,
                                                    const CountingNumbers& c, const InnerOptions& opts = {}) {
  if (!is_variable_valid(c, g, 1e-9)) throw InvalidArgument("subgradient is defined on variable-valid counting numbers");
  InnerSolver solver(g, p, opts);
  std::vector<double> d = solver.solve(c).multi_information;
  for (double& v : d) v = -v;
  return d;
}

// ---------------------------------------------------------------------------
// Adaptive choices: conditional gradient on the bound

struct BoundOptions {
  std::size_t max_outer = 30;
  double gap_tol = 1e-5;
  std::size_t max_probes = 20;  // inner solves per line search
  // step cap keeps every c_a at least this large; below a few percent the
  // inner optimum sits at exp(-theta / c_a) and neither solver is reliable
  double min_factor = 0.05;
  InnerOptions inner;
};

struct BoundTraceRow {
  std::size_t iteration = 0;
  double bound = 0.0;
  double gap = 0.0;
  double step = 0.0;
  std::size_t inference_calls = 0;
};

struct BoundResult {
  CountingNumbers c;
  std::optional<ConvexityCertificate> certificate;
  double bound = 0.0;
  BeliefSet beliefs;  // inner maximizer at c
  bool inner_converged = false;
  double gap = std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  std::size_t inference_calls = 0;
  std::size_t fallbacks = 0;
  bool converged = false;
  std::vector<BoundTraceRow> trace;
};

inline void write_bound_trace(std::ostream& os, const std::vector<BoundTraceRow>& trace) {
  const auto prec = os.precision();
  os << std::setprecision(17) << "iteration,bound,fw_gap,step,inference_calls\n";
  for (const auto& r : trace)
    os << r.iteration << ',' << r.bound << ',' << r.gap << ',' << r.step << ',' << r.inference_calls << '\n';
  os.precision(prec);
}

namespace detail {

// Frank-Wolfe over factor counting numbers x (node numbers completed to be
// variable-valid). `direction(I)` returns the minimizer of -s'I over the
// feasible set plus its auxiliary vector; z tracks a certificate-like
// auxiliary vector along convex combinations (may be empty).
template <class Direction>
BoundResult frank_wolfe(const FactorGraph& g, InnerSolver& solver, std::vector<double> x, Eigen::VectorXd z,
                        const BoundOptions& opts, Direction direction) {
  const std::size_t F = g.num_factors();
  BoundResult res;
  InnerSolution cur = solver.solve(complete_variable_valid(g, x));
  res.trace.push_back({0, cur.value, std::numeric_limits<double>::quiet_NaN(), 0.0, solver.calls()});

  for (std::size_t it = 1; it <= opts.max_outer; ++it) {
    const auto [s, zs] = direction(cur.multi_information);
    double gap = 0.0;
    for (std::size_t a = 0; a < F; ++a) gap += (s[a] - x[a]) * cur.multi_information[a];
    res.gap = gap;
    res.iterations = it - 1;
    if (gap < opts.gap_tol) {
      res.converged = true;
      break;
    }
    // step cap: stay at least min_factor away from c_a = 0
    double gmax = 1.0;
    for (std::size_t a = 0; a < F; ++a)
      if (s[a] < opts.min_factor && x[a] > s[a])
        gmax = std::min(gmax, std::max(0.0, (x[a] - opts.min_factor) / (x[a] - s[a])));
    auto point = [&](double gam) {
      std::vector<double> y(F);
      for (std::size_t a = 0; a < F; ++a) y[a] = x[a] + gam * (s[a] - x[a]);
      return y;
    };
    auto slope = [&](const InnerSolution& sol) {
      double d = 0.0;
      for (std::size_t a = 0; a < F; ++a) d -= (s[a] - x[a]) * sol.multi_information[a];
      return d;
    };

    // bisection on the sign of the directional derivative
    double best_gamma = 0.0;
    InnerSolution best = cur;
    double lo = 0.0, hi = gmax;
    const double slope0 = -gap;
    for (std::size_t probe = 0; probe < opts.max_probes && gmax > 0.0; ++probe) {
      const double gam = probe == 0 ? gmax : 0.5 * (lo + hi);
      InnerSolution sol = solver.solve(complete_variable_valid(g, point(gam)));
      // an unconverged inner solve is no bound; treat it as overshooting
      const double d = sol.converged ? slope(sol) : std::numeric_limits<double>::infinity();
      if (sol.converged && sol.value < best.value) {
        best = sol;
        best_gamma = gam;
      }
      if (probe == 0 && d <= 0.0) break;  // still descending at the far end
      if (d < 0.0) lo = gam;
      else hi = gam;
      if (!sol.converged) continue;
      if (std::abs(d) < 0.1 * std::abs(slope0) || hi - lo < 1e-3 * gmax) break;
    }
    res.trace.push_back({it, best.value, gap, best_gamma, solver.calls()});
    if (best_gamma == 0.0) {
      res.iterations = it;
      break;  // no probe improved the bound
    }
    x = point(best_gamma);
    if (z.size() > 0 && zs.size() > 0) z += best_gamma * (zs - z);
    cur = std::move(best);
    res.iterations = it;
  }
  res.c = complete_variable_valid(g, x);
  res.bound = cur.value;
  res.beliefs = std::move(cur.beliefs);
  res.inner_converged = cur.converged;
  res.inference_calls = solver.calls();
  res.fallbacks = solver.fallbacks();
  if (z.size() > 0) res.certificate = CertificateLayout(g).certificate(g, z);
  return res;
}

}  // namespace detail

/// Minimizes g(c) = max_mu F_c over certified, variable-valid counting
/// numbers with c_a <= 1, by conditional gradient with an LP direction.
inline BoundResult convex_bethe_u(const FactorGraph& g, const LogPotentials& p, const BoundOptions& opts = {}) {
  p.validate(g);
  const CertificateLayout layout(g);
  const Eigen::MatrixXd M = layout.counting_map(g);
  const auto V = static_cast<Eigen::Index>(g.num_vars());
  const auto F = static_cast<Eigen::Index>(g.num_factors());
  const auto Z = M.cols();

  // Feasible set in (z, u): variable validity E M z = 1 and caps (Mz)_a + u_a = 1.
  LinearProgram lp;
  lp.A = Eigen::MatrixXd::Zero(V + F, Z + F);
  lp.A.topLeftCorner(V, Z) = detail::variable_validity_map(g) * M;
  lp.A.bottomLeftCorner(F, Z) = M.bottomRows(F);
  lp.A.bottomRightCorner(F, F) = Eigen::MatrixXd::Identity(F, F);
  lp.b = Eigen::VectorXd::Ones(V + F);

  auto direction = [&](const std::vector<double>& I) {
    lp.c = Eigen::VectorXd::Zero(Z + F);
    for (Eigen::Index a = 0; a < F; ++a) lp.c.head(Z) -= I[static_cast<std::size_t>(a)] * M.row(V + a).transpose();
    const LpResult r = solve_lp(lp);
    if (r.status != LpStatus::optimal) throw NumericalError("direction LP failed");
    const Eigen::VectorXd z = r.x.head(Z);
    const Eigen::VectorXd c = M * z;
    std::vector<double> s(static_cast<std::size_t>(F));
    for (Eigen::Index a = 0; a < F; ++a) s[static_cast<std::size_t>(a)] = std::min(1.0, c(V + a));
    return std::pair{s, z};
  };

  // Starting point: the best of a few feasible candidates.
  struct Candidate {
    std::vector<double> x;
    Eigen::VectorXd z;
  };
  std::vector<Candidate> cands;
  auto add_candidate = [&](const CountingNumbers& c) {
    if (!is_variable_valid(c, g, 1e-9)) return;
    for (double v : c.factor)
      if (v > 1.0 + 1e-10 || v < opts.min_factor) return;
    const auto cert = find_convexity_certificate(c, g);
    if (!cert) return;
    Eigen::VectorXd z(Z);
    for (std::size_t i = 0; i < g.num_vars(); ++i) z(layout.nn(i)) = cert->c_nn[i];
    for (std::size_t a = 0; a < g.num_factors(); ++a) z(layout.ff(a)) = cert->c_ff[a];
    for (std::size_t e = 0; e < g.num_incidences(); ++e) z(layout.nf(e)) = cert->c_nf[e];
    std::vector<double> x(c.factor);
    for (double& v : x) v = std::min(v, 1.0);
    cands.push_back({std::move(x), std::move(z)});
  };
  if (g.is_pairwise() && g.num_factors() > 0) add_candidate(trw_numbers(g, default_trees(g)));
  {
    std::size_t dmax = 1, kmax = 2;
    for (std::size_t i = 0; i < g.num_vars(); ++i) dmax = std::max(dmax, g.degree(i));
    for (std::size_t k : g.cardinalities()) kmax = std::max(kmax, k);
    const double t = std::min(1.0, 1.0 / (static_cast<double>(dmax) * (1.0 - 1.0 / static_cast<double>(kmax))));
    add_candidate(complete_variable_valid(g, std::vector<double>(g.num_factors(), t)));
  }
  const CountingQpResult cbc = convex_bethe_c(g);
  add_candidate(cbc.c);
  if (cands.empty()) throw NumericalError("no feasible starting point for the bound minimizer");

  InnerSolver solver(g, p, opts.inner);
  std::size_t best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const InnerSolution sol = solver.solve(complete_variable_valid(g, cands[k].x));
    const double v = sol.converged ? sol.value : std::numeric_limits<double>::infinity();
    if (v < best_value) {
      best_value = v;
      best = k;
    }
  }
  return detail::frank_wolfe(g, solver, cands[best].x, cands[best].z, opts, direction);
}

/// Conditional gradient over the spanning-tree polytope: each direction is
/// the maximum-weight spanning tree under the current multi-informations.
inline BoundResult trw_opt(const FactorGraph& g, const LogPotentials& p, const BoundOptions& opts = {}) {
  p.validate(g);
  detail::require_pairwise(g, "TRW optimization");
  const std::vector<double> rho = edge_appearance(g, default_trees(g));
  InnerSolver solver(g, p, opts.inner);
  auto direction = [&](const std::vector<double>& I) {
    std::vector<double> s(g.num_factors(), 0.0);
    for (std::size_t a : maximum_spanning_tree(g, I)) s[a] = 1.0;
    return std::pair{s, Eigen::VectorXd()};
  };
  BoundResult r = detail::frank_wolfe(g, solver, rho, Eigen::VectorXd(), opts, direction);
  r.certificate = find_convexity_certificate(r.c, g);
  return r;
}

}  // namespace cbfe
