#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cbfe/beliefs.hpp"
#include "cbfe/counting.hpp"
#include "cbfe/error.hpp"
#include "cbfe/model.hpp"
#include "cbfe/propagation.hpp"
#include "cbfe/rng.hpp"

namespace cbfe {

/// The local polytope L(G) over the flattened belief vector: node tables in
/// variable order, then factor tables in factor order.
class LocalPolytope {
 public:
  explicit LocalPolytope(const FactorGraph& g) : g_(&g) {
    node_off_.assign(g.num_vars() + 1, 0);
    for (std::size_t i = 0; i < g.num_vars(); ++i) node_off_[i + 1] = node_off_[i] + g.cardinality(i);
    factor_off_.assign(g.num_factors() + 1, node_off_.back());
    for (std::size_t a = 0; a < g.num_factors(); ++a) factor_off_[a + 1] = factor_off_[a] + g.table_size(a);
    const auto dim = static_cast<Eigen::Index>(factor_off_.back());

    std::size_t rows = g.num_vars();
    for (std::size_t a = 0; a < g.num_factors(); ++a)
      for (std::size_t v : g.scope(a)) rows += g.cardinality(v);
    A_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), dim);
    b_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows));
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < g.num_vars(); ++i, ++r) {
      for (std::size_t x = 0; x < g.cardinality(i); ++x) A_(r, idx(node_off_[i] + x)) = 1.0;
      b_(r) = 1.0;
    }
    for (std::size_t a = 0; a < g.num_factors(); ++a) {
      const Scope& s = g.scope(a);
      const auto st = g.strides(a);
      for (std::size_t k = 0; k < s.size(); ++k) {
        const std::size_t card = g.cardinality(s[k]);
        for (std::size_t xk = 0; xk < card; ++xk) A_(r + idx(xk), idx(node_off_[s[k]] + xk)) = -1.0;
        for (std::size_t x = 0; x < g.table_size(a); ++x) A_(r + idx((x / st[k]) % card), idx(factor_off_[a] + x)) = 1.0;
        r += idx(card);
      }
    }

    // Rank-revealing QR of A': the leading columns of Q span the row space,
    // the trailing ones the null space.
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A_.transpose());
    rank_ = static_cast<std::size_t>(qr.rank());
    const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, dim);
    basis_ = Q.rightCols(dim - idx(rank_));

    uniform_ = flatten(BeliefSet::uniform(g));
  }

  const FactorGraph& graph() const { return *g_; }
  std::size_t dim() const { return factor_off_.back(); }
  std::size_t null_dim() const { return static_cast<std::size_t>(basis_.cols()); }
  std::size_t rank() const { return rank_; }
  /// All equality rows (normalization and marginalization), redundant ones included.
  const Eigen::MatrixXd& equalities() const { return A_; }
  const Eigen::VectorXd& rhs() const { return b_; }
  /// Orthonormal basis of the equality null space, one column per direction.
  const Eigen::MatrixXd& basis() const { return basis_; }
  const Eigen::VectorXd& uniform_point() const { return uniform_; }

  std::size_t node_offset(std::size_t i) const { return node_off_[i]; }
  std::size_t factor_offset(std::size_t a) const { return factor_off_[a]; }

  Eigen::VectorXd flatten(const BeliefSet& b) const {
    Eigen::VectorXd v(idx(dim()));
    for (std::size_t i = 0; i < b.node.size(); ++i)
      for (std::size_t x = 0; x < b.node[i].size(); ++x) v(idx(node_off_[i] + x)) = b.node[i][x];
    for (std::size_t a = 0; a < b.factor.size(); ++a)
      for (std::size_t x = 0; x < b.factor[a].size(); ++x) v(idx(factor_off_[a] + x)) = b.factor[a][x];
    return v;
  }

  BeliefSet unflatten(const Eigen::VectorXd& v) const {
    BeliefSet b;
    b.node.resize(g_->num_vars());
    for (std::size_t i = 0; i < b.node.size(); ++i)
      b.node[i].assign(v.data() + node_off_[i], v.data() + node_off_[i + 1]);
    b.factor.resize(g_->num_factors());
    for (std::size_t a = 0; a < b.factor.size(); ++a)
      b.factor[a].assign(v.data() + factor_off_[a], v.data() + factor_off_[a + 1]);
    return b;
  }

  double equality_residual(const Eigen::VectorXd& v) const { return (A_ * v - b_).lpNorm<Eigen::Infinity>(); }

  /// Local entropies (H_i..., H_a...) of a flattened point.
  Eigen::VectorXd entropies(const Eigen::VectorXd& v) const {
    Eigen::VectorXd h(idx(g_->num_vars() + g_->num_factors()));
    auto ent = [&](std::size_t lo, std::size_t hi) {
      return entropy(std::span<const double>(v.data() + lo, hi - lo));
    };
    for (std::size_t i = 0; i < g_->num_vars(); ++i) h(idx(i)) = ent(node_off_[i], node_off_[i + 1]);
    for (std::size_t a = 0; a < g_->num_factors(); ++a)
      h(idx(g_->num_vars() + a)) = ent(factor_off_[a], factor_off_[a + 1]);
    return h;
  }

 private:
  static Eigen::Index idx(std::size_t k) { return static_cast<Eigen::Index>(k); }

  const FactorGraph* g_;
  std::vector<std::size_t> node_off_, factor_off_;
  Eigen::MatrixXd A_;
  Eigen::VectorXd b_;
  Eigen::MatrixXd basis_;
  Eigen::VectorXd uniform_;
  std::size_t rank_ = 0;
};

inline LocalPolytope build_polytope(const FactorGraph& g) { return LocalPolytope(g); }

// ---------------------------------------------------------------------------
// Hit-and-run

struct ChainState {
  Eigen::VectorXd x;
  std::size_t steps = 0;
  Rng rng{0};
};

/// Feasible interval [lo, hi] of t for x + t d >= 0.
inline std::pair<double, double> chord(const Eigen::VectorXd& x, const Eigen::VectorXd& d) {
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    if (d(j) > 0.0) lo = std::max(lo, -x(j) / d(j));
    else if (d(j) < 0.0) hi = std::min(hi, -x(j) / d(j));
  }
  return {lo, hi};
}

inline Eigen::VectorXd random_direction(const LocalPolytope& poly, Rng& rng) {
  Eigen::VectorXd z(static_cast<Eigen::Index>(poly.null_dim()));
  for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = rng.normal();
  z /= z.norm();
  return poly.basis() * z;
}

/// One hit-and-run move: Gaussian direction in the null-space basis, the
/// full chord through the current point, and a uniform point on the chord
/// shrunk by 1e-12 of its length at both ends.
inline void hit_and_run_step(const LocalPolytope& poly, ChainState& s) {
  if (poly.null_dim() == 0) {
    ++s.steps;
    return;
  }
  for (int attempt = 0; attempt < 100; ++attempt) {
    const Eigen::VectorXd d = random_direction(poly, s.rng);
    const auto [lo, hi] = chord(s.x, d);
    const double len = hi - lo;
    if (!(len >= 1e-14) || !std::isfinite(len)) continue;
    const double eps = 1e-12 * len;
    s.x += s.rng.uniform(lo + eps, hi - eps) * d;
    ++s.steps;
    return;
  }
  throw NumericalError("hit-and-run: degenerate chord after 100 direction draws");
}

/// Interior starting point: the uniform point moved along a random direction
/// by a tenth of the distance to the boundary.
inline Eigen::VectorXd perturbed_start(const LocalPolytope& poly, Rng& rng) {
  Eigen::VectorXd x = poly.uniform_point();
  if (poly.null_dim() == 0) return x;
  const Eigen::VectorXd d = random_direction(poly, rng);
  return x + 0.1 * chord(x, d).second * d;
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Potential scale reduction factor over the second half of each trace.
inline double gelman_rubin(const std::vector<std::vector<double>>& traces) {
  if (traces.size() < 2) throw InvalidArgument("Gelman-Rubin needs at least two chains");
  const std::size_t len = traces[0].size();
  for (const auto& t : traces)
    if (t.size() != len) throw InvalidArgument("Gelman-Rubin needs equal-length chains");
  if (len < 4) throw InvalidArgument("Gelman-Rubin needs at least four samples per chain");
  const std::size_t start = len / 2;
  const double n = static_cast<double>(len - start);
  const double m = static_cast<double>(traces.size());
  std::vector<double> means;
  double W = 0.0;
  for (const auto& t : traces) {
    double mean = 0.0;
    for (std::size_t k = start; k < len; ++k) mean += t[k];
    mean /= n;
    double var = 0.0;
    for (std::size_t k = start; k < len; ++k) var += (t[k] - mean) * (t[k] - mean);
    W += var / (n - 1.0);
    means.push_back(mean);
  }
  W /= m;
  double grand = 0.0;
  for (double v : means) grand += v;
  grand /= m;
  double B = 0.0;
  for (double v : means) B += (v - grand) * (v - grand);
  B *= n / (m - 1.0);
  if (!(W > 0.0)) return std::numeric_limits<double>::infinity();
  return std::sqrt(((n - 1.0) / n * W + B / n) / W);
}

// ---------------------------------------------------------------------------
// Entropy moments

struct MomentsOptions {
  std::size_t chains = 5;
  std::size_t samples_per_chain = 2000;  // thinned samples kept per chain
  std::size_t thin = 10;
  double rhat_threshold = 1.1;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::size_t batches = 20;  // batch means per chain for standard errors
};

/// Monte-Carlo second moments of the local-entropy vector (H_i..., H_a...)
/// under the uniform distribution on L(G).
struct EntropyMoments {
  Eigen::MatrixXd A;
  Eigen::MatrixXd standard_error;  // batch-means standard error per entry (0 when not estimated)
  std::size_t sample_count = 0;
  std::vector<double> rhat;  // per statistic, over the accumulation phase
  std::size_t burn_in = 0;   // thinned samples per chain discarded before accumulation
  double max_infeasibility = 0.0;  // worst equality residual or negative entry over kept samples
  bool converged = false;
  double max_rhat() const {
    double r = 0.0;
    for (double v : rhat) r = std::max(r, v);
    return r;
  }
};

namespace detail {

template <class F>
void for_each_chain(std::size_t chains, std::size_t jobs, F&& f) {
  jobs = std::max<std::size_t>(1, std::min(jobs, chains));
  if (jobs == 1) {
    for (std::size_t c = 0; c < chains; ++c) f(c);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t c = w; c < chains; c += jobs) f(c);
    });
  for (auto& t : pool) t.join();
}

inline double max_rhat(const std::vector<std::vector<Eigen::VectorXd>>& traces, std::vector<double>* out = nullptr) {
  const auto stats = traces[0].empty() ? 0 : traces[0][0].size();
  double worst = 0.0;
  std::vector<std::vector<double>> per(traces.size());
  for (Eigen::Index s = 0; s < stats; ++s) {
    for (std::size_t c = 0; c < traces.size(); ++c) {
      per[c].resize(traces[c].size());
      for (std::size_t k = 0; k < traces[c].size(); ++k) per[c][k] = traces[c][k](s);
    }
    const double r = gelman_rubin(per);
    if (out) out->push_back(r);
    worst = std::max(worst, std::isnan(r) ? std::numeric_limits<double>::infinity() : r);
  }
  return worst;
}

}  // namespace detail

/// Two phases. Burn-in: chains advance in blocks while R-hat (second half of
/// the traces so far) is monitored on every local entropy, up to
/// samples_per_chain thinned samples. Accumulation: samples_per_chain fresh
/// thinned samples per chain are pooled into A = mean(H H'). Standard errors
/// come from batch means; the flag is false when burn-in hit its cap or the
/// accumulation traces fail the R-hat threshold.
inline EntropyMoments estimate_entropy_moments(const FactorGraph& g, const MomentsOptions& opts) {
  if (opts.chains < 2) throw InvalidArgument("entropy moments need at least two chains");
  if (opts.samples_per_chain < 8 || opts.thin < 1) throw InvalidArgument("too few samples for entropy moments");
  const LocalPolytope poly(g);
  const auto D = static_cast<Eigen::Index>(g.num_vars() + g.num_factors());
  const std::size_t C = opts.chains;

  std::vector<ChainState> st(C);
  for (std::size_t c = 0; c < C; ++c) {
    st[c].rng = Rng(derive_seed(opts.seed, c));
    st[c].x = perturbed_start(poly, st[c].rng);
  }
  auto advance = [&](ChainState& s) {
    for (std::size_t k = 0; k < opts.thin; ++k) hit_and_run_step(poly, s);
  };

  EntropyMoments res;
  bool burned = false;
  {
    const std::size_t block = std::max<std::size_t>(50, opts.samples_per_chain / 10);
    std::vector<std::vector<Eigen::VectorXd>> traces(C);
    while (traces[0].size() < opts.samples_per_chain) {
      const std::size_t n = std::min(block, opts.samples_per_chain - traces[0].size());
      detail::for_each_chain(C, opts.jobs, [&](std::size_t c) {
        for (std::size_t k = 0; k < n; ++k) {
          advance(st[c]);
          traces[c].push_back(poly.entropies(st[c].x));
        }
      });
      if (traces[0].size() >= 4 && detail::max_rhat(traces) < opts.rhat_threshold) {
        burned = true;
        break;
      }
    }
    res.burn_in = traces[0].size();
  }

  const std::size_t N = opts.samples_per_chain;
  const std::size_t nb = std::max<std::size_t>(1, std::min(opts.batches, N / 2));
  std::vector<std::vector<Eigen::MatrixXd>> batch(C, std::vector<Eigen::MatrixXd>(nb, Eigen::MatrixXd::Zero(D, D)));
  std::vector<std::vector<std::size_t>> batch_n(C, std::vector<std::size_t>(nb, 0));
  std::vector<std::vector<Eigen::VectorXd>> traces(C);
  std::vector<double> infeasible(C, 0.0);
  detail::for_each_chain(C, opts.jobs, [&](std::size_t c) {
    traces[c].reserve(N);
    for (std::size_t k = 0; k < N; ++k) {
      advance(st[c]);
      infeasible[c] = std::max({infeasible[c], poly.equality_residual(st[c].x), -st[c].x.minCoeff()});
      const Eigen::VectorXd h = poly.entropies(st[c].x);
      const std::size_t bi = std::min(nb - 1, k * nb / N);
      batch[c][bi].selfadjointView<Eigen::Lower>().rankUpdate(h);
      ++batch_n[c][bi];
      traces[c].push_back(h);
    }
  });

  // Deterministic reduction in chain and batch order.
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(D, D);
  std::vector<Eigen::MatrixXd> means;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t b = 0; b < nb; ++b) {
      Eigen::MatrixXd full = batch[c][b].selfadjointView<Eigen::Lower>();
      sum += full;
      means.push_back(full / static_cast<double>(batch_n[c][b]));
    }
  res.sample_count = N * C;
  for (double v : infeasible) res.max_infeasibility = std::max(res.max_infeasibility, v);
  res.A = sum / static_cast<double>(res.sample_count);
  res.A = 0.5 * (res.A + res.A.transpose()).eval();
  res.standard_error = Eigen::MatrixXd::Zero(D, D);
  if (means.size() > 1) {
    for (const auto& m : means) res.standard_error += (m - res.A).cwiseAbs2();
    const double nm = static_cast<double>(means.size());
    res.standard_error = (res.standard_error / (nm - 1.0) / nm).cwiseSqrt();
  }
  res.rhat.clear();
  const double final_rhat = detail::max_rhat(traces, &res.rhat);
  res.converged = burned && final_rhat < opts.rhat_threshold;
  return res;
}

/// Text matrix: "rows cols" header, then one row per line, 17 significant digits.
inline void write_moments(std::ostream& os, const Eigen::MatrixXd& A) {
  const auto prec = os.precision();
  os << std::setprecision(17) << A.rows() << ' ' << A.cols() << '\n';
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    for (Eigen::Index c = 0; c < A.cols(); ++c) os << (c ? " " : "") << A(r, c);
    os << '\n';
  }
  os.precision(prec);
}

inline Eigen::MatrixXd read_moments(std::istream& is) {
  detail::LineReader in(is);
  std::string line = in.require("matrix dimensions");
  const auto dims = detail::parse_numbers<std::size_t>(line, in.line(), "matrix dimensions");
  if (dims.size() != 2) throw ParseError(in.line(), "expected 'rows cols'");
  Eigen::MatrixXd A(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    line = in.require("matrix row");
    const auto row = detail::parse_numbers<double>(line, in.line(), "matrix row");
    if (row.size() != dims[1]) throw ParseError(in.line(), "matrix row has wrong length");
    for (Eigen::Index c = 0; c < A.cols(); ++c) A(r, c) = row[static_cast<std::size_t>(c)];
  }
  if (in.next(line)) throw ParseError(in.line(), "trailing content after matrix");
  return A;
}

// ---------------------------------------------------------------------------
// Direct maximization of the free energy over L(G)

struct AscentOptions {
  std::size_t max_iters = 500;
  double tol = 1e-9;  // on the projected gradient norm
};

struct AscentResult {
  BeliefSet beliefs;
  double objective = 0.0;
  double gradient_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Maximizes theta'mu + H_c(mu) over L(G) in null-space coordinates: Newton
/// steps when the reduced Hessian is negative definite, projected gradient
/// otherwise, each with a fraction-to-boundary cap and Armijo backtracking.
/// If that stalls, a log-barrier path (weight 1e-2 down to 1e-12) follows.
inline AscentResult maximize_free_energy(const LocalPolytope& poly, const LogPotentials& p, const CountingNumbers& c,
                                         const AscentOptions& opts = {}, const BeliefSet* start = nullptr) {
  const FactorGraph& g = poly.graph();
  const auto n = static_cast<Eigen::Index>(poly.dim());
  Eigen::VectorXd theta(n), weight(n);
  {
    const Eigen::VectorXd t = poly.flatten({p.node, p.factor});
    theta = t;
    for (std::size_t i = 0; i < g.num_vars(); ++i)
      for (std::size_t x = 0; x < g.cardinality(i); ++x)
        weight(static_cast<Eigen::Index>(poly.node_offset(i) + x)) = c.node[i];
    for (std::size_t a = 0; a < g.num_factors(); ++a)
      for (std::size_t x = 0; x < g.table_size(a); ++x)
        weight(static_cast<Eigen::Index>(poly.factor_offset(a) + x)) = c.factor[a];
  }
  auto objective = [&](const Eigen::VectorXd& v) {
    double f = theta.dot(v);
    for (Eigen::Index j = 0; j < n; ++j)
      if (v(j) > 0.0) f -= weight(j) * v(j) * std::log(v(j));
    return f;
  };

  Eigen::VectorXd x = start ? poly.flatten(*start) : poly.uniform_point();
  if (x.minCoeff() <= 1e-12) x = 0.9 * x + 0.1 * poly.uniform_point();  // pull boundary starts inside
  const Eigen::MatrixXd& B = poly.basis();
  AscentResult r;

  // Newton on f + mu * sum log x. mu = 0 is the plain problem; its optimum
  // may sit on the boundary when c is only weakly concave (c_a = 0), and
  // then only the barrier path gets there.
  auto newton = [&](double mu, std::size_t budget, double tol) {
    auto fmu = [&](const Eigen::VectorXd& v) { return objective(v) + (mu > 0.0 ? mu * v.array().log().sum() : 0.0); };
    double f = fmu(x);
    for (std::size_t it = 0; it < budget; ++it, ++r.iterations) {
      Eigen::VectorXd grad = theta - weight.cwiseProduct((x.array().log() + 1.0).matrix());
      Eigen::VectorXd curv = weight.cwiseQuotient(x);
      if (mu > 0.0) {
        grad += mu * x.cwiseInverse();
        curv += mu * x.cwiseAbs2().cwiseInverse();
      }
      const Eigen::VectorXd rg = B.transpose() * grad;
      r.gradient_norm = rg.norm();
      if (r.gradient_norm < opts.tol) return true;
      const Eigen::MatrixXd H = B.transpose() * curv.asDiagonal() * B;
      Eigen::VectorXd dz;
      const Eigen::LLT<Eigen::MatrixXd> llt(H);
      if (llt.info() == Eigen::Success) dz = llt.solve(rg);
      if (dz.size() == 0 || !dz.allFinite() || dz.dot(rg) <= 0.0) dz = rg;
      else if (mu > 0.0 && 0.5 * dz.dot(rg) < tol) return true;  // Newton decrement
      const Eigen::VectorXd d = B * dz;
      double t = std::min(1.0, 0.95 * chord(x, d).second);
      const double slope = grad.dot(d);
      bool moved = false;
      for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
        const Eigen::VectorXd y = x + t * d;
        if (y.minCoeff() <= 0.0) continue;
        const double fy = fmu(y);
        if (fy >= f + 1e-4 * t * slope) {
          x = y;
          f = fy;
          moved = true;
          break;
        }
      }
      if (!moved) return false;
    }
    return false;
  };

  r.converged = newton(0.0, opts.max_iters, 0.0);
  if (!r.converged) {
    if (x.minCoeff() < 1e-8) x = 0.5 * x + 0.5 * poly.uniform_point();
    bool ok = true;
    for (double mu = 1e-2; ok && mu >= 1e-12; mu *= 0.1) ok = newton(mu, opts.max_iters, 1e-14);
    r.converged = ok;
  }
  const double f = objective(x);
  r.beliefs = poly.unflatten(x);
  r.objective = f;
  return r;
}

}  // namespace cbfe
