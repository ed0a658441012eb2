#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "cbfe/error.hpp"

namespace cbfe {

/// min c'x  s.t.  A x = b,  x >= 0
struct LinearProgram {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd c;
};

enum class LpStatus { optimal, infeasible, unbounded, iteration_limit };

struct LpResult {
  LpStatus status = LpStatus::iteration_limit;
  Eigen::VectorXd x;
  double objective = std::numeric_limits<double>::quiet_NaN();
  /// Phase-one optimum: total artificial mass left. Above feasibility_tol means infeasible.
  double infeasibility = 0.0;
  std::size_t pivots = 0;
};

struct LpOptions {
  double feasibility_tol = 1e-8;
  double pivot_tol = 1e-9;
  double optimality_tol = 1e-11;
  std::size_t max_pivots = 200000;
  /// Consecutive degenerate pivots tolerated before switching to Bland's rule.
  std::size_t degenerate_limit = 50;
};

namespace detail {

// Dense tableau. Row m is the objective row holding reduced costs; the last
// column is the right-hand side.
class Tableau {
 public:
  Tableau(Eigen::MatrixXd t, std::vector<std::size_t> basis, const LpOptions& opts)
      : t_(std::move(t)), basis_(std::move(basis)), opts_(opts) {}

  std::size_t rows() const { return static_cast<std::size_t>(t_.rows()) - 1; }
  std::size_t cols() const { return static_cast<std::size_t>(t_.cols()) - 1; }
  Eigen::MatrixXd& data() { return t_; }
  std::vector<std::size_t>& basis() { return basis_; }
  std::size_t pivots() const { return pivots_; }

  void pivot(std::size_t r, std::size_t col) {
    const auto ri = static_cast<Eigen::Index>(r);
    const auto ci = static_cast<Eigen::Index>(col);
    t_.row(ri) /= t_(ri, ci);
    for (Eigen::Index k = 0; k < t_.rows(); ++k) {
      if (k == ri) continue;
      const double f = t_(k, ci);
      if (f != 0.0) t_.row(k) -= f * t_.row(ri);
    }
    basis_[r] = col;
    ++pivots_;
  }

  /// Runs simplex pivots over columns [0, ncols). Returns optimal/unbounded/iteration_limit.
  LpStatus optimize(std::size_t ncols) {
    const auto m = static_cast<Eigen::Index>(rows());
    const auto rhs = static_cast<Eigen::Index>(cols());
    std::size_t degenerate = 0;
    while (pivots_ < opts_.max_pivots) {
      const bool bland = degenerate >= opts_.degenerate_limit;
      std::size_t enter = ncols;
      double best = -opts_.optimality_tol;
      for (std::size_t j = 0; j < ncols; ++j) {
        const double rc = t_(m, static_cast<Eigen::Index>(j));
        if (rc < best) {
          enter = j;
          if (bland) break;
          best = rc;
        }
      }
      if (enter == ncols) return LpStatus::optimal;
      const auto ej = static_cast<Eigen::Index>(enter);
      std::size_t leave = rows();
      double ratio = std::numeric_limits<double>::infinity();
      for (Eigen::Index r = 0; r < m; ++r) {
        const double a = t_(r, ej);
        if (a <= opts_.pivot_tol) continue;
        const double q = std::max(t_(r, rhs), 0.0) / a;
        const auto ru = static_cast<std::size_t>(r);
        if (q < ratio - 1e-14 || (q <= ratio + 1e-14 && leave < rows() && basis_[ru] < basis_[leave])) {
          ratio = q;
          leave = ru;
        }
      }
      if (leave == rows()) return LpStatus::unbounded;
      degenerate = ratio <= 1e-14 ? degenerate + 1 : 0;
      pivot(leave, enter);
    }
    return LpStatus::iteration_limit;
  }

 private:
  Eigen::MatrixXd t_;
  std::vector<std::size_t> basis_;
  LpOptions opts_;
  std::size_t pivots_ = 0;
};

}  // namespace detail

/// Two-phase dense simplex. Dantzig pricing with a fallback to Bland's rule
/// after a run of degenerate pivots.
inline LpResult solve_lp(const LinearProgram& lp, const LpOptions& opts = {}) {
  const auto m = lp.A.rows();
  const auto n = lp.A.cols();
  if (lp.b.size() != m || lp.c.size() != n) throw InvalidArgument("linear program shape mismatch");

  // Phase one tableau: [A I b] with artificials basic.
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(m + 1, n + m + 1);
  for (Eigen::Index r = 0; r < m; ++r) {
    const double sign = lp.b(r) < 0.0 ? -1.0 : 1.0;
    t.row(r).head(n) = sign * lp.A.row(r);
    t(r, n + r) = 1.0;
    t(r, n + m) = sign * lp.b(r);
  }
  for (Eigen::Index r = 0; r < m; ++r) {
    t.row(m).head(n) -= t.row(r).head(n);
    t(m, n + m) -= t(r, n + m);
  }
  std::vector<std::size_t> basis(static_cast<std::size_t>(m));
  for (Eigen::Index r = 0; r < m; ++r) basis[static_cast<std::size_t>(r)] = static_cast<std::size_t>(n + r);
  detail::Tableau tab(std::move(t), std::move(basis), opts);

  LpResult res;
  const auto nu = static_cast<std::size_t>(n);
  auto st = tab.optimize(nu + static_cast<std::size_t>(m));
  res.pivots = tab.pivots();
  if (st == LpStatus::iteration_limit) return res;
  res.infeasibility = -tab.data()(m, n + m);
  if (res.infeasibility > opts.feasibility_tol) {
    res.status = LpStatus::infeasible;
    return res;
  }

  // Drive artificials out of the basis; rows where that is impossible are redundant.
  {
    Eigen::MatrixXd& d = tab.data();
    std::vector<Eigen::Index> redundant;
    for (std::size_t r = 0; r < tab.rows(); ++r) {
      if (tab.basis()[r] < nu) continue;
      const auto ri = static_cast<Eigen::Index>(r);
      Eigen::Index best = -1;
      double mag = opts.pivot_tol;
      for (Eigen::Index j = 0; j < n; ++j)
        if (std::abs(d(ri, j)) > mag) {
          mag = std::abs(d(ri, j));
          best = j;
        }
      if (best >= 0) tab.pivot(r, static_cast<std::size_t>(best));
      else redundant.push_back(ri);
    }
    // Phase two tableau without artificial columns and redundant rows.
    const Eigen::Index keep_rows = m - static_cast<Eigen::Index>(redundant.size());
    Eigen::MatrixXd t2 = Eigen::MatrixXd::Zero(keep_rows + 1, n + 1);
    std::vector<std::size_t> basis2;
    Eigen::Index out = 0;
    for (Eigen::Index r = 0; r < m; ++r) {
      if (std::find(redundant.begin(), redundant.end(), r) != redundant.end()) continue;
      t2.row(out).head(n) = d.row(r).head(n);
      t2(out, n) = d(r, n + m);
      basis2.push_back(tab.basis()[static_cast<std::size_t>(r)]);
      ++out;
    }
    t2.row(keep_rows).head(n) = lp.c.transpose();
    for (Eigen::Index r = 0; r < keep_rows; ++r) {
      const double cb = lp.c(static_cast<Eigen::Index>(basis2[static_cast<std::size_t>(r)]));
      if (cb != 0.0) t2.row(keep_rows) -= cb * t2.row(r);
    }
    detail::Tableau tab2(std::move(t2), std::move(basis2), opts);
    st = tab2.optimize(nu);
    res.pivots += tab2.pivots();
    res.status = st;
    if (st != LpStatus::optimal) return res;
    res.x = Eigen::VectorXd::Zero(n);
    for (std::size_t r = 0; r < tab2.rows(); ++r)
      res.x(static_cast<Eigen::Index>(tab2.basis()[r])) = std::max(0.0, tab2.data()(static_cast<Eigen::Index>(r), n));
    res.objective = lp.c.dot(res.x);
  }
  return res;
}

}  // namespace cbfe
